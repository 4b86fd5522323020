#![allow(dead_code)]

use imp_core::manifest::{InMemoryModel, TensorSource};
use imp_core::ops;
use imp_core::toy::ToyConfig;
use imp_core::Tensor;

pub fn tiny(seed: u64) -> ToyConfig {
    ToyConfig {
        seed,
        vocab_size: 300,
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        d_ff: 64,
        context_len: 64,
        vit_d_model: 32,
        vit_n_layers: 1,
        vit_n_heads: 2,
        vit_d_ff: 64,
        patch_size: 14,
        image_res: 28,
        connector_hidden: 32,
        ..ToyConfig::default()
    }
}

fn vec_of(m: &InMemoryModel, name: &str) -> Vec<f32> {
    m.load(name).unwrap().to_f32_vec().unwrap()
}

fn opt_vec(m: &InMemoryModel, name: &str) -> Option<Vec<f32>> {
    m.load_optional(name).unwrap().map(|t| t.to_f32_vec().unwrap())
}

/// `x [n×in] · Wᵀ + b` through the tensor-level matmul.
fn linear(m: &InMemoryModel, prefix: &str, x: &[f32], n: usize) -> Vec<f32> {
    let w = m.load(&format!("{prefix}.weight")).unwrap();
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    let wv = w.to_f32_vec().unwrap();
    let mut wt = vec![0.0; inp * out];
    for i in 0..out {
        for j in 0..inp {
            wt[j * out + i] = wv[i * inp + j];
        }
    }
    let xt = Tensor::from_f32(vec![n, inp], x).unwrap();
    let wt = Tensor::from_f32(vec![inp, out], &wt).unwrap();
    let mut y = ops::matmul(&xt, &wt).unwrap().to_f32_vec().unwrap();
    if let Some(b) = opt_vec(m, &format!("{prefix}.bias")) {
        for r in 0..n {
            for i in 0..out {
                y[r * out + i] += b[i];
            }
        }
    }
    y
}

fn norm_rows(m: &InMemoryModel, prefix: &str, x: &[f32], d: usize) -> Vec<f32> {
    let g = vec_of(m, &format!("{prefix}.weight"));
    let b = vec_of(m, &format!("{prefix}.bias"));
    x.chunks(d)
        .flat_map(|r| ops::layer_norm(r, &g, &b, 1e-5).unwrap())
        .collect()
}

/// Whole-sequence forward with no cache, built only from tensor ops.
/// Returns logits for every position.
pub fn reference_logits(m: &InMemoryModel, ids_or_embeds: &[f32], n: usize) -> Vec<Vec<f32>> {
    let meta = &m.manifest;
    let d = meta.get_int("llm.d_model").unwrap().unwrap() as usize;
    let layers = meta.get_int("llm.n_layers").unwrap().unwrap() as usize;
    let heads = meta.get_int("llm.n_heads").unwrap().unwrap() as usize;
    let hd = d / heads;
    let mut x = ids_or_embeds.to_vec();
    for l in 0..layers {
        let p = format!("llm.blocks.{l}");
        let h = norm_rows(m, &format!("{p}.ln1"), &x, d);
        let mut q = linear(m, &format!("{p}.attn.q"), &h, n);
        let mut k = linear(m, &format!("{p}.attn.k"), &h, n);
        let v = linear(m, &format!("{p}.attn.v"), &h, n);
        for t in 0..n {
            for buf in [&mut q, &mut k] {
                let row = Tensor::from_f32(vec![heads, hd], &buf[t * d..(t + 1) * d]).unwrap();
                let r = ops::rope_apply(&row, t, 10_000.0).unwrap().to_f32_vec().unwrap();
                buf[t * d..(t + 1) * d].copy_from_slice(&r);
            }
        }
        // [n × heads × hd] -> [heads × n × hd]
        let to_heads = |src: &[f32]| {
            let mut out = vec![0.0; n * d];
            for t in 0..n {
                for hh in 0..heads {
                    for e in 0..hd {
                        out[hh * n * hd + t * hd + e] = src[t * d + hh * hd + e];
                    }
                }
            }
            Tensor::from_f32(vec![heads, n, hd], &out).unwrap()
        };
        let a = ops::attention(&to_heads(&q), &to_heads(&k), &to_heads(&v), true)
            .unwrap()
            .to_f32_vec()
            .unwrap();
        let mut merged = vec![0.0; n * d];
        for t in 0..n {
            for hh in 0..heads {
                for e in 0..hd {
                    merged[t * d + hh * hd + e] = a[hh * n * hd + t * hd + e];
                }
            }
        }
        let o = linear(m, &format!("{p}.attn.o"), &merged, n);
        for (xv, ov) in x.iter_mut().zip(&o) {
            *xv += ov;
        }
        let h = norm_rows(m, &format!("{p}.ln2"), &x, d);
        let mut f = linear(m, &format!("{p}.mlp.fc1"), &h, n);
        for v in f.iter_mut() {
            *v = ops::gelu(*v);
        }
        let f = linear(m, &format!("{p}.mlp.fc2"), &f, n);
        for (xv, fv) in x.iter_mut().zip(&f) {
            *xv += fv;
        }
    }
    let h = norm_rows(m, "llm.ln_f", &x, d);
    let head = if m.manifest.tensor("llm.lm_head.weight").is_some() {
        "llm.lm_head"
    } else {
        "llm.tok_embed"
    };
    let logits = linear(m, head, &h, n);
    let vocab = logits.len() / n;
    logits.chunks(vocab).map(|c| c.to_vec()).collect()
}

/// Embedding rows for `ids` straight from the table.
pub fn embed_ids(m: &InMemoryModel, ids: &[u32]) -> Vec<f32> {
    let e = m.load("llm.tok_embed.weight").unwrap();
    let d = e.shape()[1];
    let v = e.to_f32_vec().unwrap();
    ids.iter()
        .flat_map(|&i| v[i as usize * d..(i as usize + 1) * d].to_vec())
        .collect()
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}
