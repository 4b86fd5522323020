//! Decoder-only language model with an incremental KV cache.
//!
//! Blocks are pre-norm: `x += o(attn(rope(q), rope(k), v))` on `ln1(x)`,
//! then `x += mlp(ln2(x))`. The output head is either tied to the token
//! embedding or a separate `llm.lm_head.weight`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::layers::{add_in_place, merge_heads, split_heads, LayerNorm, Linear, Mlp, WeightMatrix};
use crate::manifest::{keys, Manifest, TensorSource};
use crate::ops::{self, DEFAULT_NORM_EPS, DEFAULT_ROPE_THETA};
use crate::{Error, Result};

pub const DEFAULT_TEMPLATE: &str = "USER: <image>\n{prompt} ASSISTANT:";

#[derive(Debug, Clone, PartialEq)]
pub struct LlmConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub context_len: usize,
    pub d_ff: usize,
    pub rope_theta: f32,
    pub norm_eps: f32,
    pub tied_embeddings: bool,
    pub template: String,
}

impl LlmConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        let d_model = m.usize_or(keys::LLM_D_MODEL, None)?;
        let cfg = Self {
            d_model,
            n_layers: m.usize_or(keys::LLM_N_LAYERS, None)?,
            n_heads: m.usize_or(keys::LLM_N_HEADS, None)?,
            vocab_size: m.usize_or(keys::LLM_VOCAB_SIZE, None)?,
            context_len: m.usize_or(keys::LLM_CONTEXT_LEN, None)?,
            d_ff: m.usize_or(keys::LLM_D_FF, Some(4 * d_model))?,
            rope_theta: m
                .get_float(keys::LLM_ROPE_THETA)?
                .map_or(DEFAULT_ROPE_THETA, |v| v as f32),
            norm_eps: m.get_float(keys::LLM_NORM_EPS)?.map_or(DEFAULT_NORM_EPS, |v| v as f32),
            tied_embeddings: m.get_int(keys::LLM_TIED_EMBEDDINGS)?.unwrap_or(1) != 0,
            template: m.get_str(keys::LLM_TEMPLATE)?.unwrap_or(DEFAULT_TEMPLATE).into(),
        };
        if !cfg.d_model.is_multiple_of(cfg.n_heads) {
            return Err(Error::Config(format!(
                "llm.d_model {} is not divisible by llm.n_heads {}",
                cfg.d_model, cfg.n_heads
            )));
        }
        if !cfg.head_dim().is_multiple_of(2) {
            return Err(Error::Config(format!(
                "rope needs an even head_dim, got {}",
                cfg.head_dim()
            )));
        }
        Ok(cfg)
    }
}

/// Per-layer, per-head key/value history.
#[derive(Debug, Clone)]
pub struct KvCache {
    // [layer][head] -> [len × head_dim]
    keys: Vec<Vec<Vec<f32>>>,
    values: Vec<Vec<Vec<f32>>>,
    len: usize,
    capacity: usize,
}

impl KvCache {
    pub fn new(cfg: &LlmConfig) -> Self {
        let empty = || {
            (0..cfg.n_layers)
                .map(|_| (0..cfg.n_heads).map(|_| Vec::new()).collect())
                .collect()
        };
        Self {
            keys: empty(),
            values: empty(),
            len: 0,
            capacity: cfg.context_len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn remaining(&self) -> usize {
        self.capacity - self.len
    }

    /// Drops every position from `len` on.
    pub fn truncate(&mut self, len: usize) {
        if len >= self.len {
            return;
        }
        for (k, v) in self.keys.iter_mut().zip(self.values.iter_mut()) {
            for (kh, vh) in k.iter_mut().zip(v.iter_mut()) {
                let hd = kh.len() / self.len;
                kh.truncate(len * hd);
                vh.truncate(len * hd);
            }
        }
        self.len = len;
    }

    /// Keys of one layer and head, `[len × head_dim]`.
    pub fn layer_keys(&self, layer: usize, head: usize) -> &[f32] {
        &self.keys[layer][head]
    }

    pub fn layer_values(&self, layer: usize, head: usize) -> &[f32] {
        &self.values[layer][head]
    }
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct Llm {
    pub config: LlmConfig,
    tok_embed: WeightMatrix,
    blocks: Vec<DecoderBlock>,
    ln_f: LayerNorm,
    lm_head: Option<Linear>,
}

impl Llm {
    pub fn load(src: &dyn TensorSource) -> Result<Self> {
        let config = LlmConfig::from_manifest(src.manifest())?;
        let (d, eps) = (config.d_model, config.norm_eps);
        let embed = src.load("llm.tok_embed.weight")?;
        if embed.shape() != [config.vocab_size, d] {
            return Err(Error::Consistency(format!(
                "llm.tok_embed.weight has shape {:?}, expected [{}, {d}]",
                embed.shape(),
                config.vocab_size
            )));
        }
        let tok_embed = WeightMatrix::from_tensor(embed)?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = format!("llm.blocks.{i}");
            blocks.push(DecoderBlock {
                ln1: LayerNorm::load(src, &format!("{p}.ln1"), d, eps)?,
                q: Linear::load(src, &format!("{p}.attn.q"), d, d)?,
                k: Linear::load(src, &format!("{p}.attn.k"), d, d)?,
                v: Linear::load(src, &format!("{p}.attn.v"), d, d)?,
                o: Linear::load(src, &format!("{p}.attn.o"), d, d)?,
                ln2: LayerNorm::load(src, &format!("{p}.ln2"), d, eps)?,
                mlp: Mlp::load(src, &format!("{p}.mlp"), d, config.d_ff, d)?,
            });
        }
        let ln_f = LayerNorm::load(src, "llm.ln_f", d, eps)?;
        let lm_head = if config.tied_embeddings {
            None
        } else {
            Some(Linear::load(src, "llm.lm_head", config.vocab_size, d)?)
        };
        Ok(Self {
            config,
            tok_embed,
            blocks,
            ln_f,
            lm_head,
        })
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(&self.config)
    }

    /// Word embedding of `id`.
    pub fn embed(&self, id: u32) -> Result<Vec<f32>> {
        if id as usize >= self.config.vocab_size {
            return Err(Error::Argument(format!(
                "token id {id} outside vocab of {}",
                self.config.vocab_size
            )));
        }
        Ok(self.tok_embed.row(id as usize))
    }

    /// Every projection in the decoder, keyed by its weight tensor name.
    pub fn linears_mut(&mut self) -> Vec<(String, &mut Linear)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("llm.blocks.{i}");
            out.push((format!("{p}.attn.q.weight"), &mut b.q));
            out.push((format!("{p}.attn.k.weight"), &mut b.k));
            out.push((format!("{p}.attn.v.weight"), &mut b.v));
            out.push((format!("{p}.attn.o.weight"), &mut b.o));
            out.push((format!("{p}.mlp.fc1.weight"), &mut b.mlp.fc1));
            out.push((format!("{p}.mlp.fc2.weight"), &mut b.mlp.fc2));
        }
        if let Some(h) = self.lm_head.as_mut() {
            out.push(("llm.lm_head.weight".into(), h));
        }
        out
    }

    fn logits(&self, hidden: &[f32]) -> Vec<f32> {
        let h = self.ln_f.forward(hidden);
        match &self.lm_head {
            Some(head) => head.forward(&h),
            None => self.tok_embed.matvec(&h),
        }
    }

    /// Runs `x` (`[n × d_model]`) at positions `cache.len()..` and extends
    /// the cache. Returns logits for every new position when `all_logits`,
    /// otherwise only for the last one.
    pub fn forward(&self, cache: &mut KvCache, x: &[f32], all_logits: bool) -> Result<Vec<Vec<f32>>> {
        let d = self.config.d_model;
        if x.is_empty() || !x.len().is_multiple_of(d) {
            return Err(Error::shape("llm forward", &[x.len()], &[d]));
        }
        let n = x.len() / d;
        let start = cache.len;
        if start + n > cache.capacity {
            return Err(Error::Capacity {
                needed: start + n,
                limit: cache.capacity,
            });
        }
        let heads = self.config.n_heads;
        let hd = self.config.head_dim();
        let mut x = x.to_vec();
        for (layer, b) in self.blocks.iter().enumerate() {
            let h = b.ln1.forward_rows(&x);
            let mut q = b.q.forward_rows(&h);
            let mut k = b.k.forward_rows(&h);
            let v = b.v.forward_rows(&h);
            for t in 0..n {
                ops::rope_in_place(&mut q[t * d..(t + 1) * d], hd, start + t, self.config.rope_theta);
                ops::rope_in_place(&mut k[t * d..(t + 1) * d], hd, start + t, self.config.rope_theta);
            }
            let qh = split_heads(&q, n, heads, hd);
            let kh = split_heads(&k, n, heads, hd);
            let vh = split_heads(&v, n, heads, hd);
            let mut attn = Vec::with_capacity(heads);
            for i in 0..heads {
                cache.keys[layer][i].extend_from_slice(&kh[i]);
                cache.values[layer][i].extend_from_slice(&vh[i]);
                attn.push(ops::attention_head(
                    &qh[i],
                    &cache.keys[layer][i],
                    &cache.values[layer][i],
                    n,
                    start + n,
                    hd,
                    hd,
                    true,
                ));
            }
            add_in_place(&mut x, &b.o.forward_rows(&merge_heads(&attn, n, hd)));
            let h = b.ln2.forward_rows(&x);
            add_in_place(&mut x, &b.mlp.forward_rows(&h));
        }
        cache.len = start + n;
        let rows: Vec<usize> = if all_logits {
            (0..n).collect()
        } else {
            alloc::vec![n - 1]
        };
        Ok(rows.into_iter().map(|t| self.logits(&x[t * d..(t + 1) * d])).collect())
    }

    /// Prompt encoding: a fresh cache populated with `embeddings`, plus the
    /// logits at the final position.
    pub fn prefill(&self, embeddings: &[f32]) -> Result<(KvCache, Vec<f32>)> {
        let mut cache = self.new_cache();
        let logits = self.prefill_into(&mut cache, embeddings)?;
        Ok((cache, logits))
    }

    /// Appends `embeddings` to an existing cache (next chat turn).
    pub fn prefill_into(&self, cache: &mut KvCache, embeddings: &[f32]) -> Result<Vec<f32>> {
        let mut out = self.forward(cache, embeddings, false)?;
        Ok(out.pop().expect("one row"))
    }

    /// One generation step for `id`.
    pub fn decode_step(&self, cache: &mut KvCache, id: u32) -> Result<Vec<f32>> {
        if cache.len >= cache.capacity {
            return Err(Error::Capacity {
                needed: cache.len + 1,
                limit: cache.capacity,
            });
        }
        let e = self.embed(id)?;
        let mut out = self.forward(cache, &e, false)?;
        Ok(out.pop().expect("one row"))
    }
}
