//! Seeded random tiny models for tests, demos and benchmarks.
//!
//! Weights are uniform in `±gain/√fan_in`; the tokenizer is a small BPE
//! vocabulary learned greedily from a fixed built-in text.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::lora::{LoraAdapter, LoraPair};
use crate::manifest::{keys, InMemoryModel, Manifest, MetaValue};
use crate::tokenizer::{SpecialTokens, Tokenizer};
use crate::vision::PreprocessMode;
use crate::{Error, Result, Tensor};

const CORPUS: &str = "the quick brown fox jumps over the lazy dog. \
what is in the image? describe the picture in detail. there is a cat on the table \
and a dog in the garden. the weather is sunny and the sky is blue. \
请描述这张图片。 これは何ですか？ 🙂 the answer is yes. ASSISTANT: USER: ";

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub name: &'static str,
    pub seed: u64,
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context_len: usize,
    pub tied_embeddings: bool,
    pub vit_d_model: usize,
    pub vit_n_layers: usize,
    pub vit_n_heads: usize,
    pub vit_d_ff: usize,
    pub patch_size: usize,
    pub image_res: usize,
    pub connector_hidden: usize,
    pub preprocess: PreprocessMode,
    pub biases: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            name: "imp-toy",
            seed: 0,
            vocab_size: 320,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            context_len: 1024,
            tied_embeddings: true,
            vit_d_model: 64,
            vit_n_layers: 2,
            vit_n_heads: 4,
            vit_d_ff: 128,
            patch_size: 14,
            image_res: 112,
            connector_hidden: 64,
            preprocess: PreprocessMode::ResizeThenPad,
            biases: true,
        }
    }
}

type Pair = (Vec<u8>, Vec<u8>);

/// Greedy pair-merge vocabulary over the built-in text, growing to
/// `vocab_size` tokens (at least the 256 bytes plus three specials).
pub fn toy_tokenizer(vocab_size: usize) -> Tokenizer {
    let mut vocab: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    vocab.extend([b"<s>".to_vec(), b"</s>".to_vec(), b"<image>".to_vec()]);
    let special = SpecialTokens {
        bos: 256,
        eos: 257,
        image: 258,
    };
    let mut words: Vec<Vec<Vec<u8>>> = CORPUS
        .split_inclusive(' ')
        .map(|w| w.bytes().map(|b| vec![b]).collect())
        .collect();
    let mut merges = Vec::new();
    while vocab.len() < vocab_size {
        let mut counts: BTreeMap<Pair, usize> = BTreeMap::new();
        for w in &words {
            for p in w.windows(2) {
                *counts.entry((p[0].clone(), p[1].clone())).or_default() += 1;
            }
        }
        let mut best: Option<(&Pair, usize)> = None;
        for (pair, n) in &counts {
            if best.is_none_or(|(_, bn)| *n > bn) {
                best = Some((pair, *n));
            }
        }
        let Some(((l, r), _)) = best else { break };
        let (l, r) = (l.clone(), r.clone());
        let joined = [l.as_slice(), r.as_slice()].concat();
        for w in words.iter_mut() {
            let mut out = Vec::with_capacity(w.len());
            let mut i = 0;
            while i < w.len() {
                if i + 1 < w.len() && w[i] == l && w[i + 1] == r {
                    out.push(joined.clone());
                    i += 2;
                } else {
                    out.push(w[i].clone());
                    i += 1;
                }
            }
            *w = out;
        }
        if !vocab.contains(&joined) {
            vocab.push(joined);
        }
        merges.push((l, r));
    }
    // pad with unused distinct tokens if the corpus ran out of pairs
    let mut filler = 0u32;
    while vocab.len() < vocab_size {
        let t = format!("<unused{filler}>").into_bytes();
        filler += 1;
        if !vocab.contains(&t) {
            vocab.push(t);
        }
    }
    Tokenizer::new(vocab, &merges, special).expect("toy vocabulary is valid")
}

struct Init {
    rng: ChaCha8Rng,
    tensors: Vec<(alloc::string::String, Tensor)>,
}

impl Init {
    fn uniform(&mut self) -> f32 {
        (self.rng.next_u32() >> 8) as f32 / (1u32 << 24) as f32 * 2.0 - 1.0
    }

    fn values(&mut self, n: usize, scale: f32, offset: f32) -> Vec<f32> {
        (0..n).map(|_| offset + scale * self.uniform()).collect()
    }

    fn push(&mut self, name: &str, shape: Vec<usize>, values: Vec<f32>) {
        let t = Tensor::from_f32(shape, &values).expect("toy tensor");
        self.tensors.push((name.to_string(), t));
    }

    fn linear(&mut self, prefix: &str, out: usize, inp: usize, bias: bool) {
        let s = 1.0 / libm::sqrtf(inp as f32);
        let w = self.values(out * inp, s * 1.7, 0.0);
        self.push(&format!("{prefix}.weight"), vec![out, inp], w);
        if bias {
            let b = self.values(out, 0.02, 0.0);
            self.push(&format!("{prefix}.bias"), vec![out], b);
        }
    }

    fn norm(&mut self, prefix: &str, dim: usize) {
        let g = self.values(dim, 0.1, 1.0);
        let b = self.values(dim, 0.05, 0.0);
        self.push(&format!("{prefix}.weight"), vec![dim], g);
        self.push(&format!("{prefix}.bias"), vec![dim], b);
    }

    fn block(&mut self, prefix: &str, d: usize, d_ff: usize, bias: bool) {
        self.norm(&format!("{prefix}.ln1"), d);
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{prefix}.attn.{p}"), d, d, bias);
        }
        self.norm(&format!("{prefix}.ln2"), d);
        self.linear(&format!("{prefix}.mlp.fc1"), d_ff, d, bias);
        self.linear(&format!("{prefix}.mlp.fc2"), d, d_ff, bias);
    }
}

/// Builds metadata for `cfg`, tokenizer included.
pub fn toy_metadata(cfg: &ToyConfig, tokenizer: &Tokenizer) -> Vec<(alloc::string::String, MetaValue)> {
    let mut m = Manifest::new();
    m.set(keys::GENERAL_NAME, cfg.name);
    m.set(keys::LLM_D_MODEL, cfg.d_model);
    m.set(keys::LLM_N_LAYERS, cfg.n_layers);
    m.set(keys::LLM_N_HEADS, cfg.n_heads);
    m.set(keys::LLM_VOCAB_SIZE, tokenizer.vocab_size());
    m.set(keys::LLM_CONTEXT_LEN, cfg.context_len);
    m.set(keys::LLM_D_FF, cfg.d_ff);
    m.set(keys::LLM_ROPE_THETA, 10_000.0f64);
    m.set(keys::LLM_NORM_EPS, 1e-5f64);
    m.set(keys::LLM_TIED_EMBEDDINGS, cfg.tied_embeddings as i64);
    m.set(keys::LLM_TEMPLATE, crate::llm::DEFAULT_TEMPLATE);
    m.set(keys::VIT_D_MODEL, cfg.vit_d_model);
    m.set(keys::VIT_N_LAYERS, cfg.vit_n_layers);
    m.set(keys::VIT_N_HEADS, cfg.vit_n_heads);
    m.set(keys::VIT_D_FF, cfg.vit_d_ff);
    m.set(keys::VIT_PATCH_SIZE, cfg.patch_size);
    m.set(keys::VIT_IMAGE_RES, cfg.image_res);
    m.set(keys::VIT_FEATURE_LAYER, cfg.vit_n_layers);
    m.set(keys::VIT_PREPROCESS, cfg.preprocess.name());
    for (k, v) in keys::VIT_IMAGE_MEAN
        .iter()
        .zip([0.481_454_66, 0.457_827_5, 0.408_210_73])
    {
        m.set(k, v);
    }
    for (k, v) in keys::VIT_IMAGE_STD
        .iter()
        .zip([0.268_629_54, 0.261_302_58, 0.275_777_11])
    {
        m.set(k, v);
    }
    m.set(keys::CONNECTOR_HIDDEN_DIM, cfg.connector_hidden);
    tokenizer.store(&mut m);
    m.metadata().to_vec()
}

/// A complete random model for `cfg`.
pub fn toy_model(cfg: &ToyConfig) -> Result<InMemoryModel> {
    let tokenizer = toy_tokenizer(cfg.vocab_size);
    let metadata = toy_metadata(cfg, &tokenizer);
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        tensors: Vec::new(),
    };
    let (vd, d) = (cfg.vit_d_model, cfg.d_model);
    let grid = cfg.image_res / cfg.patch_size;
    let bias = cfg.biases;

    init.linear("vit.patch_embed", vd, 3 * cfg.patch_size * cfg.patch_size, bias);
    let pos = init.values(grid * grid * vd, 0.1, 0.0);
    init.push("vit.pos_embed", vec![grid * grid, vd], pos);
    for i in 0..cfg.vit_n_layers {
        init.block(&format!("vit.blocks.{i}"), vd, cfg.vit_d_ff, bias);
    }

    init.linear("connector.fc1", cfg.connector_hidden, vd, bias);
    init.linear("connector.fc2", d, cfg.connector_hidden, bias);

    let vocab = tokenizer.vocab_size();
    let emb = init.values(vocab * d, 0.6, 0.0);
    init.push("llm.tok_embed.weight", vec![vocab, d], emb);
    for i in 0..cfg.n_layers {
        init.block(&format!("llm.blocks.{i}"), d, cfg.d_ff, bias);
    }
    init.norm("llm.ln_f", d);
    if !cfg.tied_embeddings {
        init.linear("llm.lm_head", vocab, d, false);
    }
    InMemoryModel::new(metadata, init.tensors)
}

/// Random adapter over `targets` of `base`. `A` entries lie in `±1/√d_in`
/// and `B` entries in `±b_scale`; `b_scale = 0` gives a no-op adapter.
pub fn toy_adapter(
    base: &InMemoryModel,
    targets: &[alloc::string::String],
    rank: usize,
    alpha: f32,
    b_scale: f32,
    seed: u64,
) -> Result<LoraAdapter> {
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
        tensors: Vec::new(),
    };
    let mut out = BTreeMap::new();
    for t in targets {
        let info = base
            .manifest
            .tensor(t)
            .ok_or_else(|| Error::Consistency(format!("no tensor {t:?} to adapt")))?;
        let (d_out, d_in) = (info.shape[0], info.shape[1]);
        let a = init.values(rank * d_in, 1.0 / libm::sqrtf(d_in as f32), 0.0);
        let b = init.values(d_out * rank, b_scale, 0.0);
        out.insert(
            t.clone(),
            LoraPair {
                a: Tensor::from_f32(vec![rank, d_in], &a)?,
                b: Tensor::from_f32(vec![d_out, rank], &b)?,
            },
        );
    }
    Ok(LoraAdapter {
        name: format!("toy-r{rank}-s{seed}"),
        alpha,
        rank,
        targets: out,
    })
}
