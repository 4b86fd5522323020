//! Sampling and the autoregressive decode loop.

use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::llm::{KvCache, Llm};
use crate::ops::softmax_in_place;
use crate::{Error, Result};

/// Monotonic time source in seconds. The core has no clock of its own.
pub trait Clock {
    fn now(&self) -> f64;
}

/// A clock that never advances.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn now(&self) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
    /// 0 selects greedy decoding.
    pub temperature: f32,
    pub top_p: f32,
    pub seed: u64,
    pub stop_ids: Vec<u32>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 64,
            temperature: 0.0,
            top_p: 1.0,
            seed: 0,
            stop_ids: Vec::new(),
        }
    }
}

impl GenerationConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            max_new_tokens,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::Argument("max_new_tokens must be >= 1".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(Error::Argument(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Argument(format!("top_p must be in (0, 1], got {}", self.top_p)));
        }
        Ok(())
    }
}

/// Index of the largest logit; ties go to the lowest id.
pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Seeded temperature / top-p sampler.
#[derive(Debug, Clone)]
pub struct Sampler {
    temperature: f32,
    top_p: f32,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(cfg: &GenerationConfig) -> Self {
        Self {
            temperature: cfg.temperature,
            top_p: cfg.top_p,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        }
    }

    fn uniform(&mut self) -> f32 {
        (self.rng.next_u32() >> 8) as f32 / (1u32 << 24) as f32
    }

    pub fn sample(&mut self, logits: &[f32]) -> u32 {
        if self.temperature == 0.0 {
            return argmax(logits);
        }
        let mut probs: Vec<f32> = logits.iter().map(|l| l / self.temperature).collect();
        softmax_in_place(&mut probs);
        let mut order: Vec<u32> = (0..probs.len() as u32).collect();
        // stable: equal probabilities keep ascending id order
        order.sort_by(|a, b| probs[*b as usize].total_cmp(&probs[*a as usize]));
        let mut keep = order.len();
        let mut cum = 0.0f32;
        for (i, id) in order.iter().enumerate() {
            cum += probs[*id as usize];
            if cum >= self.top_p {
                keep = i + 1;
                break;
            }
        }
        let kept = &order[..keep];
        let total: f32 = kept.iter().map(|id| probs[*id as usize]).sum();
        let mut r = self.uniform() * total;
        for id in kept {
            r -= probs[*id as usize];
            if r < 0.0 {
                return *id;
            }
        }
        kept[keep - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxTokens,
    StopToken,
    Cancelled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    /// Clock reading when each token was produced.
    pub timestamps: Vec<f64>,
    pub stop: StopReason,
}

/// Generates from the logits left by prefill.
///
/// `on_token` sees every token as it is produced and may return `false`
/// to stop early. The cache is extended with every token except the last.
pub fn generate(
    llm: &Llm,
    cache: &mut KvCache,
    first_logits: Vec<f32>,
    cfg: &GenerationConfig,
    clock: &dyn Clock,
    mut on_token: impl FnMut(u32) -> bool,
) -> Result<Generation> {
    cfg.validate()?;
    let mut sampler = Sampler::new(cfg);
    let mut logits = first_logits;
    let mut tokens = Vec::with_capacity(cfg.max_new_tokens);
    let mut timestamps = Vec::with_capacity(cfg.max_new_tokens);
    let stop = loop {
        let id = sampler.sample(&logits);
        tokens.push(id);
        timestamps.push(clock.now());
        if !on_token(id) {
            break StopReason::Cancelled;
        }
        if cfg.stop_ids.contains(&id) {
            break StopReason::StopToken;
        }
        if tokens.len() == cfg.max_new_tokens {
            break StopReason::MaxTokens;
        }
        logits = llm.decode_step(cache, id)?;
    };
    Ok(Generation {
        tokens,
        timestamps,
        stop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0; 5]), 0);
    }

    #[test]
    fn greedy_is_invariant_to_positive_rescaling() {
        let logits = [0.3, -1.0, 2.2, 2.1, 0.0];
        let want = argmax(&logits);
        for s in [0.01f32, 0.5, 1.0, 7.0, 1e3] {
            let scaled: Vec<f32> = logits.iter().map(|l| l * s).collect();
            assert_eq!(argmax(&scaled), want);
        }
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let logits: Vec<f32> = (0..50).map(|i| ((i * 37) % 11) as f32 * 0.3).collect();
        let cfg = GenerationConfig {
            temperature: 0.8,
            top_p: 0.9,
            seed: 42,
            ..Default::default()
        };
        let run = || {
            let mut s = Sampler::new(&cfg);
            (0..100).map(|_| s.sample(&logits)).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn tiny_top_p_collapses_to_argmax() {
        let logits = [0.1, 4.0, 0.2, 3.9];
        let cfg = GenerationConfig {
            temperature: 1.0,
            top_p: 1e-6,
            seed: 3,
            ..Default::default()
        };
        let mut s = Sampler::new(&cfg);
        for _ in 0..20 {
            assert_eq!(s.sample(&logits), 1);
        }
    }

    #[test]
    fn top_p_excludes_the_tail() {
        // probabilities ≈ [0.665, 0.245, 0.090]; p = 0.8 keeps two
        let logits = [2.0, 1.0, 0.0];
        let cfg = GenerationConfig {
            temperature: 1.0,
            top_p: 0.8,
            seed: 9,
            ..Default::default()
        };
        let mut s = Sampler::new(&cfg);
        for _ in 0..500 {
            assert_ne!(s.sample(&logits), 2);
        }
    }

    #[test]
    fn config_validation() {
        assert!(GenerationConfig::greedy(0).validate().is_err());
        let bad = GenerationConfig {
            top_p: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = GenerationConfig {
            temperature: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(GenerationConfig {
            stop_ids: vec![1],
            ..Default::default()
        }
        .validate()
        .is_ok());
    }
}
