//! Stage-decomposed inference timing.
//!
//! A single inference splits into visual encoding (`t_ve`), prompt
//! encoding (prefill, `n_prompt` tokens at `s_prompt` tokens/s) and
//! response generation (`n_gen` tokens at `s_gen` tokens/s), plus a
//! residual `t_other`:
//!
//! ```text
//! t_total = t_ve + n_prompt / s_prompt + n_gen / s_gen + t_other
//! ```
//!
//! Model loading is never part of a measurement.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::generate::{generate, Clock, Generation, GenerationConfig};
use crate::llm::KvCache;
use crate::multimodal::MultimodalModel;
use crate::vision::RgbImage;
use crate::{Error, Result};

/// Clock-resolution tolerance on the residual.
pub const CLOCK_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub t_ve: f64,
    pub t_prompt: f64,
    pub t_gen: f64,
    pub n_prompt: usize,
    pub n_gen: usize,
    /// Tokens/s of prefill, defined only when `t_prompt > 0`.
    pub s_prompt: Option<f64>,
    pub s_gen: Option<f64>,
    pub t_other: f64,
    pub t_total: f64,
}

fn rate(n: usize, t: f64) -> Option<f64> {
    (t > 0.0).then(|| n as f64 / t)
}

impl StageTimings {
    /// From measured stage durations and the wall time of the whole run.
    pub fn from_measurements(
        t_ve: f64,
        t_prompt: f64,
        t_gen: f64,
        n_prompt: usize,
        n_gen: usize,
        wall_total: f64,
    ) -> Self {
        Self {
            t_ve,
            t_prompt,
            t_gen,
            n_prompt,
            n_gen,
            s_prompt: rate(n_prompt, t_prompt),
            s_gen: rate(n_gen, t_gen),
            t_other: wall_total - t_ve - t_prompt - t_gen,
            t_total: wall_total,
        }
    }

    /// From reported throughputs, as in a published latency table.
    pub fn from_rates(
        t_ve: f64,
        n_prompt: usize,
        s_prompt: f64,
        n_gen: usize,
        s_gen: f64,
        t_other: f64,
    ) -> Result<Self> {
        let mut t = Self {
            t_ve,
            t_prompt: 0.0,
            t_gen: 0.0,
            n_prompt,
            n_gen,
            s_prompt: Some(s_prompt),
            s_gen: Some(s_gen),
            t_other,
            t_total: 0.0,
        };
        t.t_prompt = stage_time(n_prompt, t.s_prompt, "s_prompt")?;
        t.t_gen = stage_time(n_gen, t.s_gen, "s_gen")?;
        t.t_total = total_latency(&t)?;
        Ok(t)
    }

    /// Checks sign, residual and rate invariants.
    pub fn check(&self) -> Result<()> {
        for (name, v) in [
            ("t_ve", self.t_ve),
            ("t_prompt", self.t_prompt),
            ("t_gen", self.t_gen),
            ("t_total", self.t_total),
        ] {
            if v.is_nan() || v < 0.0 {
                return Err(Error::Consistency(format!("{name} = {v} is negative")));
            }
        }
        if self.t_other < -CLOCK_EPS {
            return Err(Error::Consistency(format!(
                "t_other = {} below -{CLOCK_EPS}",
                self.t_other
            )));
        }
        let sum = self.t_ve + self.t_prompt + self.t_gen + self.t_other;
        if (sum - self.t_total).abs() > 1e-9 * self.t_total.max(1.0) {
            return Err(Error::Consistency(format!(
                "stages sum to {sum}, total is {}",
                self.t_total
            )));
        }
        for (n, t, s, name) in [
            (self.n_prompt, self.t_prompt, self.s_prompt, "prompt"),
            (self.n_gen, self.t_gen, self.s_gen, "gen"),
        ] {
            match s {
                Some(s) if t > 0.0 => {
                    if ((s * t) - n as f64).abs() > 1e-9 * (n as f64).max(1.0) {
                        return Err(Error::Consistency(format!("s_{name} * t_{name} != n_{name}")));
                    }
                }
                Some(_) => return Err(Error::Consistency(format!("s_{name} set with t_{name} = 0"))),
                None if t > 0.0 => return Err(Error::Consistency(format!("s_{name} missing"))),
                None => {}
            }
        }
        Ok(())
    }
}

fn stage_time(n: usize, speed: Option<f64>, name: &str) -> Result<f64> {
    if n == 0 {
        return Ok(0.0);
    }
    match speed {
        Some(s) if s > 0.0 && s.is_finite() => Ok(n as f64 / s),
        other => Err(Error::Argument(format!(
            "{name} must be > 0 for {n} tokens, got {other:?}"
        ))),
    }
}

/// `t_ve + n_prompt/s_prompt + n_gen/s_gen + t_other`.
///
/// A stage with zero tokens contributes nothing whatever its speed.
pub fn total_latency(t: &StageTimings) -> Result<f64> {
    Ok(t.t_ve + stage_time(t.n_prompt, t.s_prompt, "s_prompt")? + stage_time(t.n_gen, t.s_gen, "s_gen")? + t.t_other)
}

/// Median of `xs` (mean of the middle pair for even lengths).
pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v: Vec<f64> = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    })
}

/// One user turn to run against a cache.
#[derive(Debug, Clone, Copy)]
pub struct Turn<'a> {
    pub prompt: &'a str,
    pub image: Option<&'a RgbImage>,
    /// Prepend the BOS token (first turn of a conversation).
    pub first: bool,
    /// Ids to feed before the rendered turn, e.g. the last reply token.
    pub prefix_ids: &'a [u32],
}

#[derive(Debug, Clone)]
pub struct ProfiledRun {
    pub timings: StageTimings,
    pub generation: Generation,
    pub n_visual: usize,
    pub n_text: usize,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{error}")]
pub struct ProfileError {
    pub error: Error,
    /// Stages completed before the failure.
    pub partial: StageTimings,
}

/// Runs one turn through every stage, timing each with `clock`.
#[allow(clippy::result_large_err)]
pub fn run_turn(
    model: &MultimodalModel,
    cache: &mut KvCache,
    turn: Turn<'_>,
    cfg: &GenerationConfig,
    clock: &dyn Clock,
    mut on_token: impl FnMut(u32) -> bool,
) -> core::result::Result<ProfiledRun, ProfileError> {
    let start = clock.now();
    let mut partial = StageTimings::default();
    let fail = |error: Error, partial: &StageTimings, now: f64| {
        let p = StageTimings::from_measurements(
            partial.t_ve,
            partial.t_prompt,
            partial.t_gen,
            partial.n_prompt,
            partial.n_gen,
            now - start,
        );
        ProfileError { error, partial: p }
    };
    if let Err(e) = cfg.validate() {
        return Err(fail(e, &partial, clock.now()));
    }
    let mut ids = turn.prefix_ids.to_vec();
    match model.render(turn.prompt, turn.image.is_some(), turn.first) {
        Ok(r) => ids.extend(r),
        Err(e) => return Err(fail(e, &partial, clock.now())),
    }

    let visual = match turn.image {
        Some(img) => {
            let t0 = clock.now();
            let v = model.embed_image(img);
            partial.t_ve = clock.now() - t0;
            match v {
                Ok(v) => Some(v),
                Err(e) => return Err(fail(e, &partial, clock.now())),
            }
        }
        None => None,
    };
    let assembly = match model.assemble(&ids, visual.as_ref()) {
        Ok(a) => a,
        Err(e) => return Err(fail(e, &partial, clock.now())),
    };
    partial.n_prompt = assembly.n_prompt;

    let t0 = clock.now();
    let logits = model.llm.prefill_into(cache, &assembly.embeddings);
    partial.t_prompt = clock.now() - t0;
    let logits = match logits {
        Ok(l) => l,
        Err(e) => return Err(fail(e, &partial, clock.now())),
    };

    let t0 = clock.now();
    let mut produced = 0usize;
    let generation = generate(&model.llm, cache, logits, cfg, clock, |id| {
        produced += 1;
        on_token(id)
    });
    partial.t_gen = clock.now() - t0;
    partial.n_gen = produced;
    let generation = match generation {
        Ok(g) => g,
        Err(e) => return Err(fail(e, &partial, clock.now())),
    };
    let end = clock.now();
    Ok(ProfiledRun {
        timings: StageTimings::from_measurements(
            partial.t_ve,
            partial.t_prompt,
            partial.t_gen,
            assembly.n_prompt,
            generation.tokens.len(),
            end - start,
        ),
        generation,
        n_visual: assembly.n_visual,
        n_text: assembly.n_text,
    })
}

/// Single-shot inference on a fresh cache.
#[allow(clippy::result_large_err)]
pub fn profile_inference(
    model: &MultimodalModel,
    image: Option<&RgbImage>,
    prompt: &str,
    cfg: &GenerationConfig,
    clock: &dyn Clock,
) -> core::result::Result<ProfiledRun, ProfileError> {
    let mut cache = model.llm.new_cache();
    let turn = Turn {
        prompt,
        image,
        first: true,
        prefix_ids: &[],
    };
    run_turn(model, &mut cache, turn, cfg, clock, |_| true)
}
