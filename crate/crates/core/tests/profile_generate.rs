mod common;

use std::cell::Cell;

use common::tiny;
use imp_core::generate::{argmax, GenerationConfig, NoClock, Sampler, StopReason};
use imp_core::multimodal::MultimodalModel;
use imp_core::profile::{profile_inference, run_turn, total_latency, StageTimings, Turn};
use imp_core::toy::{toy_model, ToyConfig};
use imp_core::vision::RgbImage;
use imp_core::Error;

/// Advances a fixed step on every read.
struct Ticker(Cell<f64>);

impl imp_core::generate::Clock for Ticker {
    fn now(&self) -> f64 {
        let t = self.0.get() + 0.002;
        self.0.set(t);
        t
    }
}

fn model(cfg: &ToyConfig) -> MultimodalModel {
    MultimodalModel::load(&toy_model(cfg).unwrap()).unwrap()
}

fn image() -> RgbImage {
    RgbImage::from_fn(50, 30, |x, y| [(x * 5) as u8, (y * 8) as u8, 128])
}

#[test]
fn runs_to_max_tokens_with_no_stop_set() {
    let m = model(&tiny(0));
    let cfg = GenerationConfig::greedy(20);
    let run = profile_inference(&m, Some(&image()), "describe", &cfg, &Ticker(Cell::new(0.0))).unwrap();
    assert_eq!(run.generation.tokens.len(), 20);
    assert_eq!(run.generation.stop, StopReason::MaxTokens);
    assert_eq!(run.timings.n_gen, 20);
    assert_eq!(run.timings.n_prompt, run.n_text + run.n_visual);
    assert_eq!(run.n_visual, 4);
    run.timings.check().unwrap();
}

#[test]
fn text_only_turn_has_no_encoding_time() {
    let m = model(&tiny(0));
    let run = profile_inference(&m, None, "hello", &GenerationConfig::greedy(4), &Ticker(Cell::new(0.0))).unwrap();
    assert_eq!(run.timings.t_ve, 0.0);
    assert_eq!(run.n_visual, 0);
    assert_eq!(run.timings.n_prompt, m.render("hello", false, true).unwrap().len());
}

#[test]
fn recomposed_total_matches_wall_time() {
    let m = model(&tiny(6));
    let run = profile_inference(
        &m,
        Some(&image()),
        "what is it",
        &GenerationConfig::greedy(8),
        &Ticker(Cell::new(0.0)),
    )
    .unwrap();
    let t = run.timings;
    let recomposed = total_latency(&t).unwrap();
    assert!((recomposed - t.t_total).abs() <= 0.05 * t.t_total);
    assert!(t.t_other >= -1e-3);
    assert!((t.s_prompt.unwrap() * t.t_prompt - t.n_prompt as f64).abs() <= 1e-9 * t.n_prompt as f64);
    assert!((t.s_gen.unwrap() * t.t_gen - t.n_gen as f64).abs() <= 1e-9 * t.n_gen as f64);
}

#[test]
fn counts_repeat_exactly_across_runs() {
    let m = model(&tiny(2));
    let cfg = GenerationConfig::greedy(6);
    let a = profile_inference(&m, Some(&image()), "x", &cfg, &NoClock).unwrap();
    let b = profile_inference(&m, Some(&image()), "x", &cfg, &NoClock).unwrap();
    assert_eq!(a.generation.tokens, b.generation.tokens);
    assert_eq!(
        (a.timings.n_prompt, a.timings.n_gen),
        (b.timings.n_prompt, b.timings.n_gen)
    );
}

#[test]
fn stop_token_ends_generation_early() {
    let m = model(&tiny(2));
    let greedy = profile_inference(&m, None, "x", &GenerationConfig::greedy(6), &NoClock).unwrap();
    let stop = greedy.generation.tokens[2];
    let cfg = GenerationConfig {
        stop_ids: vec![stop],
        ..GenerationConfig::greedy(6)
    };
    let run = profile_inference(&m, None, "x", &cfg, &NoClock).unwrap();
    let first = greedy.generation.tokens.iter().position(|&t| t == stop).unwrap();
    assert_eq!(run.generation.tokens, greedy.generation.tokens[..=first]);
    assert_eq!(run.generation.stop, StopReason::StopToken);
}

#[test]
fn seeded_sampling_repeats() {
    let m = model(&tiny(3));
    let cfg = GenerationConfig {
        temperature: 0.9,
        top_p: 0.8,
        seed: 42,
        ..GenerationConfig::greedy(12)
    };
    let a = profile_inference(&m, None, "x", &cfg, &NoClock).unwrap();
    let b = profile_inference(&m, None, "x", &cfg, &NoClock).unwrap();
    assert_eq!(a.generation.tokens, b.generation.tokens);
}

#[test]
fn top_p_keeps_only_the_nucleus() {
    let logits = [5.0f32, 4.9, -10.0, -10.0, -10.0];
    let cfg = GenerationConfig {
        temperature: 1.0,
        top_p: 0.5,
        seed: 7,
        ..Default::default()
    };
    let mut s = Sampler::new(&cfg);
    for _ in 0..200 {
        assert!(s.sample(&logits) < 2);
    }
    assert_eq!(argmax(&logits), 0);
}

#[test]
fn overflow_returns_partial_timings() {
    let cfg = ToyConfig {
        context_len: 12,
        ..tiny(1)
    };
    let m = model(&cfg);
    let err = profile_inference(&m, None, "hi", &GenerationConfig::greedy(64), &Ticker(Cell::new(0.0))).unwrap_err();
    assert!(matches!(err.error, Error::Capacity { limit: 12, .. }));
    assert!(err.partial.n_prompt > 0);
    assert!(err.partial.n_gen > 0);
    assert!(err.partial.t_total > 0.0);
}

#[test]
fn follow_up_turns_extend_the_cache() {
    let m = model(&tiny(1));
    let mut cache = m.llm.new_cache();
    let cfg = GenerationConfig::greedy(3);
    let first = Turn {
        prompt: "a",
        image: Some(&image()),
        first: true,
        prefix_ids: &[],
    };
    let r1 = run_turn(&m, &mut cache, first, &cfg, &NoClock, |_| true).unwrap();
    let after_first = cache.len();
    assert_eq!(after_first, r1.timings.n_prompt + 2);
    let last = [*r1.generation.tokens.last().unwrap()];
    let second = Turn {
        prompt: "b",
        image: None,
        first: false,
        prefix_ids: &last,
    };
    let r2 = run_turn(&m, &mut cache, second, &cfg, &NoClock, |_| true).unwrap();
    assert_eq!(cache.len(), after_first + r2.timings.n_prompt + 2);
}

#[test]
fn stage_sum_recomposes_a_published_gpu_row() {
    let t = StageTimings::from_rates(0.045, 41 + 729, 6125.18, 64, 97.91, 0.0).unwrap();
    let total = total_latency(&t).unwrap();
    assert!((total - 0.8244).abs() < 1e-4);
    assert!((total - 0.83).abs() <= 0.01);
}
