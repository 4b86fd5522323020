mod common;

use common::{embed_ids, max_abs_diff, reference_logits, tiny};
use imp_core::llm::Llm;
use imp_core::toy::{toy_model, ToyConfig};
use imp_core::Error;

fn ids(n: usize, seed: u64) -> Vec<u32> {
    (0..n as u64)
        .map(|i| ((i * 131 + seed * 17 + 7) % 300) as u32)
        .collect()
}

#[test]
fn incremental_decode_matches_full_recompute() {
    for seed in 0..4 {
        let cfg = ToyConfig {
            tied_embeddings: seed % 2 == 0,
            ..tiny(seed)
        };
        let m = toy_model(&cfg).unwrap();
        let llm = Llm::load(&m).unwrap();
        let toks = ids(12, seed);
        let oracle = reference_logits(&m, &embed_ids(&m, &toks), toks.len());

        let (mut cache, first) = llm.prefill(&embed_ids(&m, &toks[..1])).unwrap();
        assert!(max_abs_diff(&first, &oracle[0]) < 1e-4);
        for (t, &id) in toks.iter().enumerate().skip(1) {
            let logits = llm.decode_step(&mut cache, id).unwrap();
            let diff = max_abs_diff(&logits, &oracle[t]);
            assert!(diff < 1e-4, "seed {seed} position {t}: {diff}");
        }
        assert_eq!(cache.len(), toks.len());
    }
}

#[test]
fn batched_prefill_matches_reference_at_every_position() {
    let m = toy_model(&tiny(11)).unwrap();
    let llm = Llm::load(&m).unwrap();
    let toks = ids(9, 3);
    let x = embed_ids(&m, &toks);
    let oracle = reference_logits(&m, &x, toks.len());
    let mut cache = llm.new_cache();
    let all = llm.forward(&mut cache, &x, true).unwrap();
    for t in 0..toks.len() {
        assert!(max_abs_diff(&all[t], &oracle[t]) < 1e-4);
    }
}

#[test]
fn prefill_one_then_step_equals_prefill_two() {
    let m = toy_model(&tiny(5)).unwrap();
    let llm = Llm::load(&m).unwrap();
    let toks = [3u32, 77];
    let (mut c1, _) = llm.prefill(&embed_ids(&m, &toks[..1])).unwrap();
    let stepped = llm.decode_step(&mut c1, toks[1]).unwrap();
    let (c2, both) = llm.prefill(&embed_ids(&m, &toks)).unwrap();
    assert!(max_abs_diff(&stepped, &both) < 1e-4);
    assert_eq!(c1.len(), 2);
    assert_eq!(c2.len(), 2);
    assert_eq!(both.len(), llm.config.vocab_size);
}

#[test]
fn perturbing_a_token_never_changes_earlier_logits() {
    let m = toy_model(&tiny(8)).unwrap();
    let llm = Llm::load(&m).unwrap();
    let mut toks = ids(10, 1);
    let run = |toks: &[u32]| {
        let mut cache = llm.new_cache();
        llm.forward(&mut cache, &embed_ids(&m, toks), true).unwrap()
    };
    let base = run(&toks);
    let t = 6;
    toks[t] = (toks[t] + 1) % 300;
    let changed = run(&toks);
    for p in 0..t {
        assert_eq!(base[p], changed[p], "position {p}");
    }
    assert_ne!(base[t], changed[t]);
}

#[test]
fn cache_grows_by_one_and_rejects_overflow() {
    let cfg = ToyConfig {
        context_len: 5,
        ..tiny(2)
    };
    let m = toy_model(&cfg).unwrap();
    let llm = Llm::load(&m).unwrap();
    let (mut cache, _) = llm.prefill(&embed_ids(&m, &[1, 2, 3])).unwrap();
    assert_eq!(cache.len(), 3);
    llm.decode_step(&mut cache, 4).unwrap();
    assert_eq!(cache.len(), 4);
    llm.decode_step(&mut cache, 5).unwrap();
    assert_eq!(cache.len(), 5);
    let err = llm.decode_step(&mut cache, 6).unwrap_err();
    assert_eq!(err, Error::Capacity { needed: 6, limit: 5 });
    assert_eq!(cache.len(), 5);
    assert!(matches!(
        llm.prefill(&embed_ids(&m, &[1; 6])),
        Err(Error::Capacity { needed: 6, limit: 5 })
    ));
}

#[test]
fn unknown_token_is_an_argument_error() {
    let m = toy_model(&tiny(2)).unwrap();
    let llm = Llm::load(&m).unwrap();
    let (mut cache, _) = llm.prefill(&embed_ids(&m, &[1])).unwrap();
    assert!(matches!(llm.decode_step(&mut cache, 300), Err(Error::Argument(_))));
}

#[test]
fn truncation_rewinds_to_an_earlier_state() {
    let m = toy_model(&tiny(9)).unwrap();
    let llm = Llm::load(&m).unwrap();
    let (mut cache, _) = llm.prefill(&embed_ids(&m, &[5, 6, 7])).unwrap();
    let branch = llm.decode_step(&mut cache.clone(), 8).unwrap();
    llm.decode_step(&mut cache, 9).unwrap();
    llm.decode_step(&mut cache, 10).unwrap();
    cache.truncate(3);
    assert_eq!(cache.len(), 3);
    assert_eq!(llm.decode_step(&mut cache, 8).unwrap(), branch);
}
