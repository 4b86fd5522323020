use std::path::Path;
use std::process::{Command, Output};

use imp::container::read_container;
use serde_json::Value;

fn imp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imp"))
        .args(args)
        .env_remove("IMP_MODEL")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = imp(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn toy(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let m = dir.join("toy.impb");
    let a = dir.join("toy.lora.impb");
    ok(&[
        "toy-model",
        "--out",
        s(&m),
        "--lora-out",
        s(&a),
        "--d-model",
        "32",
        "--layers",
        "1",
        "--heads",
        "2",
        "--image-res",
        "56",
    ]);
    (m, a)
}

#[test]
fn every_subcommand_has_help() {
    for sub in [
        "run",
        "quantize",
        "merge-lora",
        "bench",
        "inspect",
        "serve",
        "toy-model",
    ] {
        let out = ok(&[sub, "--help"]);
        assert!(out.contains("Usage"), "{sub}");
    }
}

#[test]
fn usage_errors_exit_2_and_runtime_errors_exit_1() {
    assert_eq!(imp(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        imp(&["quantize", "--in", "a", "--out", "b", "--dtype", "q3"])
            .status
            .code(),
        Some(2)
    );
    let out = imp(&["inspect", "/nonexistent/model.impb"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn toy_quantize_inspect_chain() {
    let dir = tempfile::tempdir().unwrap();
    let (m, _) = toy(dir.path());
    let report = ok(&["inspect", s(&m)]);
    assert!(report.contains("llm.tok_embed.weight"));
    for dt in ["f16", "q8_0", "q4_0"] {
        let q = dir.path().join(format!("{dt}.impb"));
        ok(&["quantize", "--in", s(&m), "--out", s(&q), "--dtype", dt]);
        let c = read_container(&q).unwrap();
        assert_eq!(
            imp_core::manifest::TensorSource::manifest(&c)
                .get_str("general.precision")
                .unwrap(),
            Some(dt)
        );
        assert!(std::fs::metadata(&q).unwrap().len() < std::fs::metadata(&m).unwrap().len());
        assert!(ok(&["inspect", s(&q)]).contains(dt));
    }
}

#[test]
fn greedy_run_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let (m, a) = toy(dir.path());
    let args = [
        "run",
        "--model",
        s(&m),
        "--prompt",
        "hello there",
        "--json",
        "--max-new-tokens",
        "12",
        "--ignore-eos",
    ];
    let first: Value = serde_json::from_str(&ok(&args)).unwrap();
    let second: Value = serde_json::from_str(&ok(&args)).unwrap();
    assert_eq!(first["tokens"], second["tokens"]);
    assert_eq!(first["tokens"].as_array().unwrap().len(), 12);
    assert_eq!(first["n_visual"], 0);

    let mut with_adapter = args.to_vec();
    with_adapter.extend(["--adapter", s(&a)]);
    let adapted: Value = serde_json::from_str(&ok(&with_adapter)).unwrap();
    assert_eq!(adapted["tokens"].as_array().unwrap().len(), 12);
}

#[test]
fn run_with_image_counts_visual_tokens() {
    let dir = tempfile::tempdir().unwrap();
    let (m, _) = toy(dir.path());
    let png = dir.path().join("x.png");
    let img = imp_core::vision::RgbImage::from_fn(30, 20, |x, y| [x as u8 * 8, y as u8 * 12, 7]);
    std::fs::write(&png, imp::image_io::encode_png(&img).unwrap()).unwrap();
    let v: Value = serde_json::from_str(&ok(&[
        "run",
        "--model",
        s(&m),
        "--prompt",
        "what?",
        "--image",
        s(&png),
        "--json",
        "--max-new-tokens",
        "3",
    ]))
    .unwrap();
    assert_eq!(v["n_visual"], 16);
    assert_eq!(
        v["stats"]["n_prompt"].as_u64().unwrap(),
        16 + v["n_text"].as_u64().unwrap()
    );
    assert!(v["stats"]["t_ve"].as_f64().unwrap() > 0.0);
}

#[test]
fn merged_model_matches_runtime_adapter() {
    let dir = tempfile::tempdir().unwrap();
    let (m, a) = toy(dir.path());
    let merged = dir.path().join("merged.impb");
    ok(&["merge-lora", "--base", s(&m), "--adapter", s(&a), "--out", s(&merged)]);
    read_container(&merged).unwrap();
    let base = ["--prompt", "abc", "--json", "--max-new-tokens", "8", "--ignore-eos"];
    let mut rt = vec!["run", "--model", s(&m), "--adapter", s(&a)];
    rt.extend(base);
    let mut mg = vec!["run", "--model", s(&merged)];
    mg.extend(base);
    let x: Value = serde_json::from_str(&ok(&rt)).unwrap();
    let y: Value = serde_json::from_str(&ok(&mg)).unwrap();
    assert_eq!(x["tokens"], y["tokens"]);
}

#[test]
fn bench_reports_every_model_and_writes_all_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (m, _) = toy(dir.path());
    let q = dir.path().join("q8.impb");
    ok(&["quantize", "--in", s(&m), "--out", s(&q), "--dtype", "q8_0"]);
    let jl = dir.path().join("runs.jsonl");
    let table = ok(&[
        "bench",
        "--model",
        s(&m),
        s(&q),
        "--label",
        "base",
        "small",
        "--max-new-tokens",
        "4",
        "--repeats",
        "3",
        "--warmup",
        "1",
        "--json-out",
        s(&jl),
    ]);
    assert!(table.contains("T_total"));
    assert!(table.contains("base") && table.contains("small") && table.contains("q8_0"));
    let lines: Vec<Value> = std::fs::read_to_string(&jl)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 6);
    for l in &lines {
        assert_eq!(l["timings"]["n_gen"], 4);
    }
}
