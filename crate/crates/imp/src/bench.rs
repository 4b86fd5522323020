//! Wall-clock profiling, repeated benchmarks and the latency report.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use imp_core::generate::{Clock, GenerationConfig};
use imp_core::multimodal::MultimodalModel;
use imp_core::profile::{profile_inference, ProfileError, ProfiledRun, StageTimings};
use imp_core::vision::RgbImage;
use imp_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Monotonic seconds since construction.
#[derive(Debug, Clone, Copy)]
pub struct WallClock(Instant);

impl WallClock {
    pub fn new() -> Self {
        Self(Instant::now())
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// One wall-clock profiled run.
#[allow(clippy::result_large_err)]
pub fn profile(
    model: &MultimodalModel,
    image: Option<&RgbImage>,
    prompt: &str,
    cfg: &GenerationConfig,
) -> std::result::Result<ProfiledRun, ProfileError> {
    profile_inference(model, image, prompt, cfg, &WallClock::new())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchOptions {
    pub repeats: usize,
    /// Runs discarded before measuring.
    pub warmup: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { repeats: 5, warmup: 1 }
    }
}

#[derive(Debug, Clone)]
pub struct BenchResult {
    pub runs: Vec<StageTimings>,
    /// The run with the median total time.
    pub median: StageTimings,
}

/// The run whose `t_total` is the median (the lower one for even counts).
pub fn median_run(runs: &[StageTimings]) -> Option<StageTimings> {
    let mut v = runs.to_vec();
    v.sort_by(|a, b| a.t_total.total_cmp(&b.t_total));
    v.get((v.len().max(1) - 1) / 2).copied()
}

/// Repeats one inference and keeps every measured run. Runs are strictly
/// sequential.
pub fn bench(
    model: &MultimodalModel,
    image: Option<&RgbImage>,
    prompt: &str,
    cfg: &GenerationConfig,
    opts: BenchOptions,
) -> Result<BenchResult> {
    if opts.repeats == 0 {
        return Err(Error::Argument("repeats must be >= 1".into()));
    }
    for _ in 0..opts.warmup {
        profile(model, image, prompt, cfg).map_err(|e| e.error)?;
    }
    let mut runs = Vec::with_capacity(opts.repeats);
    for _ in 0..opts.repeats {
        runs.push(profile(model, image, prompt, cfg).map_err(|e| e.error)?.timings);
    }
    let median = median_run(&runs).expect("at least one run");
    Ok(BenchResult { runs, median })
}

/// One line of the latency table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub precision: String,
    pub size_bytes: u64,
    pub timings: StageTimings,
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.digits$}"))
}

/// Fixed-width table: label, precision, size, T_VE, S_prompt, S_gen, T_total.
/// Rows keep the order given.
pub fn render_report(rows: &[ReportRow]) -> String {
    let w = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
    let mut out = format!(
        "{:<w$}  {:<9}  {:>10}  {:>8}  {:>10}  {:>8}  {:>11}\n",
        "model", "precision", "size (MB)", "T_VE (s)", "S_prompt", "S_gen", "T_total (s)"
    );
    for r in rows {
        let t = &r.timings;
        out.push_str(&format!(
            "{:<w$}  {:<9}  {:>10.3}  {:>8.3}  {:>10}  {:>8}  {:>11.3}\n",
            r.label,
            r.precision,
            r.size_bytes as f64 / 1e6,
            t.t_ve,
            opt(t.s_prompt, 2),
            opt(t.s_gen, 2),
            t.t_total
        ));
    }
    out
}

/// Appends one JSON object per run.
pub fn write_json_lines<T: Serialize>(runs: &[T], out: &mut impl Write) -> std::io::Result<()> {
    for r in runs {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_json_lines<T: serde::de::DeserializeOwned>(text: &str) -> serde_json::Result<Vec<T>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

pub fn write_json_lines_file<T: Serialize>(runs: &[T], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    write_json_lines(runs, &mut f).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(label: &str, total: f64) -> ReportRow {
        ReportRow {
            label: label.into(),
            precision: "q8_0".into(),
            size_bytes: 3_600_000,
            timings: StageTimings::from_rates(0.045, 770, 6125.18, 64, 97.91, total).unwrap(),
        }
    }

    #[test]
    fn report_has_every_column_and_keeps_order() {
        let text = render_report(&[row("b-model", 0.0), row("a-model", 0.1)]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        for col in ["model", "precision", "size", "T_VE", "S_prompt", "S_gen", "T_total"] {
            assert!(lines[0].contains(col), "{col}");
        }
        assert!(lines[1].starts_with("b-model"));
        assert!(lines[2].starts_with("a-model"));
        let cells: Vec<&str> = lines[1].split_whitespace().collect();
        assert_eq!(
            cells,
            ["b-model", "q8_0", "3.600", "0.045", "6125.18", "97.91", "0.824"]
        );
    }

    #[test]
    fn json_lines_round_trip() {
        let runs = vec![row("x", 0.0), row("y", 0.5)];
        let mut buf = Vec::new();
        write_json_lines(&runs, &mut buf).unwrap();
        assert_eq!(
            read_json_lines::<ReportRow>(std::str::from_utf8(&buf).unwrap()).unwrap(),
            runs
        );
    }

    #[test]
    fn median_run_is_a_real_run() {
        let mk = |t| StageTimings {
            t_total: t,
            ..Default::default()
        };
        let runs = [mk(3.0), mk(1.0), mk(2.0), mk(9.0), mk(0.5)];
        assert_eq!(median_run(&runs).unwrap().t_total, 2.0);
        assert_eq!(median_run(&runs[..4]).unwrap().t_total, 2.0);
        assert_eq!(median_run(&[]), None);
    }

    #[test]
    fn wall_clock_is_monotonic() {
        let c = WallClock::new();
        let a = c.now();
        let b = c.now();
        assert!(b >= a && a >= 0.0);
    }
}
