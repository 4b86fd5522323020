//! Command-line interface of the `imp` binary.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use imp_core::generate::GenerationConfig;
use imp_core::lora::{attach_lora, default_targets, merge_lora, LoraAdapter};
use imp_core::manifest::TensorSource;
use imp_core::multimodal::MultimodalModel;
use imp_core::profile::{run_turn, Turn};
use imp_core::quant::{quantize_model, QuantizePolicy};
use imp_core::toy::{toy_adapter, toy_model, ToyConfig};
use imp_core::vision::{PreprocessMode, RgbImage};
use imp_core::DType;

use crate::bench::{bench, render_report, write_json_lines_file, BenchOptions, ReportRow, WallClock};
use crate::container::{read_container, write_model, Container};
use crate::image_io::load_image;
use crate::server::{self, AppState, ModelInfo, ServerConfig};

#[derive(Debug, Parser)]
#[command(
    name = "imp",
    version,
    about = "Multimodal small-model inference: run, quantize, merge, bench, serve"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a reply to one prompt, optionally about an image.
    Run(RunArgs),
    /// Convert weight matrices to f16, q8_0 or q4_0.
    Quantize(QuantizeArgs),
    /// Fold a LoRA adapter into a base model.
    MergeLora(MergeArgs),
    /// Time the encoding, prefill and decode stages over repeated runs.
    Bench(BenchArgs),
    /// Print the tensor index and byte totals of a container.
    Inspect(InspectArgs),
    /// Serve the HTTP chat API.
    Serve(ServeArgs),
    /// Write a small randomly initialised model (and optionally an adapter).
    ToyModel(ToyArgs),
}

#[derive(Debug, Args)]
pub struct SamplingArgs {
    #[arg(long, default_value_t = 64)]
    pub max_new_tokens: usize,
    /// 0 selects greedy decoding.
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f32,
    #[arg(long, default_value_t = 1.0)]
    pub top_p: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl SamplingArgs {
    fn config(&self, stop_ids: Vec<u32>) -> GenerationConfig {
        GenerationConfig {
            max_new_tokens: self.max_new_tokens,
            temperature: self.temperature,
            top_p: self.top_p,
            seed: self.seed,
            stop_ids,
        }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, env = "IMP_MODEL")]
    pub model: PathBuf,
    #[arg(long)]
    pub prompt: String,
    /// PNG or JPEG file.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// LoRA adapter applied at load time without merging.
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// Keep generating past the end-of-sequence token.
    #[arg(long)]
    pub ignore_eos: bool,
    /// Print one JSON object with text, token ids and stage timings.
    #[arg(long)]
    pub json: bool,
    /// Print stage timings to stderr after the reply.
    #[arg(long)]
    pub stats: bool,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// f16, q8_0 or q4_0.
    #[arg(long, value_parser = parse_target_dtype)]
    pub dtype: DType,
    /// Also convert the token and position embeddings.
    #[arg(long)]
    pub include_embeddings: bool,
}

fn parse_target_dtype(s: &str) -> std::result::Result<DType, String> {
    match DType::parse(s) {
        Some(d) if d != DType::F32 => Ok(d),
        _ => Err(format!("expected f16, q8_0 or q4_0, got {s:?}")),
    }
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub adapter: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// One or more models; each becomes a report row.
    #[arg(long, required = true, num_args = 1..)]
    pub model: Vec<PathBuf>,
    /// Row labels, in model order. Defaults to the file stems.
    #[arg(long, num_args = 1..)]
    pub label: Vec<String>,
    #[arg(long, default_value = "Describe this image in detail.")]
    pub prompt: String,
    /// PNG or JPEG file; a synthetic 640×480 gradient is used if omitted.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Benchmark without an image.
    #[arg(long, conflicts_with = "image")]
    pub text_only: bool,
    #[arg(long, default_value_t = 64)]
    pub max_new_tokens: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    /// Write every measured run as one JSON line.
    #[arg(long)]
    pub json_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "IMP_MODEL")]
    pub model: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = server::DEFAULT_MAX_IMAGE_BYTES)]
    pub max_image_bytes: usize,
    /// Concurrent generations; defaults to the number of cores.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, default_value_t = server::DEFAULT_MAX_SESSIONS)]
    pub max_sessions: usize,
    /// Origin allowed to call the API from a browser, or "*".
    #[arg(long)]
    pub cors_origin: Option<String>,
    /// Serve static files (such as a web UI) from this directory.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ToyArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 320)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 1024)]
    pub context_len: usize,
    #[arg(long, default_value_t = 112)]
    pub image_res: usize,
    #[arg(long, default_value_t = 14)]
    pub patch_size: usize,
    /// resize_then_pad or resize_to_square.
    #[arg(long, default_value = "resize_then_pad", value_parser = parse_mode)]
    pub preprocess: PreprocessMode,
    #[arg(long)]
    pub untied: bool,
    /// Also write a random adapter over the decoder projections.
    #[arg(long)]
    pub lora_out: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub lora_rank: usize,
    #[arg(long, default_value_t = 16.0)]
    pub lora_alpha: f32,
}

fn parse_mode(s: &str) -> std::result::Result<PreprocessMode, String> {
    PreprocessMode::parse(s).ok_or_else(|| format!("expected resize_then_pad or resize_to_square, got {s:?}"))
}

/// Opens a model container and builds the runtime, applying `adapter` on
/// the fly if given.
pub fn load_model(path: &Path, adapter: Option<&Path>) -> Result<(Container, MultimodalModel)> {
    let c = read_container(path).with_context(|| format!("opening {}", path.display()))?;
    let mut model = MultimodalModel::load(&c).with_context(|| format!("loading {}", path.display()))?;
    if let Some(a) = adapter {
        let ac = Container::open(a).with_context(|| format!("opening adapter {}", a.display()))?;
        let lora = LoraAdapter::from_source(&ac)?;
        attach_lora(&mut model, &lora)?;
    }
    Ok((c, model))
}

pub fn synthetic_image() -> RgbImage {
    RgbImage::from_fn(640, 480, |x, y| {
        [(x * 255 / 639) as u8, (y * 255 / 479) as u8, ((x + y) % 256) as u8]
    })
}

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(a) => run(a),
        Command::Quantize(a) => quantize(a),
        Command::MergeLora(a) => merge(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Inspect(a) => {
            let i = crate::container::inspect_container(&a.path).with_context(|| a.path.display().to_string())?;
            println!("{i}");
            Ok(())
        }
        Command::Serve(a) => serve(a),
        Command::ToyModel(a) => toy(a),
    }
}

fn run(a: RunArgs) -> Result<()> {
    let (_c, model) = load_model(&a.model, a.adapter.as_deref())?;
    let image = a.image.as_deref().map(load_image).transpose()?;
    let stop = if a.ignore_eos {
        vec![]
    } else {
        vec![model.tokenizer.special().eos]
    };
    let cfg = a.sampling.config(stop);
    let mut cache = model.llm.new_cache();
    let turn = Turn {
        prompt: &a.prompt,
        image: image.as_ref(),
        first: true,
        prefix_ids: &[],
    };
    let mut stream = model.tokenizer.stream();
    let mut out = std::io::stdout().lock();
    let live = !a.json;
    let result = run_turn(&model, &mut cache, turn, &cfg, &WallClock::new(), |id| {
        if live {
            if let Ok(frag) = stream.push(id) {
                let _ = out.write_all(frag.as_bytes());
                let _ = out.flush();
            }
        }
        true
    })
    .map_err(|e| anyhow::anyhow!(e.error))?;
    if a.json {
        let text = model.tokenizer.decode(&result.generation.tokens)?;
        let v = serde_json::json!({
            "text": text,
            "tokens": result.generation.tokens,
            "stats": result.timings,
            "n_visual": result.n_visual,
            "n_text": result.n_text,
        });
        writeln!(out, "{v}")?;
    } else {
        writeln!(out, "{}", stream.finish())?;
    }
    if a.stats {
        eprintln!("{}", serde_json::to_string_pretty(&result.timings)?);
    }
    Ok(())
}

fn quantize(a: QuantizeArgs) -> Result<()> {
    let c = read_container(&a.input).with_context(|| format!("opening {}", a.input.display()))?;
    let policy = QuantizePolicy {
        include_embeddings: a.include_embeddings,
    };
    let q = quantize_model(&c.load_all()?, a.dtype, policy)?;
    write_model(&q, &a.out)?;
    read_container(&a.out).context("validating output")?;
    let kept = q.tensors.values().filter(|t| t.dtype() != a.dtype).count();
    eprintln!(
        "wrote {} ({} tensors as {}, {kept} kept)",
        a.out.display(),
        q.tensors.len() - kept,
        a.dtype
    );
    Ok(())
}

fn merge(a: MergeArgs) -> Result<()> {
    let base = read_container(&a.base).with_context(|| format!("opening {}", a.base.display()))?;
    let ac = Container::open(&a.adapter).with_context(|| format!("opening {}", a.adapter.display()))?;
    let adapter = LoraAdapter::from_source(&ac)?;
    let merged = merge_lora(&base.load_all()?, &adapter)?;
    write_model(&merged, &a.out)?;
    eprintln!(
        "merged {} targets (rank {}, alpha {}) into {}",
        adapter.targets.len(),
        adapter.rank,
        adapter.alpha,
        a.out.display()
    );
    Ok(())
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    if !a.label.is_empty() && a.label.len() != a.model.len() {
        bail!("{} labels given for {} models", a.label.len(), a.model.len());
    }
    let image = match (&a.image, a.text_only) {
        (Some(p), _) => Some(load_image(p)?),
        (None, true) => None,
        (None, false) => Some(synthetic_image()),
    };
    let cfg = GenerationConfig::greedy(a.max_new_tokens);
    let opts = BenchOptions {
        repeats: a.repeats,
        warmup: a.warmup,
    };
    let mut rows = Vec::new();
    let mut all_runs = Vec::new();
    for (i, path) in a.model.iter().enumerate() {
        let (c, model) = load_model(path, None)?;
        let r = bench(&model, image.as_ref(), &a.prompt, &cfg, opts)?;
        let label = a.label.get(i).cloned().unwrap_or_else(|| {
            path.file_stem()
                .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
        });
        let row = |timings| ReportRow {
            label: label.clone(),
            precision: server::model_precision(c.manifest()),
            size_bytes: c.file_len(),
            timings,
        };
        all_runs.extend(r.runs.into_iter().map(row));
        rows.push(row(r.median));
    }
    print!("{}", render_report(&rows));
    if let Some(p) = &a.json_out {
        write_json_lines_file(&all_runs, p)?;
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let (c, model) = load_model(&a.model, None)?;
    let info = ModelInfo::new(c.manifest(), &model, c.file_len());
    let mut cfg = ServerConfig {
        max_image_bytes: a.max_image_bytes,
        max_sessions: a.max_sessions,
        cors_origin: a.cors_origin,
        static_dir: a.static_dir,
        ..ServerConfig::default()
    };
    if let Some(w) = a.workers {
        cfg.workers = w;
    }
    let state = AppState::new(model, info, cfg);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(server::serve(state, &a.host, a.port))?;
    Ok(())
}

fn toy(a: ToyArgs) -> Result<()> {
    let cfg = ToyConfig {
        seed: a.seed,
        vocab_size: a.vocab_size,
        d_model: a.d_model,
        n_layers: a.layers,
        n_heads: a.heads,
        d_ff: 2 * a.d_model,
        context_len: a.context_len,
        tied_embeddings: !a.untied,
        image_res: a.image_res,
        patch_size: a.patch_size,
        preprocess: a.preprocess,
        ..ToyConfig::default()
    };
    let m = toy_model(&cfg)?;
    write_model(&m, &a.out)?;
    eprintln!("wrote {}", a.out.display());
    if let Some(p) = &a.lora_out {
        let adapter = toy_adapter(
            &m,
            &default_targets(a.layers),
            a.lora_rank,
            a.lora_alpha,
            0.05,
            a.seed + 1,
        )?;
        write_model(&adapter.to_model()?, p)?;
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}
