use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use esmerge_core::pipeline::CoefficientMode;
use serde::Serialize;

mod commands;
mod inputs;

/// Merge modality-specialized LoRA adapters using embedding signals.
#[derive(Debug, Parser)]
#[command(name = "esmerge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a toy base model and one adapter per modality.
    GenToy(GenToyArgs),
    /// Estimate merge coefficients for a set of adapters.
    Coeffs(CoeffsArgs),
    /// Merge adapters with estimated coefficients or a baseline.
    Merge(MergeArgs),
    /// Export per-element coefficients as a long-format CSV.
    ExportHeatmap(ExportArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
struct ModelArgs {
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    n_layers: usize,
    #[arg(long, default_value_t = 4)]
    n_heads: usize,
    #[arg(long, default_value_t = 64)]
    d_ff: usize,
    #[arg(long, default_value_t = 2)]
    lora_rank: usize,
    #[arg(long, default_value_t = 8.0)]
    lora_alpha: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
struct GenToyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    modalities: usize,
    #[arg(long, default_value_t = 6)]
    subspace_dim: usize,
    #[arg(long, default_value_t = 8)]
    tokens_per_block: usize,
    #[arg(long, default_value_t = 2)]
    prefix_tokens: usize,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Mode {
    Layer,
    Element,
    Fused,
}

impl From<Mode> for CoefficientMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Layer => CoefficientMode::Layer,
            Mode::Element => CoefficientMode::Element,
            Mode::Fused => CoefficientMode::Fused,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
struct CoeffsArgs {
    /// Directory written by `gen-toy` (base.esmg plus adapter_<tag>.esmg).
    #[arg(long)]
    #[serde(skip)]
    input: PathBuf,
    /// Output directory.
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Adapter tags, in order. Defaults to every modality of the base.
    #[arg(long, value_delimiter = ',')]
    models: Vec<String>,
    /// Probe count.
    #[arg(long, default_value_t = 32)]
    k: usize,
    /// SWD projection count.
    #[arg(long, default_value_t = 256)]
    projections: usize,
    /// SWD order.
    #[arg(long, default_value_t = 2.0)]
    p: f64,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    #[arg(long, value_enum, default_value_t = Mode::Fused)]
    mode: Mode,
    /// Verify this many gradient entries against finite differences first.
    #[arg(long)]
    check_grads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Method {
    Es,
    EsLayer,
    EsElement,
    Avg,
    Ties,
}

#[derive(Debug, Clone, Args, Serialize)]
struct MergeArgs {
    #[arg(long, value_enum, default_value_t = Method::Es)]
    method: Method,
    /// Coefficient container written by `coeffs` (es methods only).
    #[arg(long)]
    #[serde(skip)]
    coeffs: Option<PathBuf>,
    /// Directory holding adapter_<tag>.esmg files.
    #[arg(long)]
    #[serde(skip)]
    input: Option<PathBuf>,
    /// Explicit adapter files; overrides --input.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip)]
    adapters: Vec<PathBuf>,
    /// Adapter tags to load from --input.
    #[arg(long, value_delimiter = ',')]
    models: Vec<String>,
    /// Fraction of entries TIES keeps per tensor.
    #[arg(long, default_value_t = 0.2)]
    trim: f64,
    /// Output adapter file.
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
struct ExportArgs {
    /// Coefficient container (element or fused).
    #[arg(long)]
    #[serde(skip)]
    coeffs: PathBuf,
    /// Output CSV file.
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

/// Raised when a numerical self-check fails; maps to exit code 2.
#[derive(Debug)]
struct VerificationFailed(String);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for VerificationFailed {}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("ESMERGE_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow::anyhow!("ESMERGE_THREADS must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = init_threads().and_then(|()| match cli.command {
        Command::GenToy(a) => commands::gen_toy(&a),
        Command::Coeffs(a) => commands::coeffs(&a),
        Command::Merge(a) => commands::merge(&a),
        Command::ExportHeatmap(a) => commands::export_heatmap(&a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<VerificationFailed>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
