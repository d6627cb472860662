use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "efraft", version, about = "Optical flow with amorphous lookup and feature localization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the flow between two PPM frames.
    Estimate(EstimateArgs),
    /// Score a predicted .flo against ground truth.
    Eval(EvalArgs),
    /// Run every oracle-equivalence and invariant suite.
    Selftest,
    /// Compare runtime, memory and parameters of the lookup variants.
    Bench(BenchArgs),
    /// Train on synthetic translation scenes.
    TrainToy(TrainArgs),
    /// Write freshly initialized weights.
    InitWeights(InitArgs),
    /// Render a .flo file as a color PPM.
    Viz(VizArgs),
}

/// Model configuration sources, applied in this order: defaults, the
/// weights sidecar, `--config`, `--set`, then the dedicated flags.
#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    /// key=value configuration file.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one configuration key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Refinement iterations.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Amorphous lookup (on/off).
    #[arg(long, value_parser = parse_switch, value_name = "on|off")]
    pub alo: Option<bool>,
    /// Feature localization (on/off).
    #[arg(long, value_parser = parse_switch, value_name = "on|off")]
    pub afl: Option<bool>,
    /// Sequence-loss decay.
    #[arg(long)]
    pub gamma: Option<f64>,
}

fn parse_switch(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(format!("expected `on` or `off`, got `{s}`")),
    }
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// First frame (binary PPM).
    #[arg(long)]
    pub frame1: PathBuf,
    /// Second frame, same size as the first.
    #[arg(long)]
    pub frame2: PathBuf,
    /// Weights file; its `.cfg` sidecar supplies the architecture.
    #[arg(long)]
    pub weights: PathBuf,
    /// Output .flo path.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional color rendering of the result.
    #[arg(long)]
    pub viz: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted flow (.flo).
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth flow (.flo).
    #[arg(long)]
    pub gt: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    /// Timed runs per variant; the median is reported.
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the report as tab-separated text.
    #[arg(long, value_name = "FILE")]
    pub tsv: Option<PathBuf>,
    /// Also write the report as JSON.
    #[arg(long, value_name = "FILE")]
    pub json: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Optimizer steps (at most 500).
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    /// Gradient-descent step size.
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Seed for both the weights and the scenes.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Where to save the trained weights.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Where to save the loss curve (step, loss) as TSV.
    #[arg(long, value_name = "FILE")]
    pub curve: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    /// Flow file to render.
    #[arg(long)]
    pub flow: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Magnitude mapped to full saturation; defaults to the largest one.
    #[arg(long)]
    pub cap: Option<f64>,
}
