//! `dps` — compare images, run distortion probes, evaluate against human
//! judgments and inspect feature maps.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dps_core::backbone::BackboneId;
use dps_core::bapps::JndScoring;
use dps_core::metrics::{Method, Norm};

/// Exit code for malformed or inconsistent flags (clap uses the same).
pub const EXIT_USAGE: u8 = 2;
/// Exit code for unreadable or invalid input files.
pub const EXIT_DATA: u8 = 3;
/// Exit code for failures while computing features or scores.
pub const EXIT_COMPUTE: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "dps", version, about = "Deep perceptual similarity toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the distance between two PNG images.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[command(flatten)]
        metric: MetricArgs,
        #[command(flatten)]
        weights: WeightArgs,
    },
    /// Run the distortion probe suite and write a pass/fail table.
    Probe {
        /// Methods to score; defaults to pixelwise plus every deep method.
        #[arg(long, value_delimiter = ',')]
        method: Vec<Method>,
        /// Backbones for deep methods; defaults to all three.
        #[arg(long, value_delimiter = ',')]
        backbone: Vec<BackboneId>,
        #[arg(long, default_value = "l2")]
        norm: Norm,
        #[arg(long)]
        unit_normalize: bool,
        /// Cases per category instead of the full suite.
        #[arg(long)]
        per_category: Option<usize>,
        /// Output directory for table.txt, cases.jsonl, results.jsonl, claims.jsonl.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        weights: WeightArgs,
    },
    /// Score a metric against a 2AFC/JND manifest.
    Eval {
        manifest: PathBuf,
        #[command(flatten)]
        metric: MetricArgs,
        #[arg(long, default_value = "binary-ap", value_parser = parse_scoring)]
        jnd_scoring: JndScoring,
        /// Output directory for report.txt and report.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        weights: WeightArgs,
    },
    /// Write one min-max normalized grayscale PNG per channel of a tap.
    DumpFeatures {
        image: PathBuf,
        #[arg(long)]
        backbone: BackboneId,
        /// 1-based tap number (e.g. 2 for the second ReLU tap).
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        weights: WeightArgs,
    },
    /// Write a seeded random weight container for a backbone.
    SynthWeights {
        #[arg(long)]
        backbone: BackboneId,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic 2AFC/JND set with unanimous judgments.
    GenSynthetic {
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct MetricArgs {
    #[arg(long, default_value = "spatial")]
    method: Method,
    /// Required by every method except pixelwise.
    #[arg(long)]
    backbone: Option<BackboneId>,
    #[arg(long, default_value = "l2")]
    norm: Norm,
    #[arg(long)]
    unit_normalize: bool,
    /// Weight of the position-agnostic term in combined methods.
    #[arg(long, default_value_t = 1.0)]
    nonspatial_weight: f64,
}

#[derive(Debug, Args)]
struct WeightArgs {
    /// Weight container for the selected backbone.
    #[arg(long, conflicts_with = "synthetic_weights")]
    weights: Option<PathBuf>,
    /// Directory holding `<backbone>.dpsw` containers.
    #[arg(long, env = "DPS_WEIGHTS_DIR")]
    weights_dir: Option<PathBuf>,
    /// Use seeded random weights instead of exported ones.
    #[arg(long)]
    synthetic_weights: bool,
    /// Seed for synthetic weights and probe generation.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_scoring(s: &str) -> Result<JndScoring, String> {
    match s {
        "binary-ap" => Ok(JndScoring::BinaryAp),
        "weighted-ap" => Ok(JndScoring::WeightedAp),
        _ => Err(format!(
            "unknown JND scoring `{s}` (expected binary-ap or weighted-ap)"
        )),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
