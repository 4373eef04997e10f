mod commands;
mod manifest;
mod plots;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use medrec_core::train::GraphScope;
use medrec_core::Variant;

#[derive(Parser)]
#[command(name = "medrec", version, about = "Medication recommendation: training, evaluation and ablations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every command that touches a model.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON training config; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_scope)]
    pub graph_scope: Option<GraphScope>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    /// Also write SVG charts next to the outputs.
    #[arg(long)]
    pub plots: bool,
}

fn parse_scope(s: &str) -> Result<GraphScope, String> {
    s.parse().map_err(|e: medrec_core::Error| e.to_string())
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: medrec_core::Error| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort as JSON lines.
    Synth {
        /// JSON generator settings; defaults are used when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the medication co-occurrence graph of a cohort.
    BuildGraph {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train one stage and write a checkpoint directory.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        cohort: PathBuf,
        /// Stage I checkpoint to continue from (required for stage 2).
        #[arg(long, required_if_eq("stage", "2"))]
        from: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on one split of a cohort.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
        split: String,
        /// Print published results for this dataset alongside ours.
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train and test every requested variant, one CSV row each.
    Ablate {
        #[arg(long)]
        cohort: PathBuf,
        /// Comma separated variant names, or `all`.
        #[arg(long, default_value = "all")]
        variants: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Metrics binned by average historical medication count.
    Robustness {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
        split: String,
        /// Lower bin edges, ascending; the last bin is open.
        #[arg(long, value_delimiter = ',', default_values_t = medrec_core::eval::DEFAULT_BIN_EDGES)]
        edges: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Dump every traversal as JSON lines.
    Trace {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
        split: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { spec, seed, out } => commands::synth(spec.as_deref(), seed, &out),
        Command::BuildGraph { cohort, out, common } => commands::build_graph(&cohort, &out, &common),
        Command::Train {
            stage,
            cohort,
            from,
            out,
            common,
        } => commands::train(stage, &cohort, from.as_deref(), &out, &common),
        Command::Evaluate {
            checkpoint,
            cohort,
            split,
            dataset,
            out,
            common,
        } => commands::evaluate(&checkpoint, &cohort, &split, dataset.as_deref(), &out, &common),
        Command::Ablate {
            cohort,
            variants,
            out,
            common,
        } => commands::ablate(&cohort, &variants, &out, &common),
        Command::Robustness {
            checkpoint,
            cohort,
            split,
            edges,
            out,
            common,
        } => commands::robustness(&checkpoint, &cohort, &split, &edges, &out, &common),
        Command::Trace {
            checkpoint,
            cohort,
            split,
            out,
            common,
        } => commands::trace(&checkpoint, &cohort, &split, &out, &common),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
