//! Command-line front end for the pipeline stages. Each subcommand reads
//! its inputs from the work directory, writes its artifacts plus metadata
//! sidecars, and prints the artifact paths on success.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cirp::pipeline::{self, PipelineConfig, StageOutcome};
use cirp::Result;

#[derive(Parser)]
#[command(name = "cirp", version, about = "Relational pre-training pipeline for item embeddings")]
struct Cli {
    /// JSON config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Global seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Work directory, overriding the config.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,

    /// Write this stage's artifacts here instead of the work directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark corpus.
    Synth,
    /// Build the co-purchase graph from the interaction log.
    BuildGraph,
    /// Train the graph auto-encoder that scores item relations.
    TrainGae,
    /// Drop the lowest-scored fraction of each item's edges.
    Prune,
    /// Pre-train the dual encoders on the pruned graph.
    Pretrain,
    /// Embed every item with the trained encoders.
    Embed,
    /// Score bundle completion with Recall@k and NDCG@k.
    BundleEval,
    /// Similarity statistics and a 2-d projection of the embeddings.
    Analyze,
    /// Run the prune, pre-train, evaluate cycle per pruning ratio.
    SweepPrune {
        /// Pruning ratios in percent, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        betas: Vec<f64>,
    },
    /// Compare full, cic-only, untrained, and unpruned variants.
    Ablate,
    /// Warm vs cold encoder comparison on excluded-item bundles.
    Coldstart,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(workdir) = &cli.workdir {
        config.workdir = workdir.clone();
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: &Cli) -> Result<StageOutcome> {
    let config = load_config(cli)?;
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Synth => pipeline::run_synth(&config, out),
        Command::BuildGraph => pipeline::run_build_graph(&config, out),
        Command::TrainGae => pipeline::run_train_gae(&config, out),
        Command::Prune => pipeline::run_prune(&config, out),
        Command::Pretrain => pipeline::run_pretrain(&config, out),
        Command::Embed => pipeline::run_embed(&config, out),
        Command::BundleEval => pipeline::run_bundle_eval(&config, out),
        Command::Analyze => pipeline::run_analyze(&config, out),
        Command::SweepPrune { betas } => pipeline::run_sweep_prune(&config, betas, out),
        Command::Ablate => pipeline::run_ablate(&config, out),
        Command::Coldstart => pipeline::run_coldstart(&config, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(outcome) => {
            for path in &outcome.outputs {
                println!("{}", path.display());
            }
            ExitCode::SUCCESS
        }
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(error.exit_code() as u8)
        }
    }
}
