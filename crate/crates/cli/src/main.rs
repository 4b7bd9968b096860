use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use demandmap_cli::synth::{generate, SynthSpec};
use demandmap_cli::{load_config, run, PipelineError, Stage};

#[derive(Parser)]
#[command(name = "demandmap", version, about = "Map telecom demand from survey data and satellite imagery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StageArgs {
    /// Pipeline configuration (key=value file).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` configuration overrides.
    #[arg(long = "stage-arg", value_name = "KEY=VALUE")]
    stage_args: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Aggregate household surveys into clusters.csv.
    Ingest(StageArgs),
    /// Sample points around clusters and acquire tiles.
    Fetch(StageArgs),
    /// Fine-tune the network on binned cluster labels.
    Train(StageArgs),
    /// Fit ridge ensembles and write validation reports.
    Fit(StageArgs),
    /// Predict every populated grid cell and write GeoJSON.
    Gridmap(StageArgs),
    /// Write activation maps for selected tiles.
    Explain(StageArgs),
    /// Run every stage in order.
    All(StageArgs),
    /// Generate a synthetic country with a matching config.
    Synth {
        /// Directory to write into.
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 200)]
        clusters: usize,
        #[arg(long, default_value_t = 24)]
        households: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let (args, stage) = match cli.command {
        Command::Ingest(a) => (a, Some(Stage::Ingest)),
        Command::Fetch(a) => (a, Some(Stage::Fetch)),
        Command::Train(a) => (a, Some(Stage::Train)),
        Command::Fit(a) => (a, Some(Stage::Fit)),
        Command::Gridmap(a) => (a, Some(Stage::Gridmap)),
        Command::Explain(a) => (a, Some(Stage::Explain)),
        Command::All(a) => (a, None),
        Command::Synth {
            dir,
            clusters,
            households,
            seed,
        } => {
            let spec = SynthSpec {
                seed,
                clusters,
                households_per_cluster: households,
                ..SynthSpec::default()
            };
            let files = generate(&spec, &dir).context("generating synthetic country")?;
            let config = files.write_config("config.txt", seed, &[])?;
            println!("wrote {}", config.display());
            return Ok(());
        }
    };
    let cfg = load_config(&args.config, args.seed, &args.stage_args)?;
    for outcome in run(cfg, stage)? {
        println!("{outcome}");
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<PipelineError>().map_or(1, PipelineError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
