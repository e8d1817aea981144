use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use smartfreeze::experiment::{self, ExperimentConfig};
use smartfreeze::orchestrator::BaselineKind;
use smartfreeze::{Error, Result};

#[derive(Parser)]
#[command(name = "smartfreeze", version, about = "Progressive federated training simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `output_dir`, then `out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the progressive pipeline.
    Run {
        #[command(flatten)]
        common: Common,
        /// Stop after this stage.
        #[arg(long)]
        stage_cap: Option<usize>,
    },
    /// Run a full-model baseline.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        kind: BaselineKind,
    },
    /// CKA of saved baseline checkpoints against the saved reference model.
    AnalyzeCka {
        #[command(flatten)]
        common: Common,
    },
    /// Write the client similarity matrix and detected communities.
    ExportSimilarity {
        #[command(flatten)]
        common: Common,
    },
    /// Train the centralized reference model used by `analyze-cka`.
    TrainReference {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut config = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    let out = common
        .out
        .clone()
        .or_else(|| config.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out)?;
    Ok((config, out))
}

fn print_json(value: serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string(&value)?);
    Ok(())
}

fn done(out: &Path, report: &smartfreeze::orchestrator::ExperimentReport) -> Result<()> {
    print_json(serde_json::json!({
        "kind": report.kind,
        "rounds": report.records.len(),
        "final_accuracy": report.final_accuracy,
        "total_simulated_seconds": report.total_seconds,
        "memory_wall": report.memory_wall,
        "out": out.display().to_string(),
    }))?;
    match &report.aborted {
        Some(reason) if !report.memory_wall => Err(Error::Contract(format!("run aborted: {reason}"))),
        _ => Ok(()),
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { common, stage_cap } => {
            let (config, out) = load(&common)?;
            let report = experiment::run_progressive(&config, &out, stage_cap)?;
            done(&out, &report)
        }
        Command::Baseline { common, kind } => {
            let (config, out) = load(&common)?;
            let report = experiment::run_baseline(&config, kind, &out)?;
            done(&out, &report)
        }
        Command::AnalyzeCka { common } => {
            let (config, out) = load(&common)?;
            let report = experiment::analyze_cka(&config, &out)?;
            print_json(serde_json::json!({
                "layers": report.layers,
                "stabilization": report.stabilization,
                "rounds": report.series.first().map_or(0, Vec::len),
            }))
        }
        Command::ExportSimilarity { common } => {
            let (config, out) = load(&common)?;
            experiment::export_similarity(&config, &out)?;
            print_json(serde_json::json!({ "out": out.display().to_string() }))
        }
        Command::TrainReference { common } => {
            let (config, out) = load(&common)?;
            experiment::train_reference_to(&config, &out)?;
            print_json(serde_json::json!({ "reference": out.join(experiment::REFERENCE_NAME).display().to_string() }))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
