//! Experiment assembly and the file-producing operations behind the CLI.

mod checkpoint;
mod cka;
mod config;
mod metrics;

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use cka::{cka_linear, cka_trace, stabilization_round};
pub use config::{BaselineConfig, CkaConfig, CohortConfig, ConfigIssue, ExperimentConfig, ModelConfig};
pub use metrics::{read_lines, write_summary, MetricsSink, Summary, SCHEMA, SCHEMA_VERSION};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{loss_ce, sgd_step, Network, OptimizerState, Tensor};
use crate::orchestrator::{build_fleet, BaselineKind, ExperimentReport, RoundRecord, Simulation};
use crate::progressive::full_model;
use crate::rng::{stream_rng, Stream};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const REFERENCE_NAME: &str = "reference";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Data, fleet and model partition for a config.
pub fn build_simulation(config: &ExperimentConfig) -> Result<Simulation> {
    let partition = config.model.partition()?;
    let (train, test) = config.dataset.generate(config.seed)?;
    let clients = build_fleet(&config.fleet, &train, config.seed)?;
    Ok(Simulation {
        partition,
        train,
        test,
        clients,
        train_config: config.train,
        selector: config.selector,
        pace: config.pace,
        seed: config.seed,
    })
}

/// Run the progressive pipeline, streaming round records to `<out>/metrics.jsonl`.
pub fn run_progressive(config: &ExperimentConfig, out: &Path, stage_cap: Option<usize>) -> Result<ExperimentReport> {
    let sim = build_simulation(config)?;
    let mut sink = MetricsSink::create(&out.join(METRICS_FILE), "smartfreeze", config.seed)?;
    let report = sim.run_experiment(config.cohort.delta, stage_cap, &mut |r: &RoundRecord, _: &Network| sink.record(r))?;
    write_summary(&out.join(SUMMARY_FILE), &report, config.seed)?;
    Ok(report)
}

/// Run a full-model baseline for `config.baseline.rounds` rounds. With
/// `cka.checkpoints` set, the global model is saved after every round.
pub fn run_baseline(config: &ExperimentConfig, kind: BaselineKind, out: &Path) -> Result<ExperimentReport> {
    let sim = build_simulation(config)?;
    let name = kind.name();
    let mut sink = MetricsSink::create(&out.join(format!("{name}.jsonl")), name, config.seed)?;
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    let save = config.cka.checkpoints;
    let report = sim.run_baseline(kind, config.baseline.rounds, &mut |r: &RoundRecord, net: &Network| {
        sink.record(r)?;
        if save {
            save_checkpoint(&ckpt_dir, &round_name(r.round), net)?;
        }
        Ok(())
    })?;
    write_summary(&out.join(format!("{name}_summary.json")), &report, config.seed)?;
    Ok(report)
}

fn round_name(round: usize) -> String {
    format!("round_{round:05}")
}

/// Centralized minibatch SGD of the full model on the whole training set.
pub fn train_reference(sim: &Simulation, epochs: usize) -> Result<Network> {
    let mut net = full_model(&sim.partition, sim.seed)?;
    let mask = net.trainable_mask();
    let mut opt = OptimizerState::new(&net, sim.train_config.sgd);
    let mut rng = stream_rng(sim.seed, Stream::Reference, &[]);
    let mut order: Vec<usize> = (0..sim.train.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(sim.train_config.batch_size.max(1)) {
            let b = sim.train.batch(chunk)?;
            let acts = net.forward(&b.inputs)?;
            total += loss_ce(acts.last().expect("non-empty network"), &b.labels)? * chunk.len() as f64;
            let grads = net.backward(&b.inputs, &acts, &b.labels, &mask)?;
            sgd_step(&mut net, &grads, &mut opt)?;
        }
        log::info!("reference epoch {} loss {:.4}", epoch + 1, total / order.len() as f64);
    }
    Ok(net)
}

pub fn train_reference_to(config: &ExperimentConfig, out: &Path) -> Result<Network> {
    let sim = build_simulation(config)?;
    let net = train_reference(&sim, config.cka.reference_epochs)?;
    save_checkpoint(out, REFERENCE_NAME, &net)?;
    Ok(net)
}

/// Write `similarity.csv` and `communities.json`.
pub fn export_similarity(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let sim = build_simulation(config)?;
    let omega = sim.similarity()?;
    let communities = sim.communities(&omega, config.cohort.delta);
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("similarity.csv"), omega.to_csv())?;
    let mut text = serde_json::to_string_pretty(&communities)?;
    text.push('\n');
    std::fs::write(out.join("communities.json"), text)?;
    Ok(())
}

/// The first `probe_size` test inputs.
pub fn probe_batch(test: &Dataset, probe_size: usize) -> Tensor {
    test.inputs.slice_rows(0, probe_size.min(test.len()))
}

/// Per-layer CKA series against a reference model and their stabilization rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaReport {
    pub layers: Vec<usize>,
    /// `series[k][r]`: layer `layers[k]` after round `r + 1`.
    pub series: Vec<Vec<f64>>,
    pub stabilization: Vec<Option<usize>>,
    pub tolerance: f64,
}

impl CkaReport {
    fn from_rows(layers: &[usize], rows: &[Vec<f64>], tolerance: f64) -> Self {
        let series: Vec<Vec<f64>> = (0..layers.len()).map(|k| rows.iter().map(|r| r[k]).collect()).collect();
        let stabilization = series.iter().map(|s| stabilization_round(s, tolerance)).collect();
        Self {
            layers: layers.to_vec(),
            series,
            stabilization,
            tolerance,
        }
    }
}

/// Train a reference centrally, then run `fedavg_full` and trace CKA after every round.
pub fn cka_motivation(config: &ExperimentConfig, rounds: usize) -> Result<CkaReport> {
    let sim = build_simulation(config)?;
    let reference = train_reference(&sim, config.cka.reference_epochs)?;
    let probe = probe_batch(&sim.test, config.cka.probe_size);
    let layers = config.cka.layers.clone();
    let mut rows = Vec::new();
    sim.run_baseline(BaselineKind::FedavgFull, rounds, &mut |_: &RoundRecord, net: &Network| {
        rows.push(cka_trace(net, &reference, &probe, &layers)?);
        Ok(())
    })?;
    Ok(CkaReport::from_rows(&layers, &rows, config.cka.tolerance))
}

/// CKA over saved baseline checkpoints against the saved reference. Writes
/// `cka.jsonl` (one line per round) and `cka_summary.json`.
pub fn analyze_cka(config: &ExperimentConfig, out: &Path) -> Result<CkaReport> {
    let sim = build_simulation(config)?;
    let template = full_model(&sim.partition, sim.seed)?;
    let reference = load_checkpoint(out, REFERENCE_NAME, &template)?;
    let probe = probe_batch(&sim.test, config.cka.probe_size);
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    let mut names: Vec<String> = std::fs::read_dir(&ckpt_dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".manifest")).map(String::from))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Input(format!("no checkpoints in {}", ckpt_dir.display())));
    }
    let mut sink = MetricsSink::create(&out.join("cka.jsonl"), "cka", config.seed)?;
    let mut rows = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let net = load_checkpoint(&ckpt_dir, name, &template)?;
        let row = cka_trace(&net, &reference, &probe, &config.cka.layers)?;
        sink.line(&serde_json::json!({ "round": i + 1, "layers": &config.cka.layers, "cka": &row }))?;
        rows.push(row);
    }
    let report = CkaReport::from_rows(&config.cka.layers, &rows, config.cka.tolerance);
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    std::fs::write(out.join("cka_summary.json"), text)?;
    Ok(report)
}
