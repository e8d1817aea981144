//! The simulation engine: fleet construction, Dirichlet partitioning, local
//! training, weighted aggregation, the per-stage round loop with freezing and
//! growth, the simulated clock, and the full-model baselines.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use rand::seq::{IndexedRandom, SliceRandom};
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{build_graph, probe_gradients, rlcd, CommunitySet, SimilarityMatrix};
use crate::cost::{client_time, full_training_flops, full_training_memory, round_time, stage_flops, stage_memory, MemoryBreakdown};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{loss_ce, sgd_step, LayerParams, Network, OptimizerState, SgdConfig};
use crate::pace::{FreezeSignal, PaceConfig, PaceController};
use crate::progressive::{full_model, grow, initial_stage, BlockPartition, StageModel};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::selector::{data_importance, default_lambda, eligible, select, SelectionConstraints, UtilityRecord};

/// Rows per forward pass during evaluation.
const EVAL_CHUNK: usize = 512;
/// Dirichlet redraws allowed before giving up on a partition with no empty client.
const PARTITION_ATTEMPTS: u64 = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryTier {
    pub name: String,
    pub capacity_bytes: u64,
    pub proportion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComputeTier {
    pub name: String,
    /// Instructions per second.
    pub rate: f64,
    pub proportion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetConfig {
    pub num_clients: usize,
    /// Dirichlet concentration of the label partition.
    pub alpha: f64,
    pub memory_tiers: Vec<MemoryTier>,
    pub compute_tiers: Vec<ComputeTier>,
}

impl FleetConfig {
    pub fn validate(&self) -> std::result::Result<(), Vec<(String, String)>> {
        let mut errs = Vec::new();
        if self.num_clients == 0 {
            errs.push(("fleet.num_clients".into(), "must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            errs.push(("fleet.alpha".into(), format!("must be positive, got {}", self.alpha)));
        }
        let check = |name: &str, props: Vec<f64>, errs: &mut Vec<(String, String)>| {
            if props.is_empty() {
                errs.push((format!("fleet.{name}"), "needs at least one tier".into()));
            } else if props.iter().any(|p| p.is_nan() || *p < 0.0) || (props.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                errs.push((format!("fleet.{name}"), "tier proportions must be non-negative and sum to 1".into()));
            }
        };
        check("memory_tiers", self.memory_tiers.iter().map(|t| t.proportion).collect(), &mut errs);
        check(
            "compute_tiers",
            self.compute_tiers.iter().map(|t| t.proportion).collect(),
            &mut errs,
        );
        for (i, t) in self.memory_tiers.iter().enumerate() {
            if t.capacity_bytes == 0 {
                errs.push((format!("fleet.memory_tiers[{i}].capacity_bytes"), "must be > 0".into()));
            }
        }
        for (i, t) in self.compute_tiers.iter().enumerate() {
            if !(t.rate > 0.0 && t.rate.is_finite()) {
                errs.push((format!("fleet.compute_tiers[{i}].rate"), "must be positive".into()));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

/// Local training and timing parameters shared by every client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub local_epochs: usize,
    pub batch_size: usize,
    /// Instructions per FLOP in the completion-time model.
    pub rho: f64,
    pub sgd: SgdConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            local_epochs: 5,
            batch_size: 32,
            rho: 1.0,
            sgd: SgdConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientProfile {
    pub id: usize,
    pub memory_capacity: u64,
    pub compute_rate: f64,
    /// Indices into the training set.
    pub shard: Vec<usize>,
}

/// Per-tier counts by largest remainder, in tier order.
fn tier_counts(props: &[f64], n: usize) -> Vec<usize> {
    let raw: Vec<f64> = props.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

fn assign_tiers(props: &[f64], n: usize, seed: u64, which: u64) -> Vec<usize> {
    let mut labels: Vec<usize> = tier_counts(props, n)
        .into_iter()
        .enumerate()
        .flat_map(|(tier, c)| std::iter::repeat_n(tier, c))
        .collect();
    labels.shuffle(&mut stream_rng(seed, Stream::Fleet, &[which]));
    labels
}

/// Split sample indices across `n` clients: for each class, proportions are
/// drawn from `Dirichlet(α·1)` and the class's shuffled samples are dealt by
/// cumulative proportion. Partitions leaving a client empty are redrawn.
pub fn partition_dirichlet(labels: &[usize], num_classes: usize, n: usize, alpha: f64, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 || n > labels.len() {
        return Err(Error::Config(format!("cannot split {} samples across {n} clients", labels.len())));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("Dirichlet concentration must be positive, got {alpha}")));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    for attempt in 0..PARTITION_ATTEMPTS {
        let mut rng = stream_rng(seed, Stream::Partition, &[attempt]);
        let mut shards = vec![Vec::new(); n];
        for class in 0..num_classes {
            let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
            idx.shuffle(&mut rng);
            let draws: Vec<f64> = (0..n).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = draws.iter().sum();
            let mut cum = 0.0;
            let mut start = 0;
            for (k, d) in draws.iter().enumerate() {
                cum += d;
                let end = if k + 1 == n {
                    idx.len()
                } else {
                    ((cum / total) * idx.len() as f64).round() as usize
                }
                .clamp(start, idx.len());
                shards[k].extend_from_slice(&idx[start..end]);
                start = end;
            }
        }
        if shards.iter().all(|s| !s.is_empty()) {
            for s in &mut shards {
                s.sort_unstable();
            }
            return Ok(shards);
        }
    }
    Err(Error::Config(format!(
        "no partition without an empty client after {PARTITION_ATTEMPTS} draws (alpha = {alpha}, {n} clients)"
    )))
}

/// Clients with tiered capacities and rates, holding Dirichlet shards of `train`.
pub fn build_fleet(config: &FleetConfig, train: &Dataset, seed: u64) -> Result<Vec<ClientProfile>> {
    config
        .validate()
        .map_err(|e| Error::Config(e.iter().map(|(p, m)| format!("{p}: {m}")).collect::<Vec<_>>().join("; ")))?;
    let n = config.num_clients;
    let shards = partition_dirichlet(&train.labels, train.num_classes, n, config.alpha, seed)?;
    let mem = assign_tiers(&config.memory_tiers.iter().map(|t| t.proportion).collect::<Vec<_>>(), n, seed, 0);
    let cpu = assign_tiers(&config.compute_tiers.iter().map(|t| t.proportion).collect::<Vec<_>>(), n, seed, 1);
    Ok(shards
        .into_iter()
        .enumerate()
        .map(|(id, shard)| ClientProfile {
            id,
            memory_capacity: config.memory_tiers[mem[id]].capacity_bytes,
            compute_rate: config.compute_tiers[cpu[id]].rate,
            shard,
        })
        .collect())
}

/// Trainable-layer parameters returned by a client, with its final loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub client: usize,
    pub samples: usize,
    /// One slot per layer of the trainable range.
    pub params: Vec<Option<LayerParams>>,
    pub loss: f64,
}

/// Mean cross-entropy of `net` over the shard.
fn shard_loss(net: &Network, data: &Dataset, shard: &[usize]) -> Result<f64> {
    Ok(data_importance(net, data, shard)? / shard.len().max(1) as f64)
}

/// `epochs` of minibatch SGD on the shard, updating only the layers marked
/// trainable in `net`. Momentum starts from zero each session. Returns the
/// parameters of `trainable` and the mean loss of the last epoch (the shard's
/// evaluation loss when `epochs` is 0).
pub fn local_train(
    net: &Network,
    trainable: std::ops::Range<usize>,
    data: &Dataset,
    client: usize,
    shard: &[usize],
    train: &TrainConfig,
    seed: u64,
) -> Result<LocalUpdate> {
    let mut net = net.clone();
    let mut loss = 0.0;
    if train.local_epochs == 0 {
        loss = shard_loss(&net, data, shard)?;
    } else {
        let mask = net.trainable_mask();
        let mut opt = OptimizerState::new(&net, train.sgd);
        let mut rng = stream_rng(seed, Stream::LocalTrain, &[]);
        let mut order = shard.to_vec();
        for _ in 0..train.local_epochs {
            order.shuffle(&mut rng);
            let mut weighted = 0.0;
            for chunk in order.chunks(train.batch_size.max(1)) {
                let b = data.batch(chunk)?;
                let acts = net.forward(&b.inputs)?;
                weighted += loss_ce(acts.last().expect("non-empty network"), &b.labels)? * chunk.len() as f64;
                let grads = net.backward(&b.inputs, &acts, &b.labels, &mask)?;
                sgd_step(&mut net, &grads, &mut opt)?;
            }
            loss = weighted / order.len().max(1) as f64;
        }
    }
    Ok(LocalUpdate {
        client,
        samples: shard.len(),
        params: net.params()[trainable].to_vec(),
        loss,
    })
}

/// Sample-weighted mean of the updates, summed in ascending client order.
pub fn aggregate(updates: &[LocalUpdate]) -> Result<Vec<Option<LayerParams>>> {
    let first = updates.first().ok_or_else(|| Error::Contract("aggregation of no updates".into()))?;
    let mut order: Vec<&LocalUpdate> = updates.iter().collect();
    order.sort_by_key(|u| u.client);
    let total: usize = updates.iter().map(|u| u.samples).sum();
    if total == 0 || updates.iter().any(|u| u.samples == 0) {
        return Err(Error::Contract("aggregation weights must be positive".into()));
    }
    let mut out: Vec<Option<LayerParams>> = first
        .params
        .iter()
        .map(|p| {
            p.as_ref().map(|p| {
                let mut z = p.clone();
                z.weight.data_mut().fill(0.0);
                z.bias.data_mut().fill(0.0);
                z
            })
        })
        .collect();
    for u in order {
        if u.params.len() != out.len() {
            return Err(Error::Contract(format!(
                "client {} returned {} layers, expected {}",
                u.client,
                u.params.len(),
                out.len()
            )));
        }
        let w = u.samples as f64 / total as f64;
        for (layer, (acc, p)) in out.iter_mut().zip(&u.params).enumerate() {
            match (acc, p) {
                (None, None) => {}
                (Some(acc), Some(p)) if acc.weight.shape() == p.weight.shape() && acc.bias.shape() == p.bias.shape() => {
                    for (a, v) in acc.weight.data_mut().iter_mut().zip(p.weight.data()) {
                        *a += w * v;
                    }
                    for (a, v) in acc.bias.data_mut().iter_mut().zip(p.bias.data()) {
                        *a += w * v;
                    }
                }
                _ => {
                    return Err(Error::Contract(format!(
                        "client {} layer {layer} does not match the other updates",
                        u.client
                    )))
                }
            }
        }
    }
    Ok(out)
}

/// Accuracy and mean loss of `net` on `data`.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<(f64, f64)> {
    let mut correct = 0usize;
    let mut loss = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let b = data.batch(chunk)?;
        let logits = net.predict(&b.inputs)?;
        loss += loss_ce(&logits, &b.labels)? * chunk.len() as f64;
        let c = logits.row_len();
        for (row, &label) in logits.data().chunks(c).zip(&b.labels) {
            let arg = row.iter().enumerate().fold(0, |best, (k, &v)| if v > row[best] { k } else { best });
            correct += usize::from(arg == label);
        }
    }
    Ok((correct as f64 / data.len() as f64, loss / data.len() as f64))
}

/// Order-sensitive digest of a parameter vector's bit patterns.
pub fn param_digest(values: &[f64]) -> u64 {
    let mut h = DefaultHasher::new();
    for v in values {
        h.write_u64(v.to_bits());
    }
    h.finish()
}

fn write_params(net: &mut Network, start: usize, params: Vec<Option<LayerParams>>) {
    for (k, p) in params.into_iter().enumerate() {
        if let (Some(dst), Some(src)) = (net.layer_params_mut(start + k), p) {
            *dst = src;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// Global round index, from 1.
    pub round: usize,
    pub stage: usize,
    pub stage_round: usize,
    pub selected: Vec<usize>,
    pub exploited: usize,
    pub mean_train_loss: f64,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub perturbation: Option<f64>,
    pub smoothed: Option<f64>,
    pub slope: Option<f64>,
    pub freeze: bool,
    pub round_seconds: f64,
    pub stage_memory_bytes: u64,
    pub cumulative_seconds: f64,
    /// Digest of every frozen block's parameters.
    pub frozen_digest: u64,
    pub constraint_failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub rounds: usize,
    pub froze: bool,
    pub memory: MemoryBreakdown,
    pub flops_per_sample: u64,
    pub eligible: usize,
    pub lambda: f64,
    pub final_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub kind: String,
    pub stages: Vec<StageSummary>,
    pub records: Vec<RoundRecord>,
    pub final_accuracy: f64,
    pub total_seconds: f64,
    pub full_training_memory: MemoryBreakdown,
    pub communities: Option<CommunitySet>,
    pub memory_wall: bool,
    /// Set when the run stopped early (e.g. an infeasible stage).
    pub aborted: Option<String>,
}

/// Baseline flavours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Full-model FedAvg, selection ignores memory.
    FedavgFull,
    /// Full-model FedAvg restricted to clients that can hold full training.
    ExclusiveFl,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::FedavgFull => "fedavg_full",
            BaselineKind::ExclusiveFl => "exclusive_fl",
        }
    }
}

/// Mutable run state threaded through stages.
#[derive(Debug, Clone, Default)]
pub struct RunState {
    pub round: usize,
    pub clock: f64,
    pub records: Vec<RoundRecord>,
}

/// Receives each round record, with the model it describes, as soon as it is produced.
pub type RecordHook<'a> = dyn FnMut(&RoundRecord, &Network) -> Result<()> + 'a;

/// A hook that ignores every record.
pub fn no_hook(_: &RoundRecord, _: &Network) -> Result<()> {
    Ok(())
}

/// Everything fixed for one experiment.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub partition: BlockPartition,
    pub train: Dataset,
    pub test: Dataset,
    pub clients: Vec<ClientProfile>,
    pub train_config: TrainConfig,
    pub selector: SelectionConstraints,
    pub pace: PaceConfig,
    pub seed: u64,
}

impl Simulation {
    fn shard_sizes(&self) -> Vec<usize> {
        self.clients.iter().map(|c| c.shard.len()).collect()
    }

    fn shards(&self) -> Vec<Vec<usize>> {
        self.clients.iter().map(|c| c.shard.clone()).collect()
    }

    /// Output-layer gradient similarity of every client on the initial full model.
    pub fn similarity(&self) -> Result<SimilarityMatrix> {
        let model = full_model(&self.partition, self.seed)?;
        let grads = probe_gradients(
            &model,
            &self.train,
            &self.shards(),
            self.train_config.batch_size,
            self.train_config.sgd,
            derive_seed(self.seed, Stream::Probe, &[]),
        )?;
        let grads: Vec<Vec<f64>> = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.ok_or_else(|| Error::Input(format!("client {i} has no data to probe"))))
            .collect::<Result<_>>()?;
        SimilarityMatrix::from_gradients(&grads)
    }

    /// Communities from RL-CD on the similarity graph.
    pub fn communities(&self, omega: &SimilarityMatrix, delta: f64) -> CommunitySet {
        rlcd(&build_graph(omega), delta, derive_seed(self.seed, Stream::Louvain, &[]))
    }

    fn local_round(&self, net: &Network, trainable: std::ops::Range<usize>, cohort: &[usize], round: usize) -> Result<Vec<LocalUpdate>> {
        cohort
            .par_iter()
            .map(|&i| {
                let c = &self.clients[i];
                let seed = derive_seed(self.seed, Stream::LocalTrain, &[round as u64, i as u64]);
                local_train(net, trainable.clone(), &self.train, i, &c.shard, &self.train_config, seed)
            })
            .collect()
    }

    /// Train the current block until `signal` freezes it or the round cap is hit.
    pub fn run_stage(
        &self,
        stage: &mut StageModel,
        communities: &CommunitySet,
        signal: &mut dyn FreezeSignal,
        state: &mut RunState,
        hook: &mut RecordHook<'_>,
    ) -> Result<StageSummary> {
        let t = stage.stage;
        let tc = &self.train_config;
        let memory = stage_memory(stage, tc.batch_size);
        let caps: Vec<u64> = self.clients.iter().map(|c| c.memory_capacity).collect();
        let phi = self.selector.min_eligible_for(self.clients.len());
        let elig = eligible(&caps, memory.total, phi, t)?;
        let flops = stage_flops(stage);
        let times: Vec<f64> = self
            .clients
            .iter()
            .map(|c| client_time(flops, c.shard.len(), tc.rho, c.compute_rate, tc.local_epochs))
            .collect::<Result<_>>()?;
        let importance: Vec<f64> = elig
            .par_iter()
            .map(|&i| data_importance(&stage.network, &self.train, &self.clients[i].shard))
            .collect::<Result<_>>()?;
        let mut utilities: Vec<UtilityRecord> = (0..self.clients.len())
            .map(|i| UtilityRecord::new(i, 0.0, times[i], 0.0, state.round))
            .collect();
        for (&i, &imp) in elig.iter().zip(&importance) {
            utilities[i].importance = imp;
        }
        let eligible_records: Vec<UtilityRecord> = elig.iter().map(|&i| utilities[i]).collect();
        let lambda = self.selector.lambda.unwrap_or_else(|| default_lambda(&eligible_records));
        for u in &mut utilities {
            u.recompute(lambda);
        }
        let mut constraints = self.selector;
        constraints.cohort_size = constraints.cohort_size.min(elig.len());
        let sizes = self.shard_sizes();

        signal.begin(&stage.current_block_vector())?;
        let frozen_digest = param_digest(&stage.frozen_vector());
        let trainable = stage.trainable_range();
        let mut froze = false;
        let mut rounds = 0;
        let mut accuracy = 0.0;
        for stage_round in 1..=self.pace.round_cap {
            state.round += 1;
            let mut rng = stream_rng(self.seed, Stream::Selection, &[state.round as u64]);
            let sel = select(communities, &utilities, &sizes, &constraints, &elig, &mut rng)?;
            let updates = self.local_round(&stage.network, trainable.clone(), &sel.clients, state.round)?;
            write_params(&mut stage.network, trainable.start, aggregate(&updates)?);
            for u in &updates {
                let rec = &mut utilities[u.client];
                rec.importance = u.loss * u.samples as f64;
                rec.updated_round = state.round;
                rec.recompute(lambda);
            }
            let total_samples: usize = updates.iter().map(|u| u.samples).sum();
            let mean_loss = updates.iter().map(|u| u.loss * u.samples as f64).sum::<f64>() / total_samples as f64;
            let (acc, test_loss) = evaluate(&stage.network, &self.test)?;
            let seconds = round_time(&sel.clients.iter().map(|&i| times[i]).collect::<Vec<_>>())?;
            state.clock += seconds;
            let obs = signal.observe(&stage.current_block_vector())?;
            let record = RoundRecord {
                round: state.round,
                stage: t,
                stage_round,
                selected: sel.clients,
                exploited: sel.exploited,
                mean_train_loss: mean_loss,
                test_accuracy: acc,
                test_loss,
                perturbation: obs.perturbation,
                smoothed: obs.smoothed,
                slope: obs.slope,
                freeze: obs.freeze,
                round_seconds: seconds,
                stage_memory_bytes: memory.total,
                cumulative_seconds: state.clock,
                frozen_digest,
                constraint_failure: sel.constraint_failure,
            };
            hook(&record, &stage.network)?;
            state.records.push(record);
            rounds = stage_round;
            accuracy = acc;
            if obs.freeze {
                froze = true;
                break;
            }
        }
        if !froze {
            log::warn!("stage {t} hit the round cap of {} without freezing", self.pace.round_cap);
        }
        Ok(StageSummary {
            stage: t,
            rounds,
            froze,
            memory,
            flops_per_sample: flops,
            eligible: elig.len(),
            lambda,
            final_accuracy: accuracy,
        })
    }

    /// Probe and cluster once, then train every stage in turn, growing the model between stages.
    pub fn run_experiment(&self, delta: f64, stage_cap: Option<usize>, hook: &mut RecordHook<'_>) -> Result<ExperimentReport> {
        let omega = self.similarity()?;
        let communities = self.communities(&omega, delta);
        let full = full_model(&self.partition, self.seed)?;
        let mut report = ExperimentReport {
            kind: "smartfreeze".into(),
            stages: Vec::new(),
            records: Vec::new(),
            final_accuracy: 0.0,
            total_seconds: 0.0,
            full_training_memory: full_training_memory(&full, self.train_config.batch_size),
            communities: Some(communities.clone()),
            memory_wall: false,
            aborted: None,
        };
        let mut state = RunState::default();
        let mut stage = initial_stage(&self.partition, self.seed)?;
        let last = stage_cap.unwrap_or(usize::MAX).min(self.partition.num_blocks());
        loop {
            let mut pace = PaceController::new(self.pace);
            match self.run_stage(&mut stage, &communities, &mut pace, &mut state, &mut *hook) {
                Ok(s) => report.stages.push(s),
                Err(e @ Error::Infeasible { .. }) => {
                    log::error!("{e}");
                    report.aborted = Some(e.to_string());
                    break;
                }
                Err(e) => return Err(e),
            }
            if stage.stage >= last {
                break;
            }
            stage = grow(&stage, &self.partition, self.seed)?;
        }
        report.final_accuracy = state.records.last().map_or(0.0, |r| r.test_accuracy);
        report.total_seconds = state.clock;
        report.records = state.records;
        Ok(report)
    }

    /// Full-model FedAvg for `rounds` rounds with uniform random cohorts.
    pub fn run_baseline(&self, kind: BaselineKind, rounds: usize, hook: &mut RecordHook<'_>) -> Result<ExperimentReport> {
        let tc = &self.train_config;
        let mut net = full_model(&self.partition, self.seed)?;
        let memory = full_training_memory(&net, tc.batch_size);
        let mut report = ExperimentReport {
            kind: kind.name().into(),
            stages: Vec::new(),
            records: Vec::new(),
            final_accuracy: 0.0,
            total_seconds: 0.0,
            full_training_memory: memory,
            communities: None,
            memory_wall: false,
            aborted: None,
        };
        let pool: Vec<usize> = match kind {
            BaselineKind::FedavgFull => (0..self.clients.len()).collect(),
            BaselineKind::ExclusiveFl => (0..self.clients.len())
                .filter(|&i| self.clients[i].memory_capacity >= memory.total)
                .collect(),
        };
        if pool.is_empty() {
            log::warn!("memory wall: no client can hold full-model training ({} bytes)", memory.total);
            report.memory_wall = true;
            report.aborted = Some(format!(
                "memory wall: no client can hold full-model training ({} bytes)",
                memory.total
            ));
            return Ok(report);
        }
        let flops = full_training_flops(&net);
        let times: Vec<f64> = self
            .clients
            .iter()
            .map(|c| client_time(flops, c.shard.len(), tc.rho, c.compute_rate, tc.local_epochs))
            .collect::<Result<_>>()?;
        let size = self.selector.cohort_size.min(pool.len());
        let all = 0..net.layers().len();
        let mut clock = 0.0;
        let mut accuracy = 0.0;
        for round in 1..=rounds {
            let mut rng = stream_rng(self.seed, Stream::Baseline, &[round as u64]);
            let mut cohort: Vec<usize> = pool.choose_multiple(&mut rng, size).copied().collect();
            cohort.sort_unstable();
            let updates = self.local_round(&net, all.clone(), &cohort, round)?;
            write_params(&mut net, 0, aggregate(&updates)?);
            let total_samples: usize = updates.iter().map(|u| u.samples).sum();
            let mean_loss = updates.iter().map(|u| u.loss * u.samples as f64).sum::<f64>() / total_samples as f64;
            let (acc, test_loss) = evaluate(&net, &self.test)?;
            let seconds = round_time(&cohort.iter().map(|&i| times[i]).collect::<Vec<_>>())?;
            clock += seconds;
            let record = RoundRecord {
                round,
                stage: self.partition.num_blocks(),
                stage_round: round,
                exploited: 0,
                selected: cohort,
                mean_train_loss: mean_loss,
                test_accuracy: acc,
                test_loss,
                perturbation: None,
                smoothed: None,
                slope: None,
                freeze: false,
                round_seconds: seconds,
                stage_memory_bytes: memory.total,
                cumulative_seconds: clock,
                frozen_digest: param_digest(&[]),
                constraint_failure: None,
            };
            hook(&record, &net)?;
            report.records.push(record);
            accuracy = acc;
        }
        report.final_accuracy = accuracy;
        report.total_seconds = clock;
        Ok(report)
    }
}
