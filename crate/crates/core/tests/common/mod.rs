#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng;
use smartfreeze::cohort::{build_graph, louvain, probe_gradients, rlcd, CommunitySet, SimilarityMatrix};
use smartfreeze::data::{Dataset, DatasetSpec};
use smartfreeze::experiment::ExperimentConfig;
use smartfreeze::nn::{loss_ce, LayerKind, LayerSpec, Network, SgdConfig, Tensor};
use smartfreeze::rng::{stream_rng, SimRng, Stream};

pub fn proptest_config(cases: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        cases,
        failure_persistence: None,
        ..Default::default()
    }
}

pub fn config_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

pub fn load_config(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&config_path(name)).expect("shipped config loads")
}

fn dense(input: usize, output: usize) -> LayerKind {
    LayerKind::Dense { input, output }
}

fn conv(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> LayerKind {
    LayerKind::Conv2d {
        in_ch,
        out_ch,
        kernel,
        stride,
        pad,
    }
}

/// Five small networks covering every layer kind, all layers trainable.
pub fn tiny_nets(seed: u64) -> Vec<(Network, Tensor, Vec<usize>)> {
    use LayerKind::{Flatten, Maxpool2x2, Relu};
    let archs: Vec<(Vec<usize>, Vec<LayerKind>, usize)> = vec![
        (vec![4], vec![dense(4, 5), Relu, dense(5, 3)], 3),
        (vec![6], vec![dense(6, 6), Relu, dense(6, 6), Relu, dense(6, 4)], 4),
        (vec![1, 5, 5], vec![conv(1, 2, 3, 1, 1), Relu, Flatten, dense(50, 3)], 3),
        (
            vec![2, 6, 6],
            vec![conv(2, 3, 3, 2, 1), Relu, conv(3, 2, 2, 1, 0), Flatten, dense(8, 2)],
            2,
        ),
        (vec![1, 4, 4], vec![conv(1, 2, 3, 1, 1), Maxpool2x2, Relu, Flatten, dense(8, 3)], 3),
    ];
    archs
        .into_iter()
        .enumerate()
        .map(|(k, (shape, kinds, classes))| {
            let mut rng = stream_rng(seed, Stream::BlockInit, &[k as u64]);
            let specs = kinds
                .into_iter()
                .map(|kind| {
                    if kind.has_params() {
                        LayerSpec::trainable(kind)
                    } else {
                        LayerSpec::frozen(kind)
                    }
                })
                .collect();
            let net = Network::init(shape.clone(), specs, &mut rng).unwrap();
            let rows = 3;
            let len: usize = shape.iter().product();
            let data = (0..rows * len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut full = vec![rows];
            full.extend(shape);
            let x = Tensor::new(full, data).unwrap();
            let labels = (0..rows).map(|_| rng.random_range(0..classes)).collect();
            (net, x, labels)
        })
        .collect()
}

/// Largest relative error between backward() and central differences over
/// every parameter of `net`.
pub fn fd_max_rel_err(net: &Network, x: &Tensor, labels: &[usize]) -> f64 {
    let h = 1e-5;
    let acts = net.forward(x).unwrap();
    let grads = net.backward(x, &acts, labels, &net.trainable_mask()).unwrap();
    let mut worst = 0.0f64;
    for id in net.trainable_ids() {
        let analytic = grads.get(&id).expect("trainable param has a gradient").data().to_vec();
        for (k, &a) in analytic.iter().enumerate() {
            let eval = |delta: f64| {
                let mut p = net.clone();
                p.param_mut(id).unwrap().data_mut()[k] += delta;
                loss_ce(&p.predict(x).unwrap(), labels).unwrap()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    worst
}

/// Latent groups of the ten-client community-recovery fleet.
pub const LATENT_GROUPS: [&[usize]; 4] = [&[0, 1], &[2, 3, 4], &[5, 6, 7], &[8, 9]];

/// Label mixture per latent group; groups 0 and 3 share label 0.
const LATENT_MIX: [&[(usize, f64)]; 4] = [
    &[(0, 0.6), (1, 0.4)],
    &[(2, 0.7), (3, 0.3)],
    &[(4, 0.7), (5, 0.3)],
    &[(0, 0.6), (6, 0.4)],
];

pub struct GroupedFleet {
    pub model: Network,
    pub data: Dataset,
    pub shards: Vec<Vec<usize>>,
}

/// Ten clients drawing 60 samples each from their group's label mixture,
/// with a small dense classifier to probe.
pub fn grouped_fleet(seed: u64) -> GroupedFleet {
    let classes = 7;
    let spec = DatasetSpec::GaussianBlobs {
        num_classes: classes,
        dim: 8,
        train_size: 2100,
        test_size: 7,
        separation: 3.0,
        noise: 1.0,
    };
    let (data, _) = spec.generate(seed).unwrap();
    let mut rng: SimRng = stream_rng(seed, Stream::Partition, &[]);
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in data.labels.iter().enumerate() {
        by_label[l].push(i);
    }
    for pool in &mut by_label {
        pool.shuffle(&mut rng);
    }
    let per_client = 60;
    let mut shards = vec![Vec::new(); 10];
    for (g, members) in LATENT_GROUPS.iter().enumerate() {
        for &c in *members {
            for &(label, frac) in LATENT_MIX[g] {
                let take = (per_client as f64 * frac).round() as usize;
                for _ in 0..take {
                    shards[c].push(by_label[label].pop().expect("enough samples per label"));
                }
            }
            shards[c].sort_unstable();
        }
    }
    let layers = vec![
        LayerSpec::trainable(dense(8, 16)),
        LayerSpec::frozen(LayerKind::Relu),
        LayerSpec::trainable(dense(16, classes)),
    ];
    let model = Network::init(vec![8], layers, &mut stream_rng(seed, Stream::BlockInit, &[])).unwrap();
    GroupedFleet { model, data, shards }
}

/// Every latent group sits inside one community and {0,1} is apart from {8,9}.
pub fn grouped_recovered(communities: &[Vec<usize>]) -> bool {
    let home = |c: usize| communities.iter().position(|m| m.contains(&c));
    let together = LATENT_GROUPS.iter().all(|g| g.iter().all(|&c| home(c) == home(g[0])));
    together && home(0) != home(8)
}

/// Every community of `fine` lies inside exactly one community of `coarse`.
pub fn is_refinement(fine: &[Vec<usize>], coarse: &[Vec<usize>]) -> bool {
    fine.iter()
        .all(|f| coarse.iter().filter(|c| f.iter().all(|i| c.contains(i))).count() == 1)
}

/// Louvain and RL-CD partitions of the probed ten-client fleet.
pub fn grouped_communities(seed: u64) -> (CommunitySet, CommunitySet) {
    let fleet = grouped_fleet(seed);
    let grads = probe_gradients(&fleet.model, &fleet.data, &fleet.shards, 16, SgdConfig::default(), seed).unwrap();
    let grads: Vec<Vec<f64>> = grads.into_iter().map(Option::unwrap).collect();
    let graph = build_graph(&SimilarityMatrix::from_gradients(&grads).unwrap());
    (louvain(&graph, seed), rlcd(&graph, 1.0, seed))
}

/// Per-layer (parameters, output elements, forward FLOPs) computed from the
/// layer list alone.
pub fn layer_table(input: &[usize], kinds: &[LayerKind]) -> Vec<(u64, u64, u64)> {
    let mut shape = input.to_vec();
    let mut rows = Vec::new();
    for kind in kinds {
        let (params, flops) = match *kind {
            LayerKind::Dense { input, output } => {
                shape = vec![output];
                ((input * output + output) as u64, (2 * input * output) as u64)
            }
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
            } => {
                let h = (shape[1] + 2 * pad - kernel) / stride + 1;
                let w = (shape[2] + 2 * pad - kernel) / stride + 1;
                shape = vec![out_ch, h, w];
                let taps = in_ch * kernel * kernel;
                ((taps * out_ch + out_ch) as u64, (2 * taps * out_ch * h * w) as u64)
            }
            LayerKind::Maxpool2x2 => {
                shape = vec![shape[0], shape[1] / 2, shape[2] / 2];
                (0, 0)
            }
            LayerKind::Flatten => {
                shape = vec![shape.iter().product()];
                (0, 0)
            }
            LayerKind::Relu => (0, 0),
        };
        rows.push((params, shape.iter().product::<usize>() as u64, flops));
    }
    rows
}

fn kinds(net: &Network) -> Vec<LayerKind> {
    net.layers().iter().map(|l| l.kind).collect()
}

/// Stage memory in bytes: stored trained activations x2, all parameters,
/// trained-parameter momentum, and the largest group's forward activations.
pub fn oracle_stage_memory(stage: &smartfreeze::progressive::StageModel, batch: u64) -> u64 {
    let table = layer_table(stage.network.input_shape(), &kinds(&stage.network));
    let sum = |r: std::ops::Range<usize>, f: fn(&(u64, u64, u64)) -> u64| -> u64 { table[r].iter().map(f).sum() };
    let mut groups: Vec<(std::ops::Range<usize>, bool)> = (1..stage.stage).map(|j| (stage.block_range(j), false)).collect();
    groups.push((stage.current_block(), true));
    groups.push((stage.op_range.clone(), true));
    let mut reals = 0;
    let mut peak = 0;
    for (r, trained) in &groups {
        let acts = sum(r.clone(), |x| x.1);
        let params = sum(r.clone(), |x| x.0);
        reals += params;
        if *trained {
            reals += 2 * acts * batch + params;
        }
        peak = peak.max(acts * batch);
    }
    8 * (reals + peak)
}

pub fn oracle_full_memory(net: &Network, batch: u64) -> u64 {
    let table = layer_table(net.input_shape(), &kinds(net));
    let params: u64 = table.iter().map(|x| x.0).sum();
    let acts: u64 = table.iter().map(|x| x.1).sum();
    8 * (2 * acts * batch + 2 * params)
}

/// Per-sample FLOPs: forward everywhere, backward (2x forward) on trained layers.
pub fn oracle_flops(net: &Network, trained_from: usize) -> u64 {
    layer_table(net.input_shape(), &kinds(net))
        .iter()
        .enumerate()
        .map(|(i, x)| if i >= trained_from { 3 * x.2 } else { x.2 })
        .sum()
}

/// Direct perturbation: the summed updates telescope to last − first.
pub fn oracle_perturbation(snapshots: &[Vec<f64>]) -> f64 {
    let norm = |v: Vec<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let first = &snapshots[0];
    let last = &snapshots[snapshots.len() - 1];
    let num = norm(last.iter().zip(first).map(|(a, b)| a - b).collect());
    let den: f64 = snapshots
        .windows(2)
        .map(|p| norm(p[1].iter().zip(&p[0]).map(|(a, b)| a - b).collect()))
        .sum();
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Trajectory whose update at round r is `decay^r` times a fixed direction
/// plus `jitter · decay^r` times fresh Gaussian noise.
pub fn trajectory(dim: usize, rounds: usize, decay: f64, jitter: f64, seed: u64) -> Vec<Vec<f64>> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = stream_rng(seed, Stream::Reference, &[]);
    let dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut w: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut out = vec![w.clone()];
    for r in 0..rounds {
        let scale = decay.powi(r as i32);
        for (x, d) in w.iter_mut().zip(&dir) {
            let n: f64 = StandardNormal.sample(&mut rng);
            *x += scale * (0.01 * d + jitter * 0.01 * n);
        }
        out.push(w.clone());
    }
    out
}

/// Round (1-based) at which the controller first fires, if ever.
pub fn first_freeze(config: smartfreeze::pace::PaceConfig, snapshots: &[Vec<f64>]) -> Option<usize> {
    use smartfreeze::pace::{FreezeSignal, PaceController};
    let mut ctl = PaceController::new(config);
    ctl.begin(&snapshots[0]).unwrap();
    snapshots[1..].iter().position(|s| ctl.observe(s).unwrap().freeze).map(|i| i + 1)
}

pub struct SelectorFleet {
    pub omega: SimilarityMatrix,
    pub communities: CommunitySet,
    pub utilities: Vec<smartfreeze::selector::UtilityRecord>,
    pub lambda: f64,
}

/// `n` clients in three latent groups. Gradients are a component shared by
/// the whole fleet, a group direction and noise, so similarities are mostly
/// positive as with probed output layers.
pub fn selector_fleet(n: usize, seed: u64) -> SelectorFleet {
    use rand_distr::{Distribution, StandardNormal};
    use smartfreeze::selector::{default_lambda, UtilityRecord};
    let mut rng = stream_rng(seed, Stream::Selection, &[]);
    let dim = 12;
    let centres: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..dim).map(|_| -> f64 { StandardNormal.sample(&mut rng) }).collect())
        .collect();
    let shared: Vec<f64> = (0..dim).map(|_| -> f64 { StandardNormal.sample(&mut rng) }).collect();
    let grads: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            centres[i % 3]
                .iter()
                .zip(&shared)
                .map(|(c, s)| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    1.5 * s + c + 0.5 * z
                })
                .collect()
        })
        .collect();
    let omega = SimilarityMatrix::from_gradients(&grads).unwrap();
    let communities = rlcd(&build_graph(&omega), 1.0, seed);
    // Importance is shard size times mean loss; time is shard size over a
    // tiered compute rate, as in the simulator.
    let rates = [1.0, 2.5, 5.0];
    let raw: Vec<UtilityRecord> = (0..n)
        .map(|i| {
            let samples = rng.random_range(20.0..60.0);
            let loss = rng.random_range(1.5..2.5);
            let rate = rates[rng.random_range(0..rates.len())];
            UtilityRecord::new(i, samples * loss, samples / rate, 0.0, 0)
        })
        .collect();
    let lambda = default_lambda(&raw);
    let utilities = raw
        .into_iter()
        .map(|r| UtilityRecord::new(r.client, r.importance, r.time, lambda, 0))
        .collect();
    SelectorFleet {
        omega,
        communities,
        utilities,
        lambda,
    }
}

/// Best objective over every `k`-subset of `0..n`.
pub fn exhaustive_objective(fleet: &SelectorFleet, k: usize) -> f64 {
    let n = fleet.utilities.len();
    let mut best = f64::NEG_INFINITY;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let cohort: Vec<usize> = (0..n).filter(|&i| mask >> i & 1 == 1).collect();
        best = best.max(smartfreeze::selector::objective(&cohort, &fleet.omega, &fleet.utilities, fleet.lambda).unwrap());
    }
    best
}
