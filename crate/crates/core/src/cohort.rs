//! Client cohort structure inferred from output-layer gradients: cosine
//! similarity matrix, similarity graph, Louvain modularity optimization and
//! robust Louvain (RL-CD) refinement by median weight sharpening.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{sgd_step, Network, OptimizerState, ParamId, SgdConfig};
use crate::rng::{stream_rng, Stream};

/// Output-layer gradient of one client after a single probing epoch.
///
/// Only the last parameterized layer is trained; the returned vector is its
/// (weight, bias) gradient averaged over the epoch's minibatches. The batch
/// order depends only on `seed`, so identical shards yield identical vectors.
pub fn probe_client(model: &Network, data: &Dataset, shard: &[usize], batch_size: usize, sgd: SgdConfig, seed: u64) -> Result<Vec<f64>> {
    if shard.is_empty() {
        return Err(Error::Input("empty shard".into()));
    }
    let out_layer = model
        .layers()
        .iter()
        .rposition(|l| l.kind.has_params())
        .ok_or_else(|| Error::Config("model has no parameterized layer".into()))?;
    let mut net = model.clone();
    for i in 0..net.layers().len() {
        net.set_trainable(i, i == out_layer);
    }
    let mask = net.trainable_mask();
    let mut opt = OptimizerState::new(&net, sgd);
    let mut order = shard.to_vec();
    order.shuffle(&mut stream_rng(seed, Stream::Probe, &[]));

    let (w_len, b_len) = {
        let p = net.layer_params(out_layer).expect("parameterized");
        (p.weight.len(), p.bias.len())
    };
    let mut acc = vec![0.0; w_len + b_len];
    let mut batches = 0usize;
    for chunk in order.chunks(batch_size.max(1)) {
        let b = data.batch(chunk)?;
        let acts = net.forward(&b.inputs)?;
        let grads = net.backward(&b.inputs, &acts, &b.labels, &mask)?;
        let gw = grads.get(&ParamId::weight(out_layer)).expect("trainable");
        let gb = grads.get(&ParamId::bias(out_layer)).expect("trainable");
        for (a, g) in acc.iter_mut().zip(gw.data().iter().chain(gb.data())) {
            *a += g;
        }
        batches += 1;
        sgd_step(&mut net, &grads, &mut opt)?;
    }
    for a in &mut acc {
        *a /= batches as f64;
    }
    Ok(acc)
}

/// Probe every client once. Clients with empty shards are skipped with a
/// warning and map to `None`.
pub fn probe_gradients(
    model: &Network,
    data: &Dataset,
    shards: &[Vec<usize>],
    batch_size: usize,
    sgd: SgdConfig,
    seed: u64,
) -> Result<Vec<Option<Vec<f64>>>> {
    shards
        .par_iter()
        .enumerate()
        .map(|(id, shard)| {
            if shard.is_empty() {
                log::warn!("client {id} has an empty shard; excluded from gradient probing");
                return Ok(None);
            }
            probe_client(model, data, shard, batch_size, sgd, seed).map(Some)
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity of two gradient vectors.
pub fn similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!("gradient lengths {} and {} differ", a.len(), b.len())));
    }
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedSimilarity("zero gradient vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Symmetric pairwise similarity with unit diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    n: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_gradients(grads: &[Vec<f64>]) -> Result<Self> {
        let n = grads.len();
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
            for j in i + 1..n {
                let s = similarity(&grads[i], &grads[j])?;
                values[i * n + j] = s;
                values[j * n + i] = s;
            }
        }
        Ok(Self { n, values })
    }

    /// From a full row-major matrix; symmetry and unit diagonal are checked.
    pub fn from_values(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::Input(format!("{} values for a {n}x{n} matrix", values.len())));
        }
        for i in 0..n {
            if values[i * n + i] != 1.0 {
                return Err(Error::Input(format!("diagonal entry {i} is not 1")));
            }
            for j in 0..n {
                let v = values[i * n + j];
                if v != values[j * n + i] || !(-1.0..=1.0).contains(&v) {
                    return Err(Error::Input(format!("entry ({i},{j}) breaks symmetry or range")));
                }
            }
        }
        Ok(Self { n, values })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for i in 0..self.n {
            let row: Vec<String> = (0..self.n).map(|j| format!("{}", self.get(i, j))).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

/// Undirected graph with non-negative weights and no self-loops, stored densely.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedGraph {
    n: usize,
    weights: Vec<f64>,
}

impl WeightedGraph {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            weights: vec![0.0; n * n],
        }
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut g = Self::empty(n);
        for &(i, j, w) in edges {
            if i == j || i >= n || j >= n || !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Input(format!("invalid edge ({i},{j},{w})")));
            }
            g.set(i, j, w);
        }
        Ok(g)
    }

    fn set(&mut self, i: usize, j: usize, w: f64) {
        self.weights[i * self.n + j] = w;
        self.weights[j * self.n + i] = w;
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.n + j]
    }

    pub fn degree(&self, i: usize) -> f64 {
        self.weights[i * self.n..(i + 1) * self.n].iter().sum()
    }

    /// Edges `(i, j, w)` with `i < j` and `w > 0`.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in i + 1..self.n {
                let w = self.weight(i, j);
                if w > 0.0 {
                    out.push((i, j, w));
                }
            }
        }
        out
    }

    pub fn edge_weights(&self) -> Vec<f64> {
        self.edges().into_iter().map(|(_, _, w)| w).collect()
    }

    /// Induced subgraph; node `k` of the result is `nodes[k]`.
    pub fn subgraph(&self, nodes: &[usize]) -> WeightedGraph {
        let mut g = WeightedGraph::empty(nodes.len());
        for (a, &i) in nodes.iter().enumerate() {
            for (b, &j) in nodes.iter().enumerate() {
                if a != b {
                    g.weights[a * nodes.len() + b] = self.weight(i, j);
                }
            }
        }
        g
    }
}

/// Graph over clients with `w(i, j) = max(0, Ω(i, j))` for `i != j`.
pub fn build_graph(omega: &SimilarityMatrix) -> WeightedGraph {
    let n = omega.len();
    let mut g = WeightedGraph::empty(n);
    for i in 0..n {
        for j in i + 1..n {
            g.set(i, j, omega.get(i, j).max(0.0));
        }
    }
    g
}

/// Newman modularity of `membership` (community label per node).
pub fn modularity(graph: &WeightedGraph, membership: &[usize]) -> f64 {
    let n = graph.len();
    let two_m: f64 = (0..n).map(|i| graph.degree(i)).sum();
    if two_m == 0.0 {
        return 0.0;
    }
    let deg: Vec<f64> = (0..n).map(|i| graph.degree(i)).collect();
    let mut q = 0.0;
    for i in 0..n {
        for j in 0..n {
            if membership[i] == membership[j] {
                q += graph.weight(i, j) - deg[i] * deg[j] / two_m;
            }
        }
    }
    q / two_m
}

/// One recorded RL-CD split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub parent: Vec<usize>,
    pub children: Vec<Vec<usize>>,
}

/// A partition of client ids plus the RL-CD split history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommunitySet {
    /// Each community sorted; communities ordered by smallest member.
    pub communities: Vec<Vec<usize>>,
    pub splits: Vec<Split>,
}

impl CommunitySet {
    pub fn from_groups(mut groups: Vec<Vec<usize>>) -> Self {
        for g in &mut groups {
            g.sort_unstable();
        }
        groups.retain(|g| !g.is_empty());
        groups.sort();
        Self {
            communities: groups,
            splits: Vec::new(),
        }
    }

    pub fn from_membership(membership: &[usize]) -> Self {
        let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (node, &c) in membership.iter().enumerate() {
            by_label.entry(c).or_default().push(node);
        }
        Self::from_groups(by_label.into_values().collect())
    }

    pub fn len(&self) -> usize {
        self.communities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.communities.is_empty()
    }

    /// Community index of every node in `0..n`.
    pub fn membership(&self, n: usize) -> Vec<usize> {
        let mut m = vec![usize::MAX; n];
        for (c, members) in self.communities.iter().enumerate() {
            for &i in members {
                m[i] = c;
            }
        }
        m
    }

    pub fn community_of(&self, node: usize) -> Option<usize> {
        self.communities.iter().position(|c| c.binary_search(&node).is_ok())
    }
}

/// Working graph for one Louvain level: adjacency lists without self-loops,
/// self-loop weights kept separately (as `A_ii`, internal weight counted both ways).
struct Level {
    adj: Vec<Vec<(usize, f64)>>,
    self_loops: Vec<f64>,
}

impl Level {
    fn from_graph(g: &WeightedGraph) -> Self {
        let adj = (0..g.len())
            .map(|i| {
                (0..g.len())
                    .filter(|&j| j != i && g.weight(i, j) > 0.0)
                    .map(|j| (j, g.weight(i, j)))
                    .collect()
            })
            .collect();
        Self {
            adj,
            self_loops: vec![0.0; g.len()],
        }
    }

    fn degree(&self, i: usize) -> f64 {
        self.self_loops[i] + self.adj[i].iter().map(|&(_, w)| w).sum::<f64>()
    }

    fn aggregate(&self, comm: &[usize], k: usize) -> Level {
        let mut self_loops = vec![0.0; k];
        let mut maps: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); k];
        for (i, nbrs) in self.adj.iter().enumerate() {
            let ci = comm[i];
            self_loops[ci] += self.self_loops[i];
            for &(j, w) in nbrs {
                let cj = comm[j];
                if ci == cj {
                    self_loops[ci] += w;
                } else {
                    *maps[ci].entry(cj).or_insert(0.0) += w;
                }
            }
        }
        Level {
            adj: maps.into_iter().map(|m| m.into_iter().collect()).collect(),
            self_loops,
        }
    }

    /// Local-move phase. Returns the community of each node and whether any node moved.
    fn local_moves(&self, order: &[usize]) -> (Vec<usize>, bool) {
        let n = self.adj.len();
        let deg: Vec<f64> = (0..n).map(|i| self.degree(i)).collect();
        let two_m: f64 = deg.iter().sum();
        let mut comm: Vec<usize> = (0..n).collect();
        let mut tot = deg.clone();
        let mut improved = false;
        let mut link = vec![0.0; n];
        let mut touched: Vec<usize> = Vec::new();
        for _pass in 0..1000 {
            let mut moved = false;
            for &i in order {
                let ci = comm[i];
                let ki = deg[i];
                touched.clear();
                for &(j, w) in &self.adj[i] {
                    let cj = comm[j];
                    if link[cj] == 0.0 {
                        touched.push(cj);
                    }
                    link[cj] += w;
                }
                tot[ci] -= ki;
                let mut best = ci;
                let mut best_gain = link[ci] - tot[ci] * ki / two_m;
                touched.sort_unstable();
                for &c in &touched {
                    let gain = link[c] - tot[c] * ki / two_m;
                    if gain > best_gain + 1e-12 {
                        best = c;
                        best_gain = gain;
                    }
                }
                tot[best] += ki;
                comm[i] = best;
                for &c in &touched {
                    link[c] = 0.0;
                }
                link[ci] = 0.0;
                if best != ci {
                    moved = true;
                    improved = true;
                }
            }
            if !moved {
                break;
            }
        }
        (comm, improved)
    }
}

/// Louvain modularity maximization (local moves plus aggregation).
///
/// The first level visits nodes in an order shuffled once with `seed`;
/// aggregated levels visit in ascending order.
pub fn louvain(graph: &WeightedGraph, seed: u64) -> CommunitySet {
    let n = graph.len();
    if n == 0 {
        return CommunitySet::from_groups(Vec::new());
    }
    let mut membership: Vec<usize> = (0..n).collect();
    let two_m: f64 = (0..n).map(|i| graph.degree(i)).sum();
    if two_m == 0.0 {
        return CommunitySet::from_membership(&membership);
    }
    let mut level = Level::from_graph(graph);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Louvain, &[]));
    loop {
        let (comm, improved) = level.local_moves(&order);
        if !improved {
            break;
        }
        // Renumber communities densely in order of first appearance by node id.
        let mut relabel = vec![usize::MAX; comm.len()];
        let mut k = 0;
        for &c in &comm {
            if relabel[c] == usize::MAX {
                relabel[c] = k;
                k += 1;
            }
        }
        let comm: Vec<usize> = comm.iter().map(|&c| relabel[c]).collect();
        for m in membership.iter_mut() {
            *m = comm[*m];
        }
        level = level.aggregate(&comm, k);
        order = (0..k).collect();
    }
    CommunitySet::from_membership(&membership)
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

fn sorted_copy(weights: &[f64]) -> Vec<f64> {
    let mut w = weights.to_vec();
    w.sort_by(f64::total_cmp);
    w
}

/// Median-split hierarchy test on raw edge weights: the mean of weights
/// above the median minus the mean of those at or below it exceeds
/// `delta` population standard deviations.
pub fn weights_hierarchical(weights: &[f64], delta: f64) -> bool {
    if weights.len() < 2 {
        return false;
    }
    let sorted = sorted_copy(weights);
    let med = median(&sorted);
    let (above, below): (Vec<f64>, Vec<f64>) = sorted.iter().partition(|&&w| w > med);
    if above.is_empty() || below.is_empty() {
        return false;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let all_mean = mean(&sorted);
    let std = (sorted.iter().map(|w| (w - all_mean).powi(2)).sum::<f64>() / sorted.len() as f64).sqrt();
    mean(&above) - mean(&below) > delta * std
}

/// Whether a community's weight distribution still shows a hierarchy worth
/// splitting. Communities with fewer than 4 nodes never split.
pub fn hierarchy_check(subgraph: &WeightedGraph, delta: f64) -> bool {
    subgraph.len() >= 4 && weights_hierarchical(&subgraph.edge_weights(), delta)
}

/// Drop every edge whose weight is at or below the median edge weight.
pub fn sharpen(subgraph: &WeightedGraph) -> WeightedGraph {
    let weights = subgraph.edge_weights();
    if weights.is_empty() {
        return subgraph.clone();
    }
    let med = median(&sorted_copy(&weights));
    let mut out = subgraph.clone();
    for (i, j, w) in subgraph.edges() {
        if w <= med {
            out.set(i, j, 0.0);
        }
    }
    out
}

/// Robust Louvain community detection.
///
/// Runs Louvain on the whole graph, then repeatedly takes any community whose
/// induced weights fail the hierarchy test, sharpens it at the median and
/// re-runs Louvain on the sharpened subgraph, replacing the community by
/// the resulting sub-communities. A community whose sharpened graph does not
/// split is sharpened again until it splits or the test passes.
pub fn rlcd(graph: &WeightedGraph, delta: f64, seed: u64) -> CommunitySet {
    let initial = louvain(graph, seed);
    let mut done: Vec<Vec<usize>> = Vec::new();
    let mut splits = Vec::new();
    let mut pending: Vec<Vec<usize>> = initial.communities.iter().rev().cloned().collect();
    while let Some(members) = pending.pop() {
        let mut current = graph.subgraph(&members);
        let mut children: Option<Vec<Vec<usize>>> = None;
        while hierarchy_check(&current, delta) {
            current = sharpen(&current);
            let sub_seed = crate::rng::derive_seed(seed, Stream::Louvain, &[members[0] as u64, members.len() as u64]);
            let parts = louvain(&current, sub_seed);
            if parts.len() > 1 {
                children = Some(parts.communities.iter().map(|p| p.iter().map(|&k| members[k]).collect()).collect());
                break;
            }
        }
        match children {
            Some(children) => {
                splits.push(Split {
                    parent: members.clone(),
                    children: children.clone(),
                });
                pending.extend(children.into_iter().rev());
            }
            None => done.push(members),
        }
    }
    let mut set = CommunitySet::from_groups(done);
    set.splits = splits;
    set
}
