//! Per-round participant selection: memory eligibility, client utility,
//! community-stratified exploitation with ε exploration, and the minimum
//! selected-data constraint.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{CommunitySet, SimilarityMatrix};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{per_sample_losses, Network};

/// Floor applied to the summed pairwise similarity in the diversity term.
pub const DIVERSITY_FLOOR: f64 = 1e-6;

/// Rows per forward pass when scoring a shard.
const SCORE_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilityRecord {
    pub client: usize,
    /// Summed per-sample loss on the client's shard.
    pub importance: f64,
    /// Simulated local training seconds at the current stage.
    pub time: f64,
    pub util: f64,
    pub updated_round: usize,
}

impl UtilityRecord {
    pub fn new(client: usize, importance: f64, time: f64, lambda: f64, round: usize) -> Self {
        Self {
            client,
            importance,
            time,
            util: importance - lambda * time,
            updated_round: round,
        }
    }

    pub fn recompute(&mut self, lambda: f64) {
        self.util = self.importance - lambda * self.time;
    }
}

/// Selector parameters. `lambda` and `min_eligible` fall back to their
/// data-dependent defaults when unset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConstraints {
    pub lambda: Option<f64>,
    pub epsilon: f64,
    pub min_eligible: Option<usize>,
    /// Minimum total samples over the selected cohort.
    pub min_total_data: usize,
    pub cohort_size: usize,
}

impl Default for SelectionConstraints {
    fn default() -> Self {
        Self {
            lambda: None,
            epsilon: 0.1,
            min_eligible: None,
            min_total_data: 0,
            cohort_size: 10,
        }
    }
}

impl SelectionConstraints {
    /// `⌈0.05·N⌉` unless configured.
    pub fn min_eligible_for(&self, fleet_size: usize) -> usize {
        self.min_eligible
            .unwrap_or_else(|| (fleet_size as f64 * 0.05).ceil().max(1.0) as usize)
    }

    pub fn validate(&self) -> std::result::Result<(), Vec<(String, String)>> {
        let mut errs = Vec::new();
        if !(0.0..=1.0).contains(&self.epsilon) {
            errs.push(("selector.epsilon".into(), format!("must be in [0, 1], got {}", self.epsilon)));
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                errs.push(("selector.lambda".into(), format!("must be finite and >= 0, got {l}")));
            }
        }
        if self.min_eligible == Some(0) {
            errs.push(("selector.min_eligible".into(), "must be >= 1".into()));
        }
        if self.cohort_size == 0 {
            errs.push(("selector.cohort_size".into(), "must be >= 1".into()));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

/// Summed per-sample loss of `model` over the shard. An empty shard scores 0.
pub fn data_importance(model: &Network, data: &Dataset, shard: &[usize]) -> Result<f64> {
    if shard.is_empty() {
        log::warn!("importance of an empty shard is 0");
        return Ok(0.0);
    }
    let mut total = 0.0;
    for chunk in shard.chunks(SCORE_CHUNK) {
        let b = data.batch(chunk)?;
        total += per_sample_losses(&model.predict(&b.inputs)?, &b.labels)?.iter().sum::<f64>();
    }
    Ok(total)
}

/// `1 / max(η, Σ_{i<j} Ω_ij)` over the cohort.
pub fn diversity(cohort: &[usize], omega: &SimilarityMatrix) -> Result<f64> {
    if cohort.len() < 2 {
        return Err(Error::Contract(format!("diversity needs at least 2 clients, got {}", cohort.len())));
    }
    let mut sum = 0.0;
    for (a, &i) in cohort.iter().enumerate() {
        for &j in &cohort[a + 1..] {
            sum += omega.get(i, j);
        }
    }
    Ok(1.0 / sum.max(DIVERSITY_FLOOR))
}

/// Clients whose memory capacity covers `required` bytes, ascending. Fewer
/// than `min_eligible` is an infeasible stage.
pub fn eligible(capacities: &[u64], required: u64, min_eligible: usize, stage: usize) -> Result<Vec<usize>> {
    let ids: Vec<usize> = (0..capacities.len()).filter(|&i| capacities[i] >= required).collect();
    if ids.len() < min_eligible {
        return Err(Error::Infeasible {
            stage,
            eligible: ids.len(),
            min_eligible,
            required_bytes: required,
        });
    }
    Ok(ids)
}

/// `mean(I) / mean(t)` over the given records; 0 when every time is 0.
pub fn default_lambda(records: &[UtilityRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let n = records.len() as f64;
    let mean_i = records.iter().map(|r| r.importance).sum::<f64>() / n;
    let mean_t = records.iter().map(|r| r.time).sum::<f64>() / n;
    if mean_t > 0.0 {
        mean_i / mean_t
    } else {
        0.0
    }
}

/// Selection objective: `Div + ΣI − λ·max t` (the diversity term is 0 for a single client).
pub fn objective(cohort: &[usize], omega: &SimilarityMatrix, utilities: &[UtilityRecord], lambda: f64) -> Result<f64> {
    if cohort.is_empty() {
        return Err(Error::Contract("objective of an empty cohort".into()));
    }
    let div = if cohort.len() >= 2 { diversity(cohort, omega)? } else { 0.0 };
    let importance: f64 = cohort.iter().map(|&i| utilities[i].importance).sum();
    let slowest = cohort.iter().map(|&i| utilities[i].time).fold(f64::NEG_INFINITY, f64::max);
    Ok(div + importance - lambda * slowest)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    /// Selected clients, ascending.
    pub clients: Vec<usize>,
    /// How many were chosen by utility (the rest were explored).
    pub exploited: usize,
    /// Set when the minimum selected-data constraint could not be met.
    pub constraint_failure: Option<String>,
}

/// Choose a cohort of `constraints.cohort_size` from `eligible`.
///
/// Exploitation fills `⌈(1−ε)|S|⌉` slots round-robin over communities in
/// order, each time taking the unselected eligible member with the highest
/// utility (ties to the lower id). Exploration fills the rest uniformly from
/// the remaining eligible clients. If the cohort holds fewer than
/// `min_total_data` samples, the smallest-shard members are swapped for the
/// largest remaining shards while that increases the total.
pub fn select<R: Rng + ?Sized>(
    communities: &CommunitySet,
    utilities: &[UtilityRecord],
    shard_sizes: &[usize],
    constraints: &SelectionConstraints,
    eligible: &[usize],
    rng: &mut R,
) -> Result<Selection> {
    let size = constraints.cohort_size;
    if eligible.len() < size {
        return Err(Error::Selection(format!(
            "{} eligible clients cannot fill a cohort of {size}",
            eligible.len()
        )));
    }
    let n = utilities.len();
    let mut is_eligible = vec![false; n];
    for &i in eligible {
        is_eligible[i] = true;
    }
    let mut taken = vec![false; n];
    let mut chosen = Vec::with_capacity(size);

    let exploit = (((1.0 - constraints.epsilon) * size as f64) - 1e-9).ceil().max(0.0) as usize;
    let exploit = exploit.min(size);
    let mut pools: Vec<Vec<usize>> = communities
        .communities
        .iter()
        .map(|c| c.iter().copied().filter(|&i| i < n && is_eligible[i]).collect::<Vec<_>>())
        .filter(|c: &Vec<usize>| !c.is_empty())
        .collect();
    // Clients outside every community form a trailing pool.
    let covered: Vec<bool> = {
        let mut v = vec![false; n];
        for c in &communities.communities {
            for &i in c {
                if i < n {
                    v[i] = true;
                }
            }
        }
        v
    };
    let orphans: Vec<usize> = eligible.iter().copied().filter(|&i| !covered[i]).collect();
    if !orphans.is_empty() {
        pools.push(orphans);
    }
    let mut c = 0;
    while chosen.len() < exploit {
        let mut progressed = false;
        for _ in 0..pools.len() {
            let pool = &pools[c % pools.len()];
            c += 1;
            let best = pool
                .iter()
                .copied()
                .filter(|&i| !taken[i])
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if utilities[b].util >= utilities[i].util => Some(b),
                    _ => Some(i),
                });
            if let Some(i) = best {
                taken[i] = true;
                chosen.push(i);
                progressed = true;
                break;
            }
        }
        if !progressed {
            break;
        }
    }
    let exploited = chosen.len();
    let mut rest: Vec<usize> = eligible.iter().copied().filter(|&i| !taken[i]).collect();
    rest.shuffle(rng);
    for i in rest.into_iter().take(size - chosen.len()) {
        taken[i] = true;
        chosen.push(i);
    }

    let mut constraint_failure = None;
    let total = |s: &[usize]| s.iter().map(|&i| shard_sizes[i]).sum::<usize>();
    if total(&chosen) < constraints.min_total_data {
        let mut pool: Vec<usize> = eligible.iter().copied().filter(|&i| !taken[i]).collect();
        pool.sort_by(|&a, &b| shard_sizes[b].cmp(&shard_sizes[a]).then(a.cmp(&b)));
        for cand in pool {
            if total(&chosen) >= constraints.min_total_data {
                break;
            }
            let (pos, &smallest) = chosen
                .iter()
                .enumerate()
                .min_by(|(_, &a), (_, &b)| shard_sizes[a].cmp(&shard_sizes[b]).then(b.cmp(&a)))
                .expect("non-empty cohort");
            if shard_sizes[cand] <= shard_sizes[smallest] {
                break;
            }
            chosen[pos] = cand;
        }
        let got = total(&chosen);
        if got < constraints.min_total_data {
            log::warn!("selected data {got} below minimum {}", constraints.min_total_data);
            constraint_failure = Some(format!("selected data {got} below minimum {}", constraints.min_total_data));
        }
    }
    chosen.sort_unstable();
    Ok(Selection {
        clients: chosen,
        exploited,
        constraint_failure,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    fn records(utils: &[f64]) -> Vec<UtilityRecord> {
        utils
            .iter()
            .enumerate()
            .map(|(i, &u)| UtilityRecord::new(i, u, 0.0, 0.0, 0))
            .collect()
    }

    fn constraints(epsilon: f64, size: usize) -> SelectionConstraints {
        SelectionConstraints {
            epsilon,
            cohort_size: size,
            ..Default::default()
        }
    }

    #[test]
    fn greedy_single_community() {
        let comm = CommunitySet::from_groups(vec![(0..5).collect()]);
        let u = records(&[0.3, 0.9, 0.1, 0.9, 0.5]);
        let mut rng = stream_rng(0, Stream::Selection, &[]);
        let s = select(&comm, &u, &[1; 5], &constraints(0.0, 2), &[0, 1, 2, 3, 4], &mut rng).unwrap();
        assert_eq!(s.clients, vec![1, 3]);
        assert_eq!(s.exploited, 2);
    }

    #[test]
    fn one_per_community_argmax() {
        let comm = CommunitySet::from_groups(vec![vec![0, 1], vec![2, 3, 4], vec![5], vec![6, 7]]);
        let u = records(&[1.0, 2.0, 5.0, 4.0, 5.0, 0.1, 3.0, 3.5]);
        let mut rng = stream_rng(0, Stream::Selection, &[]);
        let s = select(&comm, &u, &[1; 8], &constraints(0.0, 4), &(0..8).collect::<Vec<_>>(), &mut rng).unwrap();
        assert_eq!(s.clients, vec![1, 2, 5, 7]);
    }

    #[test]
    fn ineligible_never_selected() {
        let comm = CommunitySet::from_groups(vec![(0..6).collect()]);
        let u = records(&[9.0, 1.0, 8.0, 1.0, 7.0, 1.0]);
        let mut rng = stream_rng(0, Stream::Selection, &[]);
        let s = select(&comm, &u, &[1; 6], &constraints(0.5, 2), &[1, 3, 5], &mut rng).unwrap();
        assert!(s.clients.iter().all(|i| [1, 3, 5].contains(i)));
        assert!(select(&comm, &u, &[1; 6], &constraints(0.0, 4), &[1, 3, 5], &mut rng).is_err());
    }

    #[test]
    fn data_floor_swaps_in_large_shards() {
        let comm = CommunitySet::from_groups(vec![(0..4).collect()]);
        let u = records(&[4.0, 3.0, 2.0, 1.0]);
        let sizes = [1, 2, 10, 20];
        let mut c = constraints(0.0, 2);
        c.min_total_data = 25;
        let mut rng = stream_rng(0, Stream::Selection, &[]);
        let s = select(&comm, &u, &sizes, &c, &[0, 1, 2, 3], &mut rng).unwrap();
        assert_eq!(s.clients, vec![2, 3]);
        assert!(s.constraint_failure.is_none());
        c.min_total_data = 100;
        let s = select(&comm, &u, &sizes, &c, &[0, 1, 2, 3], &mut rng).unwrap();
        assert!(s.constraint_failure.is_some());
    }

    #[test]
    fn diversity_values() {
        let omega = SimilarityMatrix::from_values(3, vec![1.0, 1.0, 0.0, 1.0, 1.0, 0.5, 0.0, 0.5, 1.0]).unwrap();
        assert_eq!(diversity(&[0, 1], &omega).unwrap(), 1.0);
        assert_eq!(diversity(&[0, 2], &omega).unwrap(), 1.0 / DIVERSITY_FLOOR);
        assert_eq!(diversity(&[0, 1, 2], &omega).unwrap(), 1.0 / 1.5);
        assert!(diversity(&[0], &omega).is_err());
    }

    #[test]
    fn eligibility_threshold() {
        let caps = [10, 50, 30, 80];
        assert_eq!(eligible(&caps, 30, 1, 1).unwrap(), vec![1, 2, 3]);
        assert_eq!(eligible(&caps, 1, 4, 1).unwrap().len(), 4);
        assert!(matches!(
            eligible(&caps, 1, 5, 2),
            Err(Error::Infeasible { stage: 2, eligible: 4, .. })
        ));
    }

    #[test]
    fn objective_without_latency_term() {
        let omega = SimilarityMatrix::from_values(2, vec![1.0, 0.5, 0.5, 1.0]).unwrap();
        let mut u = records(&[3.0, 4.0]);
        u[1].time = 100.0;
        assert_eq!(objective(&[0, 1], &omega, &u, 0.0).unwrap(), 2.0 + 7.0);
        assert_eq!(objective(&[0, 1], &omega, &u, 0.01).unwrap(), 2.0 + 7.0 - 1.0);
    }

    #[test]
    fn min_eligible_default() {
        let c = SelectionConstraints::default();
        assert_eq!(c.min_eligible_for(40), 2);
        assert_eq!(c.min_eligible_for(10), 1);
        let mut bad = c;
        bad.epsilon = 1.5;
        let errs = bad.validate().unwrap_err();
        assert_eq!(errs[0].0, "selector.epsilon");
    }
}
