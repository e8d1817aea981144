mod common;

use proptest::prelude::*;
use smartfreeze::cohort::{build_graph, louvain, modularity, probe_gradients, rlcd, sharpen, similarity, SimilarityMatrix, WeightedGraph};
use smartfreeze::nn::SgdConfig;

#[test]
fn latent_group_structure_is_recovered() {
    let mut hits = 0;
    for seed in 0..20 {
        let (initial, refined) = common::grouped_communities(seed);
        assert!(common::is_refinement(&refined.communities, &initial.communities), "seed {seed}");
        let ok = common::grouped_recovered(&refined.communities);
        println!(
            "seed {seed}: louvain {:?} rlcd {:?} {}",
            initial.communities, refined.communities, ok
        );
        hits += ok as usize;
    }
    assert!(hits >= 18, "recovered {hits}/20");
}

#[test]
fn identical_shards_have_unit_similarity() {
    let mut fleet = common::grouped_fleet(3);
    fleet.shards[1] = fleet.shards[0].clone();
    let grads = probe_gradients(&fleet.model, &fleet.data, &fleet.shards, 16, SgdConfig::default(), 3).unwrap();
    let (a, b) = (grads[0].as_ref().unwrap(), grads[1].as_ref().unwrap());
    assert_eq!(a, b);
    assert_eq!(a.len(), 16 * 7 + 7);
}

#[test]
fn empty_shard_is_excluded() {
    let mut fleet = common::grouped_fleet(3);
    fleet.shards[4].clear();
    let grads = probe_gradients(&fleet.model, &fleet.data, &fleet.shards, 16, SgdConfig::default(), 3).unwrap();
    assert!(grads[4].is_none());
    assert!(grads.iter().enumerate().all(|(i, g)| i == 4 || g.is_some()));
}

#[test]
fn single_batch_probe_equals_backward() {
    let fleet = common::grouped_fleet(5);
    let shard = &fleet.shards[2][..10];
    let grads = probe_gradients(&fleet.model, &fleet.data, &[shard.to_vec()], 64, SgdConfig::default(), 5).unwrap();
    let b = fleet.data.batch(shard).unwrap();
    let acts = fleet.model.forward(&b.inputs).unwrap();
    let direct = fleet
        .model
        .backward(&b.inputs, &acts, &b.labels, &fleet.model.trainable_mask())
        .unwrap();
    let mut expected = direct.get(&smartfreeze::nn::ParamId::weight(2)).unwrap().data().to_vec();
    expected.extend_from_slice(direct.get(&smartfreeze::nn::ParamId::bias(2)).unwrap().data());
    let got = grads[0].as_ref().unwrap();
    let err = got.iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-12, "{err}");
}

/// Brute-force best modularity over all set partitions (restricted growth strings).
fn exhaustive_best(graph: &WeightedGraph) -> f64 {
    let n = graph.len();
    let mut best = f64::NEG_INFINITY;
    let mut a = vec![0usize; n];
    loop {
        best = best.max(modularity(graph, &a));
        // Next restricted growth string.
        let mut i = n - 1;
        loop {
            if i == 0 {
                return best;
            }
            let max_prev = *a[..i].iter().max().unwrap();
            if a[i] <= max_prev {
                a[i] += 1;
                for x in &mut a[i + 1..] {
                    *x = 0;
                }
                break;
            }
            i -= 1;
        }
    }
}

fn planted(n: usize, groups: usize, p_in: f64, p_out: f64, draws: &[f64]) -> (WeightedGraph, Vec<usize>) {
    let membership: Vec<usize> = (0..n).map(|i| i * groups / n).collect();
    let mut edges = Vec::new();
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            let p = if membership[i] == membership[j] { p_in } else { p_out };
            if draws[k] < p {
                edges.push((i, j, 0.5 + draws[k]));
            }
            k += 1;
        }
    }
    (WeightedGraph::from_edges(n, &edges).unwrap(), membership)
}

#[test]
fn louvain_close_to_exhaustive_on_small_planted_graphs() {
    use rand::Rng;
    let mut rng = smartfreeze::rng::stream_rng(11, smartfreeze::rng::Stream::Louvain, &[]);
    for trial in 0..5 {
        let draws: Vec<f64> = (0..45).map(|_| rng.random()).collect();
        let (g, _) = planted(10, 3, 0.8, 0.15, &draws);
        let found = modularity(&g, &louvain(&g, trial).membership(10));
        let best = exhaustive_best(&g);
        assert!(found >= best - 0.05, "trial {trial}: {found} vs optimum {best}");
    }
}

#[test]
fn louvain_beats_planted_partition_on_12_nodes() {
    use rand::Rng;
    let mut rng = smartfreeze::rng::stream_rng(12, smartfreeze::rng::Stream::Louvain, &[]);
    for trial in 0..20 {
        let draws: Vec<f64> = (0..66).map(|_| rng.random()).collect();
        let (g, planted_membership) = planted(12, 3, 0.8, 0.1, &draws);
        let found = modularity(&g, &louvain(&g, trial).membership(12));
        let reference = modularity(&g, &planted_membership);
        assert!(found >= reference - 0.05, "trial {trial}: {found} vs planted {reference}");
    }
}

fn graph_strategy() -> impl Strategy<Value = WeightedGraph> {
    (4usize..14).prop_flat_map(|n| {
        prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..1.0], n * (n - 1) / 2).prop_map(move |w| {
            let mut edges = Vec::new();
            let mut k = 0;
            for i in 0..n {
                for j in i + 1..n {
                    edges.push((i, j, w[k]));
                    k += 1;
                }
            }
            WeightedGraph::from_edges(n, &edges).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(common::proptest_config(64))]

    #[test]
    fn rlcd_refines_louvain_and_partitions(g in graph_strategy(), seed in 0u64..1000, delta in 0.2f64..2.0) {
        let initial = louvain(&g, seed);
        let refined = rlcd(&g, delta, seed);
        prop_assert!(common::is_refinement(&refined.communities, &initial.communities));
        let mut all: Vec<usize> = refined.communities.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..g.len()).collect::<Vec<_>>());
        prop_assert!(refined.splits.len() <= g.len());
    }

    #[test]
    fn louvain_not_worse_than_singletons(g in graph_strategy(), seed in 0u64..1000) {
        let n = g.len();
        let singletons: Vec<usize> = (0..n).collect();
        let found = modularity(&g, &louvain(&g, seed).membership(n));
        prop_assert!(found >= modularity(&g, &singletons) - 1e-12);
    }

    #[test]
    fn sharpen_keeps_edges_above_median(g in graph_strategy()) {
        let mut w = g.edge_weights();
        prop_assume!(!w.is_empty());
        w.sort_by(f64::total_cmp);
        let m = w.len();
        let median = if m % 2 == 1 { w[m / 2] } else { 0.5 * (w[m / 2 - 1] + w[m / 2]) };
        let s = sharpen(&g);
        prop_assert_eq!(s.edges().len(), w.iter().filter(|&&x| x > median).count());
        for (i, j, x) in s.edges() {
            prop_assert_eq!(x, g.weight(i, j));
        }
    }

    #[test]
    fn degree_matches_clamped_row_sum(raw in prop::collection::vec(-1.0f64..1.0, 28)) {
        let n = 8;
        let mut values = vec![0.0; n * n];
        let mut k = 0;
        for i in 0..n {
            values[i * n + i] = 1.0;
            for j in i + 1..n {
                values[i * n + j] = raw[k];
                values[j * n + i] = raw[k];
                k += 1;
            }
        }
        let omega = SimilarityMatrix::from_values(n, values.clone()).unwrap();
        let g = build_graph(&omega);
        for i in 0..n {
            let row: f64 = (0..n).filter(|&j| j != i).map(|j| values[i * n + j].max(0.0)).sum();
            prop_assert!((g.degree(i) - row).abs() < 1e-12);
        }
    }

    #[test]
    fn similarity_matches_formula(a in prop::collection::vec(-5.0f64..5.0, 6), b in prop::collection::vec(-5.0f64..5.0, 6)) {
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assume!(na > 1e-6 && nb > 1e-6);
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let s = similarity(&a, &b).unwrap();
        prop_assert!((s - dot / (na * nb)).abs() < 1e-12);
        prop_assert!(s.abs() <= 1.0 + 1e-12);
    }
}
