mod common;

use proptest::prelude::*;
use smartfreeze::nn::{loss_ce, per_sample_losses, softmax_cross_entropy, LayerKind, LayerSpec, Network, Tensor};
use smartfreeze::rng::{stream_rng, Stream};

#[test]
fn backward_matches_finite_differences() {
    for seed in 0..3 {
        for (k, (net, x, labels)) in common::tiny_nets(seed).into_iter().enumerate() {
            let err = common::fd_max_rel_err(&net, &x, &labels);
            assert!(err < 1e-4, "seed {seed} net {k}: relative error {err}");
        }
    }
}

#[test]
fn partial_mask_gradients_match_full_backward() {
    for (net, x, labels) in common::tiny_nets(9) {
        let acts = net.forward(&x).unwrap();
        let full = net.backward(&x, &acts, &labels, &net.trainable_mask()).unwrap();
        let last = net.layers().iter().rposition(|l| l.kind.has_params()).unwrap();
        let mask: Vec<bool> = (0..net.layers().len()).map(|i| i == last).collect();
        let partial = net.backward(&x, &acts, &labels, &mask).unwrap();
        for id in partial.keys() {
            assert_eq!(partial.get(id), full.get(id));
        }
    }
}

proptest! {
    #![proptest_config(common::proptest_config(64))]

    #[test]
    fn softmax_gradient_rows_sum_to_zero(logits in prop::collection::vec(-20.0f64..20.0, 12), labels in prop::collection::vec(0usize..4, 3)) {
        let t = Tensor::new(vec![3, 4], logits).unwrap();
        let (loss, grad) = softmax_cross_entropy(&t, &labels).unwrap();
        prop_assert!(loss >= 0.0);
        for row in grad.data().chunks(4) {
            prop_assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn loss_is_shift_invariant(logits in prop::collection::vec(-10.0f64..10.0, 8), shift in -50.0f64..50.0, label in 0usize..4) {
        let a = Tensor::new(vec![2, 4], logits.clone()).unwrap();
        let b = Tensor::new(vec![2, 4], logits.iter().map(|v| v + shift).collect()).unwrap();
        let labels = [label, 3 - label];
        prop_assert!((loss_ce(&a, &labels).unwrap() - loss_ce(&b, &labels).unwrap()).abs() < 1e-9);
        let per = per_sample_losses(&a, &labels).unwrap();
        prop_assert!((per.iter().sum::<f64>() / 2.0 - loss_ce(&a, &labels).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn forward_is_row_independent(seed in 0u64..500) {
        let layers = vec![
            LayerSpec::trainable(LayerKind::Conv2d { in_ch: 1, out_ch: 2, kernel: 3, stride: 1, pad: 1 }),
            LayerSpec::frozen(LayerKind::Relu),
            LayerSpec::frozen(LayerKind::Flatten),
            LayerSpec::trainable(LayerKind::Dense { input: 32, output: 3 }),
        ];
        let net = Network::init(vec![1, 4, 4], layers, &mut stream_rng(seed, Stream::BlockInit, &[])).unwrap();
        let x = Tensor::new(vec![2, 1, 4, 4], (0..32).map(|i| ((i as u64 * 7 + seed) % 11) as f64 / 11.0).collect()).unwrap();
        let both = net.predict(&x).unwrap();
        let first = net.predict(&x.slice_rows(0, 1)).unwrap();
        prop_assert_eq!(&both.data()[..3], first.data());
    }
}
