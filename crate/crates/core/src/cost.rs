//! Analytic memory, FLOPs and wall-clock models for stage-based training.
//!
//! Memory for stage `t` counts, in bytes at 8 bytes per real:
//! stored activations of the trained block and output module (twice, for
//! their gradients), the parameters of every block up to `t` plus the output
//! module, one momentum buffer per trainable parameter, and the largest
//! single-group activation seen during the forward pass. Activations scale
//! with the batch size.
//!
//! FLOPs are per training sample: forward work of every layer plus backward
//! work (twice the forward FLOPs of a parameterized layer) for the trained
//! block and output module only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerKind, Network};
use crate::progressive::StageModel;

pub const BYTES_PER_REAL: u64 = 8;

/// Forward FLOPs of one layer for a single sample.
pub fn layer_forward_flops(kind: &LayerKind, out_shape: &[usize]) -> u64 {
    match *kind {
        LayerKind::Dense { input, output } => 2 * (input * output) as u64,
        LayerKind::Conv2d { in_ch, out_ch, kernel, .. } => 2 * (kernel * kernel * in_ch * out_ch * out_shape[1] * out_shape[2]) as u64,
        _ => 0,
    }
}

/// Backward FLOPs: twice the forward FLOPs for parameterized layers.
pub fn layer_backward_flops(kind: &LayerKind, out_shape: &[usize]) -> u64 {
    if kind.has_params() {
        2 * layer_forward_flops(kind, out_shape)
    } else {
        0
    }
}

/// Aggregate costs of a contiguous group of layers (a block or output module).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GroupCost {
    pub params: u64,
    /// Output elements of every layer in the group, per sample.
    pub activations: u64,
    pub forward_flops: u64,
    pub backward_flops: u64,
}

impl GroupCost {
    pub fn of_layers(net: &Network, layers: std::ops::Range<usize>) -> Self {
        let mut g = GroupCost::default();
        for i in layers {
            let kind = &net.layers()[i].kind;
            let out = &net.output_shapes()[i];
            g.params += kind.param_count() as u64;
            g.activations += out.iter().product::<usize>() as u64;
            g.forward_flops += layer_forward_flops(kind, out);
            g.backward_flops += layer_backward_flops(kind, out);
        }
        g
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    pub activation_bytes: u64,
    pub parameter_bytes: u64,
    pub optimizer_bytes: u64,
    pub forward_peak_bytes: u64,
    pub total: u64,
}

impl MemoryBreakdown {
    fn new(activation_bytes: u64, parameter_bytes: u64, optimizer_bytes: u64, forward_peak_bytes: u64) -> Self {
        Self {
            activation_bytes,
            parameter_bytes,
            optimizer_bytes,
            forward_peak_bytes,
            total: activation_bytes + parameter_bytes + optimizer_bytes + forward_peak_bytes,
        }
    }
}

/// Stage memory from group costs: `frozen` blocks are forward-only,
/// `trained` groups (block and output module) store activations and carry
/// optimizer state.
pub fn memory_from_groups(frozen: &[GroupCost], trained: &[GroupCost], batch_size: usize) -> MemoryBreakdown {
    let b = batch_size as u64;
    let stored: u64 = trained.iter().map(|g| g.activations).sum();
    let params: u64 = frozen.iter().chain(trained).map(|g| g.params).sum();
    let opt: u64 = trained.iter().map(|g| g.params).sum();
    let peak = frozen.iter().chain(trained).map(|g| g.activations).max().unwrap_or(0);
    MemoryBreakdown::new(
        stored * 2 * b * BYTES_PER_REAL,
        params * BYTES_PER_REAL,
        opt * BYTES_PER_REAL,
        peak * b * BYTES_PER_REAL,
    )
}

fn stage_groups(stage: &StageModel) -> (Vec<GroupCost>, Vec<GroupCost>) {
    let net = &stage.network;
    let frozen = (1..stage.stage).map(|j| GroupCost::of_layers(net, stage.block_range(j))).collect();
    let trained = vec![
        GroupCost::of_layers(net, stage.current_block()),
        GroupCost::of_layers(net, stage.op_range.clone()),
    ];
    (frozen, trained)
}

pub fn stage_memory(stage: &StageModel, batch_size: usize) -> MemoryBreakdown {
    let (frozen, trained) = stage_groups(stage);
    memory_from_groups(&frozen, &trained, batch_size)
}

/// Memory of conventional training of `net`: every activation stored
/// twice, all parameters, and optimizer state for all parameters.
pub fn full_training_memory(net: &Network, batch_size: usize) -> MemoryBreakdown {
    let g = GroupCost::of_layers(net, 0..net.layers().len());
    MemoryBreakdown::new(
        g.activations * 2 * batch_size as u64 * BYTES_PER_REAL,
        g.params * BYTES_PER_REAL,
        g.params * BYTES_PER_REAL,
        0,
    )
}

/// Per-sample training FLOPs of a stage.
pub fn stage_flops(stage: &StageModel) -> u64 {
    let (frozen, trained) = stage_groups(stage);
    frozen.iter().map(|g| g.forward_flops).sum::<u64>() + trained.iter().map(|g| g.forward_flops + g.backward_flops).sum::<u64>()
}

/// Per-sample FLOPs of conventional training of `net` (all forward and backward work).
pub fn full_training_flops(net: &Network) -> u64 {
    let g = GroupCost::of_layers(net, 0..net.layers().len());
    g.forward_flops + g.backward_flops
}

/// Local training completion time in seconds.
pub fn client_time(flops: u64, dataset_size: usize, rho: f64, compute_rate: f64, local_epochs: usize) -> Result<f64> {
    if compute_rate <= 0.0 || !compute_rate.is_finite() {
        return Err(Error::Config(format!("compute rate must be positive, got {compute_rate}")));
    }
    Ok(local_epochs as f64 * rho * flops as f64 * dataset_size as f64 / compute_rate)
}

/// Synchronous round time: the slowest selected client.
pub fn round_time(client_times: &[f64]) -> Result<f64> {
    client_times
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or_else(|| Error::Contract("round time of an empty cohort".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec;
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn single_dense_layer_hand_count() {
        let mut rng = stream_rng(0, Stream::BlockInit, &[]);
        let net = Network::init(
            vec![10],
            vec![LayerSpec::trainable(LayerKind::Dense { input: 10, output: 2 })],
            &mut rng,
        )
        .unwrap();
        let g = GroupCost::of_layers(&net, 0..1);
        let m = memory_from_groups(&[], &[g], 1);
        // 22 params, 22 momentum reals, 2 outputs stored twice, peak 2.
        assert_eq!(m.parameter_bytes, 22 * 8);
        assert_eq!(m.optimizer_bytes, 22 * 8);
        assert_eq!(m.activation_bytes, 4 * 8);
        assert_eq!(m.forward_peak_bytes, 2 * 8);
        assert_eq!(m.total, 50 * 8);
    }

    #[test]
    fn batch_doubling_scales_activations_only() {
        let g = GroupCost {
            params: 100,
            activations: 40,
            forward_flops: 0,
            backward_flops: 0,
        };
        let f = GroupCost {
            params: 7,
            activations: 90,
            ..Default::default()
        };
        let a = memory_from_groups(&[f], &[g], 16);
        let b = memory_from_groups(&[f], &[g], 32);
        assert_eq!(b.activation_bytes, 2 * a.activation_bytes);
        assert_eq!(b.forward_peak_bytes, 2 * a.forward_peak_bytes);
        assert_eq!(a.parameter_bytes, b.parameter_bytes);
        assert_eq!(a.optimizer_bytes, b.optimizer_bytes);
    }

    #[test]
    fn client_time_substitution() {
        assert_eq!(client_time(100, 10, 1.0, 1000.0, 1).unwrap(), 1.0);
        let slow = client_time(5000, 37, 1.0, 250.0, 3).unwrap();
        let fast = client_time(5000, 37, 1.0, 500.0, 3).unwrap();
        assert!((slow - 2.0 * fast).abs() < 1e-12);
        assert!(matches!(client_time(1, 1, 1.0, 0.0, 1), Err(Error::Config(_))));
    }

    #[test]
    fn round_time_is_max() {
        assert_eq!(round_time(&[1.0, 2.5, 0.3]).unwrap(), 2.5);
        assert_eq!(round_time(&[4.2]).unwrap(), 4.2);
        assert!(matches!(round_time(&[]), Err(Error::Contract(_))));
    }
}
