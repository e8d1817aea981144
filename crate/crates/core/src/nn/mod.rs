//! Minimal differentiable network substrate: a fixed layer vocabulary with
//! forward/backward passes, softmax cross-entropy and momentum SGD.

mod kernels;
mod layer;
mod loss;
mod network;
mod optim;
mod tensor;

pub use layer::{infer_shapes, LayerKind, LayerParams, LayerSpec, ParamId, ParamSlot};
pub use loss::{loss_ce, per_sample_losses, softmax_cross_entropy};
pub use network::{he_uniform, Gradients, Network};
pub use optim::{sgd_step, OptimizerState, SgdConfig};
pub use tensor::Tensor;

/// A labelled minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> crate::Result<Self> {
        if inputs.shape().is_empty() || inputs.rows() != labels.len() {
            return Err(crate::Error::Input(format!(
                "batch with {:?} inputs and {} labels",
                inputs.shape(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}
