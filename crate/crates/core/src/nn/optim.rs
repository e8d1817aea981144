use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::layer::ParamId;
use super::network::{Gradients, Network};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// Momentum buffers, one per trainable parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: SgdConfig,
    buffers: BTreeMap<ParamId, Tensor>,
}

impl OptimizerState {
    pub fn new(net: &Network, config: SgdConfig) -> Self {
        let buffers = net
            .trainable_ids()
            .into_iter()
            .map(|id| (id, Tensor::zeros(net.param(id).expect("trainable id").shape())))
            .collect();
        Self { config, buffers }
    }

    pub fn buffer(&self, id: &ParamId) -> Option<&Tensor> {
        self.buffers.get(id)
    }

    pub fn buffer_ids(&self) -> impl Iterator<Item = &ParamId> {
        self.buffers.keys()
    }
}

/// `v <- momentum*v + g + weight_decay*w; w <- w - lr*v` for every gradient.
pub fn sgd_step(net: &mut Network, grads: &Gradients, opt: &mut OptimizerState) -> Result<()> {
    let SgdConfig {
        lr,
        momentum,
        weight_decay,
    } = opt.config;
    for (id, g) in &grads.tensors {
        let v = opt
            .buffers
            .get_mut(id)
            .ok_or_else(|| Error::Contract(format!("gradient for non-trainable parameter {id:?}")))?;
        let w = net
            .param_mut(*id)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {id:?}")))?;
        if w.shape() != g.shape() {
            return Err(Error::shape(
                id.layer,
                format!("gradient {:?} vs parameter {:?}", g.shape(), w.shape()),
            ));
        }
        for ((wv, vv), &gv) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = momentum * *vv + gv + weight_decay * *wv;
            *wv -= lr * *vv;
        }
    }
    Ok(())
}
