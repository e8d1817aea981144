use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// The fixed layer vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerKind {
    Dense {
        input: usize,
        output: usize,
    },
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    Maxpool2x2,
    Flatten,
}

impl LayerKind {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv2d { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Dense { .. } => "dense",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::Maxpool2x2 => "maxpool2x2",
            LayerKind::Flatten => "flatten",
        }
    }

    /// Weight and bias shapes, `None` for parameter-free layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerKind::Dense { input, output } => Some((vec![output, input], vec![output])),
            LayerKind::Conv2d { in_ch, out_ch, kernel, .. } => Some((vec![out_ch, in_ch, kernel, kernel], vec![out_ch])),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .map(|(w, b)| w.iter().product::<usize>() + b.iter().product::<usize>())
            .unwrap_or(0)
    }

    /// Fan-in used for He initialization.
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Dense { input, .. } => input,
            LayerKind::Conv2d { in_ch, kernel, .. } => in_ch * kernel * kernel,
            _ => 0,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerKind::Dense { input: fan_in, output } => {
                if input != [fan_in] {
                    return Err(Error::shape(index, format!("dense expects [{fan_in}], got {input:?}")));
                }
                if output == 0 {
                    return Err(Error::shape(index, "dense output width is zero"));
                }
                Ok(vec![output])
            }
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
            } => {
                if input.len() != 3 || input[0] != in_ch {
                    return Err(Error::shape(index, format!("conv2d expects [{in_ch}, H, W], got {input:?}")));
                }
                if kernel == 0 || stride == 0 || out_ch == 0 {
                    return Err(Error::shape(index, "conv2d kernel, stride and out_ch must be positive"));
                }
                let (h, w) = (input[1] + 2 * pad, input[2] + 2 * pad);
                if h < kernel || w < kernel {
                    return Err(Error::shape(
                        index,
                        format!("conv2d kernel {kernel} larger than padded input {h}x{w}"),
                    ));
                }
                Ok(vec![out_ch, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::Maxpool2x2 => {
                if input.len() != 3 || input[1] < 2 || input[2] < 2 {
                    return Err(Error::shape(index, format!("maxpool2x2 expects [C, H>=2, W>=2], got {input:?}")));
                }
                Ok(vec![input[0], input[1] / 2, input[2] / 2])
            }
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

/// A layer plus its trainable flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub trainable: bool,
}

impl LayerSpec {
    pub fn frozen(kind: LayerKind) -> Self {
        Self { kind, trainable: false }
    }

    pub fn trainable(kind: LayerKind) -> Self {
        // Parameter-free layers are never flagged trainable.
        Self {
            kind,
            trainable: kind.has_params(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LayerParams {
    pub fn zeros(kind: &LayerKind) -> Option<Self> {
        kind.param_shapes().map(|(w, b)| LayerParams {
            weight: Tensor::zeros(&w),
            bias: Tensor::zeros(&b),
        })
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamSlot {
    Weight,
    Bias,
}

/// Identifies one parameter tensor of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId {
    pub layer: usize,
    pub slot: ParamSlot,
}

impl ParamId {
    pub fn weight(layer: usize) -> Self {
        Self {
            layer,
            slot: ParamSlot::Weight,
        }
    }

    pub fn bias(layer: usize) -> Self {
        Self {
            layer,
            slot: ParamSlot::Bias,
        }
    }
}

/// Per-sample shapes after each layer; element `k` is the output of layer `k`.
pub fn infer_shapes(input_shape: &[usize], kinds: &[LayerKind]) -> Result<Vec<Vec<usize>>> {
    let mut shapes = Vec::with_capacity(kinds.len());
    let mut cur = input_shape.to_vec();
    for (i, kind) in kinds.iter().enumerate() {
        cur = kind.output_shape(i, &cur)?;
        shapes.push(cur.clone());
    }
    Ok(shapes)
}
