use std::collections::BTreeMap;

use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::layer::{infer_shapes, LayerKind, LayerParams, LayerSpec, ParamId, ParamSlot};
use super::loss::softmax_cross_entropy;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A sequential network: layer specs, per-layer parameters, and the
/// per-sample input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    params: Vec<Option<LayerParams>>,
    shapes: Vec<Vec<usize>>,
}

/// Gradients keyed by parameter, plus how many activation-gradient tensors
/// the backward pass had to materialize.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    pub tensors: BTreeMap<ParamId, Tensor>,
    pub activation_grads: usize,
}

impl Gradients {
    pub fn get(&self, id: &ParamId) -> Option<&Tensor> {
        self.tensors.get(id)
    }

    pub fn keys(&self) -> impl Iterator<Item = &ParamId> {
        self.tensors.keys()
    }
}

/// He-uniform initialization: U(-sqrt(6/fan_in), sqrt(6/fan_in)), zero bias.
pub fn he_uniform<R: Rng + ?Sized>(kind: &LayerKind, rng: &mut R) -> Option<LayerParams> {
    let mut p = LayerParams::zeros(kind)?;
    let bound = (6.0 / kind.fan_in() as f64).sqrt();
    for v in p.weight.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
    Some(p)
}

impl Network {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>, params: Vec<Option<LayerParams>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        if params.len() != layers.len() {
            return Err(Error::Config(format!(
                "{} layers but {} parameter slots",
                layers.len(),
                params.len()
            )));
        }
        let kinds: Vec<LayerKind> = layers.iter().map(|l| l.kind).collect();
        let shapes = infer_shapes(&input_shape, &kinds)?;
        for (i, (spec, p)) in layers.iter().zip(&params).enumerate() {
            match (spec.kind.param_shapes(), p) {
                (Some((w, b)), Some(p)) => {
                    if p.weight.shape() != w.as_slice() || p.bias.shape() != b.as_slice() {
                        return Err(Error::shape(
                            i,
                            format!("parameters {:?}/{:?} do not match {w:?}/{b:?}", p.weight.shape(), p.bias.shape()),
                        ));
                    }
                }
                (None, None) => {}
                (Some(_), None) => return Err(Error::Config(format!("layer {i} ({}) is missing parameters", spec.kind.name()))),
                (None, Some(_)) => return Err(Error::Config(format!("layer {i} ({}) takes no parameters", spec.kind.name()))),
            }
            if spec.trainable && !spec.kind.has_params() {
                return Err(Error::Config(format!(
                    "layer {i} ({}) has no parameters and cannot be trainable",
                    spec.kind.name()
                )));
            }
        }
        Ok(Self {
            input_shape,
            layers,
            params,
            shapes,
        })
    }

    /// Builds a network with He-uniform parameters drawn from `rng`.
    pub fn init<R: Rng + ?Sized>(input_shape: Vec<usize>, layers: Vec<LayerSpec>, rng: &mut R) -> Result<Self> {
        let params = layers.iter().map(|l| he_uniform(&l.kind, rng)).collect();
        Self::new(input_shape, layers, params)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Option<LayerParams>] {
        &self.params
    }

    pub fn layer_params(&self, layer: usize) -> Option<&LayerParams> {
        self.params.get(layer).and_then(|p| p.as_ref())
    }

    pub fn layer_params_mut(&mut self, layer: usize) -> Option<&mut LayerParams> {
        self.params.get_mut(layer).and_then(|p| p.as_mut())
    }

    /// Per-sample output shape of every layer.
    pub fn output_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("non-empty network")
    }

    pub fn trainable_mask(&self) -> Vec<bool> {
        self.layers.iter().map(|l| l.trainable).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().flatten().map(LayerParams::len).sum()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.layers
            .iter()
            .zip(&self.params)
            .filter(|(l, _)| l.trainable)
            .filter_map(|(_, p)| p.as_ref())
            .map(LayerParams::len)
            .sum()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.layer_params(id.layer).map(|p| match id.slot {
            ParamSlot::Weight => &p.weight,
            ParamSlot::Bias => &p.bias,
        })
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.layer_params_mut(id.layer).map(|p| match id.slot {
            ParamSlot::Weight => &mut p.weight,
            ParamSlot::Bias => &mut p.bias,
        })
    }

    /// Ids of all trainable parameter tensors in layer order.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.trainable && l.kind.has_params())
            .flat_map(|(i, _)| [ParamId::weight(i), ParamId::bias(i)])
            .collect()
    }

    /// Flattened parameters of `layers`, weights then bias per layer.
    pub fn flatten_params(&self, layers: std::ops::Range<usize>) -> Vec<f64> {
        let mut out = Vec::new();
        for p in self.params[layers].iter().flatten() {
            out.extend_from_slice(p.weight.data());
            out.extend_from_slice(p.bias.data());
        }
        out
    }

    pub fn set_trainable(&mut self, layer: usize, trainable: bool) {
        let spec = &mut self.layers[layer];
        spec.trainable = trainable && spec.kind.has_params();
    }

    fn check_batch(&self, inputs: &Tensor) -> Result<usize> {
        if inputs.shape().len() != self.input_shape.len() + 1 || inputs.shape()[1..] != self.input_shape[..] {
            return Err(Error::shape(
                0,
                format!(
                    "batch shape {:?} does not match input shape [N, {:?}]",
                    inputs.shape(),
                    self.input_shape
                ),
            ));
        }
        Ok(inputs.rows())
    }

    /// One activation per layer; the last is the logits.
    pub fn forward(&self, inputs: &Tensor) -> Result<Vec<Tensor>> {
        let n = self.check_batch(inputs)?;
        let mut acts: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        for (i, spec) in self.layers.iter().enumerate() {
            let x = if i == 0 { inputs } else { &acts[i - 1] };
            let in_shape: &[usize] = if i == 0 { &self.input_shape } else { &self.shapes[i - 1] };
            let out_shape = &self.shapes[i];
            let mut full = Vec::with_capacity(out_shape.len() + 1);
            full.push(n);
            full.extend_from_slice(out_shape);
            let out = match spec.kind {
                LayerKind::Dense { input, output } => {
                    let p = self.params[i].as_ref().expect("validated");
                    let mut out = Tensor::zeros(&full);
                    kernels::dense_forward(n, input, output, x.data(), p.weight.data(), p.bias.data(), out.data_mut());
                    out
                }
                LayerKind::Conv2d { .. } => {
                    let p = self.params[i].as_ref().expect("validated");
                    let g = conv_geom(&spec.kind, n, in_shape, out_shape);
                    let mut out = Tensor::zeros(&full);
                    kernels::conv2d_forward(&g, x.data(), p.weight.data(), p.bias.data(), out.data_mut());
                    out
                }
                LayerKind::Relu => {
                    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
                    Tensor::new(full, data)?
                }
                LayerKind::Maxpool2x2 => {
                    let mut out = Tensor::zeros(&full);
                    kernels::maxpool_forward(n * in_shape[0], in_shape[1], in_shape[2], x.data(), out.data_mut());
                    out
                }
                LayerKind::Flatten => x.clone().reshaped(full)?,
            };
            acts.push(out);
        }
        Ok(acts)
    }

    /// Logits only.
    pub fn predict(&self, inputs: &Tensor) -> Result<Tensor> {
        Ok(self.forward(inputs)?.pop().expect("non-empty network"))
    }

    /// Gradients of the mean cross-entropy for every layer flagged in `mask`.
    ///
    /// The pass stops at the first trainable layer: nothing upstream of it
    /// receives an activation gradient.
    pub fn backward(&self, inputs: &Tensor, activations: &[Tensor], labels: &[usize], mask: &[bool]) -> Result<Gradients> {
        let n = self.check_batch(inputs)?;
        if mask.len() != self.layers.len() {
            return Err(Error::Config(format!(
                "trainable mask has {} entries for {} layers",
                mask.len(),
                self.layers.len()
            )));
        }
        if activations.len() != self.layers.len() {
            return Err(Error::Contract(format!(
                "{} activations for {} layers",
                activations.len(),
                self.layers.len()
            )));
        }
        for (i, (&m, spec)) in mask.iter().zip(&self.layers).enumerate() {
            if m && !spec.kind.has_params() {
                return Err(Error::Config(format!(
                    "layer {i} ({}) marked trainable but has no parameters",
                    spec.kind.name()
                )));
            }
        }
        let mut grads = Gradients::default();
        let Some(first) = mask.iter().position(|&m| m) else {
            return Ok(grads);
        };

        let (_, dlogits) = softmax_cross_entropy(activations.last().expect("non-empty"), labels)?;
        let mut upstream = dlogits;
        grads.activation_grads = 1;

        for i in (first..self.layers.len()).rev() {
            let spec = &self.layers[i];
            let x = if i == 0 { inputs } else { &activations[i - 1] };
            let in_shape: &[usize] = if i == 0 { &self.input_shape } else { &self.shapes[i - 1] };
            let need_dx = i > first;
            let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
            match spec.kind {
                LayerKind::Dense { input, output } => {
                    let p = self.params[i].as_ref().expect("validated");
                    let mut dw = Tensor::zeros(p.weight.shape());
                    let mut db = Tensor::zeros(p.bias.shape());
                    kernels::dense_backward(
                        n,
                        input,
                        output,
                        x.data(),
                        p.weight.data(),
                        upstream.data(),
                        dw.data_mut(),
                        db.data_mut(),
                        dx.as_mut().map(|t| t.data_mut()),
                    );
                    if mask[i] {
                        grads.tensors.insert(ParamId::weight(i), dw);
                        grads.tensors.insert(ParamId::bias(i), db);
                    }
                }
                LayerKind::Conv2d { .. } => {
                    let p = self.params[i].as_ref().expect("validated");
                    let g = conv_geom(&spec.kind, n, in_shape, &self.shapes[i]);
                    let mut dw = Tensor::zeros(p.weight.shape());
                    let mut db = Tensor::zeros(p.bias.shape());
                    kernels::conv2d_backward(
                        &g,
                        x.data(),
                        p.weight.data(),
                        upstream.data(),
                        dw.data_mut(),
                        db.data_mut(),
                        dx.as_mut().map(|t| t.data_mut()),
                    );
                    if mask[i] {
                        grads.tensors.insert(ParamId::weight(i), dw);
                        grads.tensors.insert(ParamId::bias(i), db);
                    }
                }
                LayerKind::Relu => {
                    if let Some(dx) = dx.as_mut() {
                        let out = activations[i].data();
                        for ((d, &g), &o) in dx.data_mut().iter_mut().zip(upstream.data()).zip(out) {
                            *d = if o > 0.0 { g } else { 0.0 };
                        }
                    }
                }
                LayerKind::Maxpool2x2 => {
                    if let Some(dx) = dx.as_mut() {
                        kernels::maxpool_backward(n * in_shape[0], in_shape[1], in_shape[2], x.data(), upstream.data(), dx.data_mut());
                    }
                }
                LayerKind::Flatten => {
                    if let Some(dx) = dx.as_mut() {
                        dx.data_mut().copy_from_slice(upstream.data());
                    }
                }
            }
            match dx {
                Some(dx) => {
                    upstream = dx;
                    grads.activation_grads += 1;
                }
                None => break,
            }
        }
        Ok(grads)
    }
}

fn conv_geom(kind: &LayerKind, batch: usize, in_shape: &[usize], out_shape: &[usize]) -> ConvGeom {
    let LayerKind::Conv2d {
        in_ch,
        out_ch,
        kernel,
        stride,
        pad,
    } = *kind
    else {
        unreachable!("conv_geom on non-conv layer")
    };
    ConvGeom {
        batch,
        in_ch,
        out_ch,
        h: in_shape[1],
        w: in_shape[2],
        oh: out_shape[1],
        ow: out_shape[2],
        kernel,
        stride,
        pad,
    }
}
