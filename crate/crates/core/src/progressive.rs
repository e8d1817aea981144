//! Block partitioning of the global model, per-stage output modules, stage
//! model assembly and model growth between stages.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{he_uniform, infer_shapes, LayerKind, LayerParams, LayerSpec, Network};
use crate::rng::{stream_rng, Stream};

/// The original model: per-sample input shape, body layers, and the
/// classifier head (the trailing layers kept out of the blocks).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerKind>,
    /// Index where the classifier head starts.
    pub head_start: usize,
    /// Half-open layer ranges that must stay inside one block.
    #[serde(default)]
    pub atomic_units: Vec<(usize, usize)>,
}

impl Architecture {
    /// Head begins at the last `flatten`, or at the final layer when there is none.
    pub fn with_default_head(input_shape: Vec<usize>, layers: Vec<LayerKind>) -> Self {
        let head_start = layers
            .iter()
            .rposition(|l| matches!(l, LayerKind::Flatten))
            .unwrap_or(layers.len().saturating_sub(1));
        Self {
            input_shape,
            layers,
            head_start,
            atomic_units: Vec::new(),
        }
    }

    pub fn num_classes(&self) -> Result<usize> {
        let shapes = infer_shapes(&self.input_shape, &self.layers)?;
        match shapes.last().map(Vec::as_slice) {
            Some([c]) => Ok(*c),
            other => Err(Error::Config(format!("model output must be a flat class vector, got {other:?}"))),
        }
    }
}

/// The model split into ordered blocks plus the original head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPartition {
    input_shape: Vec<usize>,
    blocks: Vec<Vec<LayerKind>>,
    head: Vec<LayerKind>,
    /// Per-sample input shape of each block, and of the head at index T.
    entry_shapes: Vec<Vec<usize>>,
    num_classes: usize,
}

/// Split `arch` at the given body layer indices into `boundaries.len() + 1` blocks.
pub fn partition_model(arch: &Architecture, boundaries: &[usize]) -> Result<BlockPartition> {
    let body_len = arch.head_start;
    if body_len == 0 || body_len > arch.layers.len() {
        return Err(Error::Config(format!(
            "head_start {} leaves no body layers in a {}-layer model",
            arch.head_start,
            arch.layers.len()
        )));
    }
    if boundaries.is_empty() {
        return Err(Error::Config("at least one block boundary is required (T >= 2)".into()));
    }
    let mut prev = 0;
    for (i, &b) in boundaries.iter().enumerate() {
        if b <= prev || b >= body_len {
            return Err(Error::Config(format!(
                "block boundary #{i} = {b} must be strictly increasing within 1..{body_len}"
            )));
        }
        if let Some(&(s, e)) = arch.atomic_units.iter().find(|&&(s, e)| s < b && b < e) {
            return Err(Error::Config(format!("block boundary #{i} = {b} splits atomic unit {s}..{e}")));
        }
        prev = b;
    }
    let shapes = infer_shapes(&arch.input_shape, &arch.layers)?;
    let num_classes = arch.num_classes()?;

    let mut cuts = vec![0];
    cuts.extend_from_slice(boundaries);
    cuts.push(body_len);
    let blocks: Vec<Vec<LayerKind>> = cuts.windows(2).map(|w| arch.layers[w[0]..w[1]].to_vec()).collect();
    let entry_shapes = cuts
        .iter()
        .map(|&c| if c == 0 { arch.input_shape.clone() } else { shapes[c - 1].clone() })
        .collect();
    Ok(BlockPartition {
        input_shape: arch.input_shape.clone(),
        blocks,
        head: arch.layers[body_len..].to_vec(),
        entry_shapes,
        num_classes,
    })
}

impl BlockPartition {
    /// Number of blocks, T.
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Layers of block `t` (1-based).
    pub fn block(&self, t: usize) -> &[LayerKind] {
        &self.blocks[t - 1]
    }

    pub fn head(&self) -> &[LayerKind] {
        &self.head
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Per-sample shape entering block `t`; `t = T + 1` gives the head input.
    pub fn block_input_shape(&self, t: usize) -> &[usize] {
        &self.entry_shapes[t - 1]
    }

    pub fn block_output_shape(&self, t: usize) -> &[usize] {
        &self.entry_shapes[t]
    }

    /// Concatenation of all blocks and the head.
    pub fn reassemble(&self) -> Vec<LayerKind> {
        self.blocks.iter().flatten().chain(&self.head).copied().collect()
    }

    fn check_stage(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_blocks() {
            return Err(Error::Contract(format!("stage {t} outside 1..={}", self.num_blocks())));
        }
        Ok(())
    }

    /// Fresh He-uniform parameters for block `t`, keyed by the experiment seed.
    pub fn init_block(&self, t: usize, seed: u64) -> Result<BlockParams> {
        self.check_stage(t)?;
        let mut rng = stream_rng(seed, Stream::BlockInit, &[t as u64]);
        Ok(self.block(t).iter().map(|k| he_uniform(k, &mut rng)).collect())
    }

    /// The synthetic stand-in layer(s) for block `j`: a 3x3 convolution with
    /// the block's channel change and net stride for spatial blocks, a dense
    /// layer for flat blocks.
    fn stand_in(&self, j: usize) -> Result<Vec<LayerKind>> {
        let (inp, out) = (self.block_input_shape(j), self.block_output_shape(j));
        match (inp.len(), out.len()) {
            (3, 3) => {
                let stride = (inp[1] / out[1].max(1)).max(1);
                Ok(vec![
                    LayerKind::Conv2d {
                        in_ch: inp[0],
                        out_ch: out[0],
                        kernel: 3,
                        stride,
                        pad: 1,
                    },
                    LayerKind::Relu,
                ])
            }
            (1, 1) => Ok(vec![
                LayerKind::Dense {
                    input: inp[0],
                    output: out[0],
                },
                LayerKind::Relu,
            ]),
            (3, 1) => Ok(vec![
                LayerKind::Flatten,
                LayerKind::Dense {
                    input: inp.iter().product(),
                    output: out[0],
                },
                LayerKind::Relu,
            ]),
            _ => Err(Error::Config(format!("block {j} maps {inp:?} to {out:?}; no stand-in layer fits"))),
        }
    }
}

/// Parameters of one block, one slot per layer.
pub type BlockParams = Vec<Option<LayerParams>>;

/// Layers appended after the trained block: synthetic stand-ins for the
/// remaining blocks then a classifier, or the original head at the last stage.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputModule {
    pub stage: usize,
    pub layers: Vec<LayerKind>,
    pub params: BlockParams,
    /// Count of synthetic stand-in blocks (`T - t`; zero for the head).
    pub stand_ins: usize,
}

impl OutputModule {
    pub fn is_original_head(&self) -> bool {
        self.stand_ins == 0
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().flatten().map(LayerParams::len).sum()
    }
}

/// Build the output module for stage `t < T`.
pub fn build_output_module(partition: &BlockPartition, t: usize, num_classes: usize, seed: u64) -> Result<OutputModule> {
    partition.check_stage(t)?;
    let big_t = partition.num_blocks();
    if t == big_t {
        return Err(Error::Contract(format!(
            "stage {t} is the last stage; it trains the original head, not a synthetic output module"
        )));
    }
    let mut layers = Vec::new();
    for j in t + 1..=big_t {
        layers.extend(partition.stand_in(j)?);
    }
    let shapes = infer_shapes(partition.block_output_shape(t), &layers)?;
    let last = shapes.last().cloned().unwrap_or_else(|| partition.block_output_shape(t).to_vec());
    if last.len() != 1 {
        layers.push(LayerKind::Flatten);
    }
    layers.push(LayerKind::Dense {
        input: last.iter().product(),
        output: num_classes,
    });
    let mut rng = stream_rng(seed, Stream::OutputModule, &[t as u64]);
    let params = layers.iter().map(|k| he_uniform(k, &mut rng)).collect();
    Ok(OutputModule {
        stage: t,
        layers,
        params,
        stand_ins: big_t - t,
    })
}

/// The original head with fresh parameters, used as the last stage's output module.
pub fn build_head(partition: &BlockPartition, seed: u64) -> OutputModule {
    let big_t = partition.num_blocks();
    let mut rng = stream_rng(seed, Stream::OutputModule, &[big_t as u64]);
    OutputModule {
        stage: big_t,
        layers: partition.head().to_vec(),
        params: partition.head().iter().map(|k| he_uniform(k, &mut rng)).collect(),
        stand_ins: 0,
    }
}

/// Output module for stage `t`, synthetic or the head.
pub fn output_module_for(partition: &BlockPartition, t: usize, seed: u64) -> Result<OutputModule> {
    if t == partition.num_blocks() {
        Ok(build_head(partition, seed))
    } else {
        build_output_module(partition, t, partition.num_classes(), seed)
    }
}

/// A stage's trainable network: frozen blocks `1..t`, trainable block `t`
/// and trainable output module.
#[derive(Debug, Clone, PartialEq)]
pub struct StageModel {
    pub stage: usize,
    pub num_blocks: usize,
    pub network: Network,
    /// Layer range of each block `1..=t` inside `network`.
    pub block_ranges: Vec<Range<usize>>,
    pub op_range: Range<usize>,
}

impl StageModel {
    pub fn block_range(&self, t: usize) -> Range<usize> {
        self.block_ranges[t - 1].clone()
    }

    /// Layers trained at this stage (block `t` followed by the output module).
    pub fn trainable_range(&self) -> Range<usize> {
        self.block_range(self.stage).start..self.op_range.end
    }

    pub fn current_block(&self) -> Range<usize> {
        self.block_range(self.stage)
    }

    /// Parameters of block `t`.
    pub fn block_params(&self, t: usize) -> BlockParams {
        self.network.params()[self.block_range(t)].to_vec()
    }

    pub fn op_params(&self) -> BlockParams {
        self.network.params()[self.op_range.clone()].to_vec()
    }

    pub fn op_layers(&self) -> Vec<LayerKind> {
        self.network.layers()[self.op_range.clone()].iter().map(|l| l.kind).collect()
    }

    /// Flattened parameters of the block under training.
    pub fn current_block_vector(&self) -> Vec<f64> {
        self.network.flatten_params(self.current_block())
    }

    /// Flattened parameters of all frozen blocks.
    pub fn frozen_vector(&self) -> Vec<f64> {
        self.network.flatten_params(0..self.current_block().start)
    }

    pub fn is_final(&self) -> bool {
        self.stage == self.num_blocks
    }
}

/// Assemble `[frozen 1..t-1, block t, output module]`. `blocks` holds the
/// parameters of blocks `1..=t`.
pub fn assemble_stage_model(partition: &BlockPartition, t: usize, blocks: &[BlockParams], op: OutputModule) -> Result<StageModel> {
    partition.check_stage(t)?;
    if op.stage != t {
        return Err(Error::Contract(format!(
            "output module built for stage {} used at stage {t}",
            op.stage
        )));
    }
    if (t == partition.num_blocks()) != op.is_original_head() {
        return Err(Error::Contract(format!(
            "stage {t} of {} needs {}",
            partition.num_blocks(),
            if t == partition.num_blocks() {
                "the original head"
            } else {
                "a synthetic output module"
            }
        )));
    }
    if blocks.len() != t {
        return Err(Error::Contract(format!(
            "stage {t} needs parameters for {t} blocks, got {}",
            blocks.len()
        )));
    }
    let mut layers = Vec::new();
    let mut params = Vec::new();
    let mut block_ranges = Vec::with_capacity(t);
    for (j, bp) in blocks.iter().enumerate() {
        let kinds = partition.block(j + 1);
        if bp.len() != kinds.len() {
            return Err(Error::Contract(format!(
                "block {} has {} layers but {} parameter slots",
                j + 1,
                kinds.len(),
                bp.len()
            )));
        }
        let start = layers.len();
        let trainable = j + 1 == t;
        layers.extend(
            kinds
                .iter()
                .map(|&k| if trainable { LayerSpec::trainable(k) } else { LayerSpec::frozen(k) }),
        );
        params.extend(bp.iter().cloned());
        block_ranges.push(start..layers.len());
    }
    let op_start = layers.len();
    layers.extend(op.layers.iter().map(|&k| LayerSpec::trainable(k)));
    params.extend(op.params);
    let op_range = op_start..layers.len();
    let network = Network::new(partition.input_shape().to_vec(), layers, params)?;
    Ok(StageModel {
        stage: t,
        num_blocks: partition.num_blocks(),
        network,
        block_ranges,
        op_range,
    })
}

/// First stage model from freshly initialized block 1.
pub fn initial_stage(partition: &BlockPartition, seed: u64) -> Result<StageModel> {
    let b1 = partition.init_block(1, seed)?;
    assemble_stage_model(partition, 1, &[b1], output_module_for(partition, 1, seed)?)
}

/// Freeze the current block, append a fresh next block, and swap in the
/// next stage's output module. The previous output module is discarded.
pub fn grow(prev: &StageModel, partition: &BlockPartition, seed: u64) -> Result<StageModel> {
    if prev.is_final() {
        return Err(Error::Contract(format!(
            "stage {} is the last stage; training is complete",
            prev.stage
        )));
    }
    let t = prev.stage + 1;
    let mut blocks: Vec<BlockParams> = (1..t).map(|j| prev.block_params(j)).collect();
    blocks.push(partition.init_block(t, seed)?);
    assemble_stage_model(partition, t, &blocks, output_module_for(partition, t, seed)?)
}

/// The full original model with every layer trainable, from initial block parameters.
pub fn full_model(partition: &BlockPartition, seed: u64) -> Result<Network> {
    let big_t = partition.num_blocks();
    let mut layers = Vec::new();
    let mut params = Vec::new();
    for t in 1..=big_t {
        layers.extend(partition.block(t).iter().map(|&k| LayerSpec::trainable(k)));
        params.extend(partition.init_block(t, seed)?);
    }
    let head = build_head(partition, seed);
    layers.extend(head.layers.iter().map(|&k| LayerSpec::trainable(k)));
    params.extend(head.params);
    Network::new(partition.input_shape().to_vec(), layers, params)
}
