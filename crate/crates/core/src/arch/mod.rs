//! Declarative encoder-decoder networks.
//!
//! A [`NetworkSpec`] is an ordered layer graph: each layer names the earlier
//! layers it reads. The same graph is used for symbolic shape inference (no
//! weights are allocated), for the textual summary, for parameter
//! initialisation and for the forward pass on a [`Tape`].
//!
//! Channel schedule per resolution level is `{16, 32, 64, 128, 256} / s`, so
//! at `s = 1` and a 128-voxel input the encoder ends at `8^k x 256`.

mod inception;
mod resnet;
mod unet;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{PoolMode, Tape, Var};
use crate::init::he_uniform;
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor, TensorError};

pub use inception::{build_inception_v3, build_inception_v4};
pub use resnet::build_resnet;
pub use unet::build_unet;

/// Channels per resolution level at width scale 1.
pub const BASE_CHANNELS: [usize; 5] = [16, 32, 64, 128, 256];
pub const IN_CHANNELS: usize = 4;
pub const OUT_CLASSES: usize = 4;
/// Number of 2x downsamplings between input and encoder endpoint.
pub const POOL_LEVELS: u32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum ArchError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("width scale {0} does not divide the channel schedule {BASE_CHANNELS:?}")]
    IndivisibleSchedule(usize),
    #[error("input shape {shape:?} invalid: {reason}")]
    InputShape { shape: Vec<usize>, reason: String },
    #[error("layer {layer}: kernel extent {kernel} exceeds feature-map extent {extent}")]
    KernelExceedsExtent {
        layer: String,
        kernel: usize,
        extent: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    UNet,
    InceptionV3,
    InceptionV4,
    ResNet,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::UNet,
        ModelKind::InceptionV3,
        ModelKind::InceptionV4,
        ModelKind::ResNet,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::UNet => "unet",
            ModelKind::InceptionV3 => "inception-v3",
            ModelKind::InceptionV4 => "inception-v4",
            ModelKind::ResNet => "resnet",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "unet" => Ok(ModelKind::UNet),
            "inception-v3" | "inceptionv3" | "inception3" => Ok(ModelKind::InceptionV3),
            "inception-v4" | "inceptionv4" | "inception4" => Ok(ModelKind::InceptionV4),
            "resnet" => Ok(ModelKind::ResNet),
            other => Err(format!("unknown model kind {other:?}")),
        }
    }
}

/// Number of spatial axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rank {
    Two,
    Three,
}

impl Rank {
    pub fn dims(self) -> usize {
        match self {
            Rank::Two => 2,
            Rank::Three => 3,
        }
    }

    /// Isotropic kernel extents.
    pub fn cube(self, k: usize) -> Vec<usize> {
        vec![k; self.dims()]
    }
}

impl fmt::Display for Rank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rank::Two => "2d",
            Rank::Three => "3d",
        })
    }
}

impl FromStr for Rank {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "2d" | "2" => Ok(Rank::Two),
            "3d" | "3" => Ok(Rank::Three),
            other => Err(format!("unknown rank {other:?} (expected 2d or 3d)")),
        }
    }
}

/// Part of the network a layer belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Encoder,
    Decoder,
    Head,
}

/// Why two or more tensors are concatenated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConcatRole {
    /// Encoder output joined to the decoder at the same resolution.
    Skip,
    /// Parallel inception branches.
    Branches,
    /// Max and average pooling of the same input.
    HybridPool,
    /// A convolution group joined with the group that follows it.
    Residual,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerOp {
    Input,
    Conv {
        kernel: Vec<usize>,
        c_in: usize,
        c_out: usize,
        relu: bool,
    },
    ConvTranspose {
        kernel: Vec<usize>,
        c_in: usize,
        c_out: usize,
        stride: usize,
    },
    Pool(PoolMode),
    AvgPoolSame { window: usize },
    Concat(ConcatRole),
    Dropout,
    Softmax,
}

impl LayerOp {
    fn label(&self) -> String {
        match self {
            LayerOp::Input => "input".into(),
            LayerOp::Conv { kernel, relu, .. } => {
                let k: Vec<String> = kernel.iter().map(|e| e.to_string()).collect();
                format!("conv {}{}", k.join("x"), if *relu { " relu" } else { "" })
            }
            LayerOp::ConvTranspose { kernel, stride, .. } => {
                let k: Vec<String> = kernel.iter().map(|e| e.to_string()).collect();
                format!("conv-transpose {} /{stride}", k.join("x"))
            }
            LayerOp::Pool(PoolMode::Max) => "max-pool 2".into(),
            LayerOp::Pool(PoolMode::Avg) => "avg-pool 2".into(),
            LayerOp::AvgPoolSame { window } => format!("avg-pool {window} same"),
            LayerOp::Concat(role) => format!("concat {role:?}").to_lowercase(),
            LayerOp::Dropout => "dropout".into(),
            LayerOp::Softmax => "softmax".into(),
        }
    }

    fn param_count(&self) -> usize {
        match self {
            LayerOp::Conv { kernel, c_in, c_out, .. } | LayerOp::ConvTranspose { kernel, c_in, c_out, .. } => {
                kernel.iter().product::<usize>() * c_in * c_out + c_out
            }
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub op: LayerOp,
    pub inputs: Vec<usize>,
    pub stage: Stage,
    pub channels: usize,
}

/// Immutable layer graph of one architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub kind: ModelKind,
    pub rank: Rank,
    pub width_scale: usize,
    pub in_channels: usize,
    pub n_classes: usize,
    pub dropout_rate: f64,
    pub layers: Vec<Layer>,
    /// Layer holding the deepest encoder representation.
    pub encoder_endpoint: usize,
}

/// One line of the textual summary.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSummary {
    pub name: String,
    pub op: String,
    pub shape: Vec<usize>,
    pub params: usize,
}

pub(crate) fn level_channels(width_scale: usize) -> Result<[usize; 5], ArchError> {
    if width_scale == 0 || BASE_CHANNELS.iter().any(|c| c % width_scale != 0) {
        return Err(ArchError::IndivisibleSchedule(width_scale));
    }
    Ok(BASE_CHANNELS.map(|c| c / width_scale))
}

/// Default dropout rate per rank.
pub fn default_dropout(rank: Rank) -> f64 {
    match rank {
        Rank::Three => 0.2,
        Rank::Two => 0.8,
    }
}

/// Incremental construction of a layer graph with channel bookkeeping.
pub(crate) struct GraphBuilder {
    rank: Rank,
    layers: Vec<Layer>,
    stage: Stage,
}

impl GraphBuilder {
    pub fn new(rank: Rank) -> Self {
        Self {
            rank,
            layers: vec![Layer {
                name: "input".into(),
                op: LayerOp::Input,
                inputs: vec![],
                stage: Stage::Encoder,
                channels: IN_CHANNELS,
            }],
            stage: Stage::Encoder,
        }
    }

    pub fn rank(&self) -> Rank {
        self.rank
    }

    pub fn set_stage(&mut self, stage: Stage) {
        self.stage = stage;
    }

    pub fn channels(&self, id: usize) -> usize {
        self.layers[id].channels
    }

    fn push(&mut self, name: String, op: LayerOp, inputs: Vec<usize>, channels: usize) -> usize {
        debug_assert!(self.layers.iter().all(|l| l.name != name), "duplicate layer {name}");
        self.layers.push(Layer {
            name,
            op,
            inputs,
            stage: self.stage,
            channels,
        });
        self.layers.len() - 1
    }

    pub fn conv(&mut self, name: impl Into<String>, input: usize, kernel: Vec<usize>, c_out: usize, relu: bool) -> usize {
        let c_in = self.channels(input);
        self.push(
            name.into(),
            LayerOp::Conv {
                kernel,
                c_in,
                c_out,
                relu,
            },
            vec![input],
            c_out,
        )
    }

    /// 3-per-axis convolution followed by ReLU.
    pub fn conv3(&mut self, name: impl Into<String>, input: usize, c_out: usize) -> usize {
        let k = self.rank.cube(3);
        self.conv(name, input, k, c_out, true)
    }

    /// 1-per-axis convolution followed by ReLU.
    pub fn conv1(&mut self, name: impl Into<String>, input: usize, c_out: usize) -> usize {
        let k = self.rank.cube(1);
        self.conv(name, input, k, c_out, true)
    }

    /// `n` chained 3-kernel convolutions.
    pub fn conv_stack(&mut self, prefix: &str, input: usize, c_out: usize, n: usize) -> usize {
        (0..n).fold(input, |x, j| self.conv3(format!("{prefix}.conv{j}"), x, c_out))
    }

    pub fn up(&mut self, name: impl Into<String>, input: usize, c_out: usize) -> usize {
        let c_in = self.channels(input);
        let kernel = self.rank.cube(2);
        self.push(
            name.into(),
            LayerOp::ConvTranspose {
                kernel,
                c_in,
                c_out,
                stride: 2,
            },
            vec![input],
            c_out,
        )
    }

    pub fn pool(&mut self, name: impl Into<String>, input: usize, mode: PoolMode) -> usize {
        let c = self.channels(input);
        self.push(name.into(), LayerOp::Pool(mode), vec![input], c)
    }

    pub fn avg_pool_same(&mut self, name: impl Into<String>, input: usize, window: usize) -> usize {
        let c = self.channels(input);
        self.push(name.into(), LayerOp::AvgPoolSame { window }, vec![input], c)
    }

    pub fn concat(&mut self, name: impl Into<String>, inputs: Vec<usize>, role: ConcatRole) -> usize {
        let c = inputs.iter().map(|&i| self.channels(i)).sum();
        self.push(name.into(), LayerOp::Concat(role), inputs, c)
    }

    /// Max-pool and average-pool concatenated: spatial halved, channels doubled.
    pub fn hybrid_pool(&mut self, prefix: &str, input: usize) -> usize {
        let m = self.pool(format!("{prefix}.max"), input, PoolMode::Max);
        let a = self.pool(format!("{prefix}.avg"), input, PoolMode::Avg);
        self.concat(format!("{prefix}.cat"), vec![m, a], ConcatRole::HybridPool)
    }

    pub fn dropout(&mut self, name: impl Into<String>, input: usize) -> usize {
        let c = self.channels(input);
        self.push(name.into(), LayerOp::Dropout, vec![input], c)
    }

    /// 1-kernel projection to the class count followed by softmax.
    pub fn head(&mut self, input: usize) -> usize {
        self.set_stage(Stage::Head);
        let d = self.dropout("head.dropout", input);
        let k = self.rank.cube(1);
        let logits = self.conv("head.conv", d, k, OUT_CLASSES, false);
        self.push("head.softmax".into(), LayerOp::Softmax, vec![logits], OUT_CLASSES)
    }

    pub fn finish(self, kind: ModelKind, width_scale: usize, encoder_endpoint: usize) -> NetworkSpec {
        NetworkSpec {
            kind,
            rank: self.rank,
            width_scale,
            in_channels: IN_CHANNELS,
            n_classes: OUT_CLASSES,
            dropout_rate: default_dropout(self.rank),
            layers: self.layers,
            encoder_endpoint,
        }
    }
}

/// Splits `budget` channels over `n` branches: equal shares rounded down,
/// remainder to the first (1-kernel) branch, at least one channel each.
pub(crate) fn split_branches(budget: usize, n: usize) -> Vec<usize> {
    let share = (budget / n).max(1);
    let mut widths = vec![share; n];
    widths[0] += budget.saturating_sub(share * n);
    widths
}

/// Kernels at least this wide require a feature map that covers them.
const FACTORIZED_KERNEL: usize = 7;

/// Builds the named architecture.
pub fn build(kind: ModelKind, rank: Rank, width_scale: usize) -> Result<NetworkSpec, ArchError> {
    match kind {
        ModelKind::UNet => build_unet(rank, width_scale),
        ModelKind::InceptionV3 => build_inception_v3(rank, width_scale),
        ModelKind::InceptionV4 => build_inception_v4(rank, width_scale),
        ModelKind::ResNet => build_resnet(rank, width_scale),
    }
}

/// Max-pool and average-pool (window 2) of `x` concatenated along channels.
pub fn hybrid_pool<T: Element>(tape: &mut Tape<T>, x: Var) -> Result<Var, TensorError> {
    let m = tape.pool(x, 2, PoolMode::Max)?;
    let a = tape.pool(x, 2, PoolMode::Avg)?;
    tape.concat(&[m, a])
}

impl NetworkSpec {
    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }

    pub fn output_layer(&self) -> usize {
        self.layers.len() - 1
    }

    fn check_input(&self, shape: &[usize]) -> Result<(), ArchError> {
        let bad = |reason: String| ArchError::InputShape {
            shape: shape.to_vec(),
            reason,
        };
        let k = self.rank.dims();
        if shape.len() != k + 2 {
            return Err(bad(format!("expected [batch, {k} spatial, channels]")));
        }
        if shape[k + 1] != self.in_channels {
            return Err(bad(format!("expected {} input channels", self.in_channels)));
        }
        let pyramid = 1usize << POOL_LEVELS;
        if shape[0] == 0 {
            return Err(bad("empty batch".into()));
        }
        if let Some(&e) = shape[1..=k].iter().find(|&&e| e == 0 || e % pyramid != 0) {
            return Err(bad(format!(
                "spatial extent {e} does not pass {POOL_LEVELS} halvings (needs a multiple of {pyramid})"
            )));
        }
        Ok(())
    }

    /// Output shape of every layer for the given input, without allocating
    /// any tensors.
    pub fn infer_shapes(&self, input: &[usize]) -> Result<Vec<Vec<usize>>, ArchError> {
        self.check_input(input)?;
        let k = self.rank.dims();
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let shape = match &layer.op {
                LayerOp::Input => input.to_vec(),
                LayerOp::Conv { kernel, c_out, .. } => {
                    let mut s = shapes[layer.inputs[0]].clone();
                    for (a, &kk) in kernel.iter().enumerate() {
                        if kk >= FACTORIZED_KERNEL && s[1 + a] < kk {
                            return Err(ArchError::KernelExceedsExtent {
                                layer: layer.name.clone(),
                                kernel: kk,
                                extent: s[1 + a],
                            });
                        }
                    }
                    s[k + 1] = *c_out;
                    s
                }
                LayerOp::ConvTranspose { c_out, stride, .. } => {
                    let mut s = shapes[layer.inputs[0]].clone();
                    for e in &mut s[1..=k] {
                        *e *= stride;
                    }
                    s[k + 1] = *c_out;
                    s
                }
                LayerOp::Pool(_) => {
                    let mut s = shapes[layer.inputs[0]].clone();
                    for (a, e) in s[1..=k].iter_mut().enumerate() {
                        if *e % 2 != 0 {
                            return Err(TensorError::NotDivisible {
                                axis: a,
                                extent: *e,
                                window: 2,
                            }
                            .into());
                        }
                        *e /= 2;
                    }
                    s
                }
                LayerOp::AvgPoolSame { .. } | LayerOp::Dropout | LayerOp::Softmax => shapes[layer.inputs[0]].clone(),
                LayerOp::Concat(_) => {
                    let first = &shapes[layer.inputs[0]];
                    let mut s = first.clone();
                    s[k + 1] = 0;
                    for &i in &layer.inputs {
                        if shapes[i][..=k] != first[..=k] {
                            return Err(TensorError::ShapeMismatch(format!(
                                "{}: {:?} vs {:?}",
                                layer.name, shapes[i], first
                            ))
                            .into());
                        }
                        s[k + 1] += shapes[i][k + 1];
                    }
                    s
                }
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.op.param_count()).sum()
    }

    pub fn summary(&self, input: &[usize]) -> Result<Vec<LayerSummary>, ArchError> {
        let shapes = self.infer_shapes(input)?;
        Ok(self
            .layers
            .iter()
            .zip(shapes)
            .map(|(l, shape)| LayerSummary {
                name: l.name.clone(),
                op: l.op.label(),
                shape,
                params: l.op.param_count(),
            })
            .collect())
    }

    /// Tab-separated `name, op, output shape, parameter count` lines.
    pub fn render_summary(&self, input: &[usize]) -> Result<String, ArchError> {
        let rows = self.summary(input)?;
        let mut out = format!(
            "# {} {} width_scale={} params={}\nlayer\top\tshape\tparams\n",
            self.kind,
            self.rank,
            self.width_scale,
            self.param_count()
        );
        for r in rows {
            let shape: Vec<String> = r.shape.iter().map(|e| e.to_string()).collect();
            out.push_str(&format!("{}\t{}\t{}\t{}\n", r.name, r.op, shape.join("x"), r.params));
        }
        Ok(out)
    }

    /// Convolution layers (not transposed) of a stage.
    pub fn conv_count(&self, stage: Stage) -> usize {
        self.layers
            .iter()
            .filter(|l| l.stage == stage && matches!(l.op, LayerOp::Conv { .. }))
            .count()
    }

    /// For every residual concatenation `(a, b)`, the number of convolutions
    /// on the path from `a` to `b`.
    pub fn residual_spans(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter(|l| l.op == LayerOp::Concat(ConcatRole::Residual))
            .map(|l| {
                let (from, mut at) = (l.inputs[0], l.inputs[1]);
                let mut convs = 0;
                while at != from {
                    let layer = &self.layers[at];
                    if matches!(layer.op, LayerOp::Conv { .. }) {
                        convs += 1;
                    }
                    match layer.inputs.as_slice() {
                        [single] => at = *single,
                        _ => return usize::MAX,
                    }
                }
                convs
            })
            .collect()
    }

    /// Fresh He-uniform kernels and zero biases for every convolution.
    pub fn init_params<T: Element, R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamStore<T>, ArchError> {
        let mut store = ParamStore::new();
        for l in &self.layers {
            if let LayerOp::Conv { kernel, c_in, c_out, .. } | LayerOp::ConvTranspose { kernel, c_in, c_out, .. } = &l.op {
                let mut shape = kernel.clone();
                shape.extend([*c_in, *c_out]);
                store.insert(format!("{}.kernel", l.name), he_uniform(&shape, rng)?)?;
                store.insert(format!("{}.bias", l.name), Tensor::zeros(&[*c_out]))?;
            }
        }
        Ok(store)
    }

    /// Runs the graph on `x`; returns per-voxel class probabilities. Dropout
    /// is active only when `training`.
    pub fn forward<T: Element, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        x: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var, ArchError> {
        let input_shape = tape.value(x).shape().to_vec();
        // validates the whole graph before any work
        self.infer_shapes(&input_shape)?;
        let mut vars: Vec<Var> = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let v = match &l.op {
                LayerOp::Input => x,
                LayerOp::Conv { relu, .. } => {
                    let k = tape.param(params, &format!("{}.kernel", l.name))?;
                    let b = tape.param(params, &format!("{}.bias", l.name))?;
                    let y = tape.conv(vars[l.inputs[0]], k, Some(b), 1)?;
                    if *relu {
                        tape.relu(y)?
                    } else {
                        y
                    }
                }
                LayerOp::ConvTranspose { stride, .. } => {
                    let k = tape.param(params, &format!("{}.kernel", l.name))?;
                    let b = tape.param(params, &format!("{}.bias", l.name))?;
                    tape.conv_transpose(vars[l.inputs[0]], k, Some(b), *stride)?
                }
                LayerOp::Pool(mode) => tape.pool(vars[l.inputs[0]], 2, *mode)?,
                LayerOp::AvgPoolSame { window } => tape.avg_pool_same(vars[l.inputs[0]], *window)?,
                LayerOp::Concat(_) => {
                    let xs: Vec<Var> = l.inputs.iter().map(|&i| vars[i]).collect();
                    tape.concat(&xs)?
                }
                LayerOp::Dropout => tape.dropout(vars[l.inputs[0]], self.dropout_rate, training, rng)?,
                LayerOp::Softmax => tape.softmax(vars[l.inputs[0]])?,
            };
            vars.push(v);
        }
        Ok(vars[self.output_layer()])
    }

    /// Evaluation-mode forward pass outside of training.
    pub fn predict<T: Element>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>, ArchError> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        // dropout is inactive, so the generator is never drawn from
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let out = self.forward(&mut tape, params, xv, false, &mut rng)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests;
