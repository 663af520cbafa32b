//! Aug-VGGish and FCN-VGGish as declarative layer lists, their weights, and
//! the CSNW weight container.
//!
//! Both networks share the six-convolution VGGish feature stack with a batch
//! norm after every convolution. Aug-VGGish ends in global average pooling,
//! a single 256-unit FC layer and the classifier. FCN-VGGish adds a fifth
//! pooling stage and two 1024-channel convolutions, then classifies with a
//! 1×1 convolution followed by global average pooling; it has no dense
//! layers and accepts any input with at least 32 frames.

mod bundle;
mod container;

pub use bundle::{fold_batchnorm, load_bundle, save_bundle, Embedding, LayerWeights, WeightBundle};
pub use container::{read_container, write_container, Container, ManifestEntry, CONTAINER_MAGIC, CONTAINER_VERSION};

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::audio::{NUM_MEL_BANDS, PATCH_FRAMES};
use crate::error::{Error, Result};

/// Name of the final (class-scoring) layer in every built-in architecture.
pub const CLASSIFIER: &str = "classifier";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchId {
    AugVggish,
    FcnVggish,
}

impl ArchId {
    pub fn as_str(self) -> &'static str {
        match self {
            ArchId::AugVggish => "aug_vggish",
            ArchId::FcnVggish => "fcn_vggish",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "aug_vggish" => Some(ArchId::AugVggish),
            "fcn_vggish" => Some(ArchId::FcnVggish),
            _ => None,
        }
    }
}

impl fmt::Display for ArchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Avg,
    Max,
}

/// How logits become class probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Softmax,
    /// Single logit scored as P(class 1) for two-class bundles.
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Conv { name: String, in_channels: usize, out_channels: usize, kernel: usize },
    BatchNorm { name: String, channels: usize },
    Relu,
    MaxPool2x2,
    GlobalPool { pool: PoolKind },
    Dense { name: String, in_units: usize, out_units: usize },
}

/// Role of a parameter tensor within its layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    pub fn suffix(self) -> &'static str {
        match self {
            ParamRole::Weight => "weight",
            ParamRole::Bias => "bias",
            ParamRole::Gamma => "gamma",
            ParamRole::Beta => "beta",
            ParamRole::RunningMean => "running_mean",
            ParamRole::RunningVar => "running_var",
        }
    }

    pub fn trainable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlot {
    pub layer: usize,
    pub name: String,
    pub role: ParamRole,
    pub shape: Vec<usize>,
}

impl Layer {
    pub fn name(&self) -> Option<&str> {
        match self {
            Layer::Conv { name, .. } | Layer::BatchNorm { name, .. } | Layer::Dense { name, .. } => Some(name),
            _ => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv { .. } => "conv2d",
            Layer::BatchNorm { .. } => "batch_norm",
            Layer::Relu => "relu",
            Layer::MaxPool2x2 => "maxpool2x2",
            Layer::GlobalPool { pool: PoolKind::Avg } => "global_avg_pool",
            Layer::GlobalPool { pool: PoolKind::Max } => "global_max_pool",
            Layer::Dense { .. } => "dense",
        }
    }

    /// Parameter tensors as `(role, shape)`.
    pub fn params(&self) -> Vec<(ParamRole, Vec<usize>)> {
        match *self {
            Layer::Conv { in_channels, out_channels, kernel, .. } => vec![
                (ParamRole::Weight, vec![out_channels, in_channels, kernel, kernel]),
                (ParamRole::Bias, vec![out_channels]),
            ],
            Layer::BatchNorm { channels, .. } => vec![
                (ParamRole::Gamma, vec![channels]),
                (ParamRole::Beta, vec![channels]),
                (ParamRole::RunningMean, vec![channels]),
                (ParamRole::RunningVar, vec![channels]),
            ],
            Layer::Dense { in_units, out_units, .. } => {
                vec![(ParamRole::Weight, vec![out_units, in_units]), (ParamRole::Bias, vec![out_units])]
            }
            _ => vec![],
        }
    }

    pub fn trainable_params(&self) -> usize {
        self.params()
            .iter()
            .filter(|(role, _)| role.trainable())
            .map(|(_, shape)| shape.iter().product::<usize>())
            .sum()
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |what: String| Err(Error::Shape(format!("{}: {what}", self.name().unwrap_or(self.kind()))));
        match (self, input) {
            (Layer::Conv { in_channels, out_channels, kernel, .. }, &[c, h, w]) => {
                if c != *in_channels {
                    return mismatch(format!("expects {in_channels} channels, got {c}"));
                }
                if *kernel != 3 && *kernel != 1 {
                    return mismatch(format!("unsupported kernel size {kernel}"));
                }
                Ok(vec![*out_channels, h, w])
            }
            (Layer::BatchNorm { channels, .. }, &[c, h, w]) => {
                if c != *channels {
                    return mismatch(format!("expects {channels} channels, got {c}"));
                }
                Ok(vec![c, h, w])
            }
            (Layer::Relu, s) => Ok(s.to_vec()),
            (Layer::MaxPool2x2, &[c, h, w]) => {
                if h < 2 || w < 2 {
                    return mismatch(format!("cannot pool a {h}x{w} map"));
                }
                Ok(vec![c, h / 2, w / 2])
            }
            (Layer::GlobalPool { .. }, &[c, _, _]) => Ok(vec![c]),
            (Layer::Dense { in_units, out_units, .. }, &[n]) => {
                if n != *in_units {
                    return mismatch(format!("expects {in_units} inputs, got {n}"));
                }
                Ok(vec![*out_units])
            }
            (_, s) => mismatch(format!("cannot accept input of shape {s:?}")),
        }
    }
}

/// An architecture: an ordered layer list over `[1, frames, 64]` inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub arch_id: ArchId,
    pub num_classes: usize,
    pub layers: Vec<Layer>,
    pub output: OutputActivation,
}

impl ModelSpec {
    /// Validates names and the shape chain for a 96-frame patch.
    pub fn new(arch_id: ArchId, num_classes: usize, layers: Vec<Layer>, output: OutputActivation) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
        }
        let mut seen = HashSet::new();
        for name in layers.iter().filter_map(Layer::name) {
            if !seen.insert(name) {
                return Err(Error::Config(format!("duplicate layer name {name}")));
            }
        }
        let spec = Self { arch_id, num_classes, layers, output };
        spec.output_shape(PATCH_FRAMES)?;
        Ok(spec)
    }

    pub fn input_shape(frames: usize) -> [usize; 3] {
        [1, frames, NUM_MEL_BANDS]
    }

    /// Number of output logits.
    pub fn num_logits(&self) -> usize {
        match self.output {
            OutputActivation::Softmax => self.num_classes,
            OutputActivation::Sigmoid => 1,
        }
    }

    /// Propagates an input of `frames` frames and checks it ends at the logits.
    pub fn output_shape(&self, frames: usize) -> Result<Vec<usize>> {
        let mut shape = Self::input_shape(frames).to_vec();
        for layer in &self.layers {
            shape = layer.output_shape(&shape)?;
        }
        if shape != [self.num_logits()] {
            return Err(Error::Shape(format!("network ends in {shape:?}, expected [{}]", self.num_logits())));
        }
        Ok(shape)
    }

    /// Per-layer output shapes for an input of `frames` frames.
    pub fn layer_shapes(&self, frames: usize) -> Result<Vec<Vec<usize>>> {
        let mut shape = Self::input_shape(frames).to_vec();
        self.layers
            .iter()
            .map(|l| {
                shape = l.output_shape(&shape)?;
                Ok(shape.clone())
            })
            .collect()
    }

    /// Trainable parameters: conv and dense weights and biases plus batch-norm
    /// gamma and beta. Running statistics are excluded.
    pub fn count_params(&self) -> usize {
        count_params(&self.layers)
    }

    pub fn param_slots(&self) -> Vec<ParamSlot> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, layer)| {
                let base = layer.name().unwrap_or_default().to_string();
                layer.params().into_iter().map(move |(role, shape)| ParamSlot {
                    layer: i,
                    name: format!("{base}.{}", role.suffix()),
                    role,
                    shape,
                })
            })
            .collect()
    }

    pub fn classifier_index(&self) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name() == Some(CLASSIFIER))
            .ok_or_else(|| Error::Structure("no classifier layer".into()))
    }

    /// Width of the representation the classifier consumes.
    pub fn embedding_dim(&self) -> Result<usize> {
        match &self.layers[self.classifier_index()?] {
            Layer::Conv { in_channels, .. } => Ok(*in_channels),
            Layer::Dense { in_units, .. } => Ok(*in_units),
            _ => Err(Error::Structure("classifier must be a conv or dense layer".into())),
        }
    }

    /// Smallest frame count that survives every pooling stage.
    pub fn min_input_frames(&self) -> usize {
        1 << self.layers.iter().filter(|l| matches!(l, Layer::MaxPool2x2)).count()
    }

    /// 3×3 convolutions, i.e. feature extractors rather than a 1×1 classifier.
    pub fn feature_conv_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, Layer::Conv { kernel: 3, .. })).count()
    }

    pub fn dense_layers(&self) -> Vec<&Layer> {
        self.layers.iter().filter(|l| matches!(l, Layer::Dense { .. })).collect()
    }

    /// Converts a two-class softmax network into a single sigmoid logit.
    pub fn into_sigmoid(mut self) -> Result<Self> {
        if self.num_classes != 2 {
            return Err(Error::Config("sigmoid output needs exactly 2 classes".into()));
        }
        let idx = self.classifier_index()?;
        match &mut self.layers[idx] {
            Layer::Conv { out_channels, .. } => *out_channels = 1,
            Layer::Dense { out_units, .. } => *out_units = 1,
            _ => return Err(Error::Structure("classifier must be a conv or dense layer".into())),
        }
        self.output = OutputActivation::Sigmoid;
        self.output_shape(PATCH_FRAMES)?;
        Ok(self)
    }
}

pub fn count_params(layers: &[Layer]) -> usize {
    layers.iter().map(Layer::trainable_params).sum()
}

/// Channel plan of the VGGish-family stacks. `maxpool_after` lists the conv
/// indices followed by 2×2 pooling.
#[derive(Debug, Clone)]
pub struct StackPlan {
    pub conv_channels: Vec<usize>,
    pub maxpool_after: Vec<usize>,
    pub fc_units: usize,
}

impl StackPlan {
    pub fn aug_vggish() -> Self {
        Self { conv_channels: vec![64, 128, 256, 256, 512, 512], maxpool_after: vec![0, 1, 3, 5], fc_units: 256 }
    }

    pub fn fcn_vggish() -> Self {
        Self {
            conv_channels: vec![64, 128, 256, 256, 512, 512, 1024, 1024],
            maxpool_after: vec![0, 1, 3, 5],
            fc_units: 0,
        }
    }

    /// Every width divided by `divisor`; for fast structural tests.
    pub fn narrowed(mut self, divisor: usize) -> Self {
        self.conv_channels.iter_mut().for_each(|c| *c = (*c / divisor).max(1));
        self.fc_units = if self.fc_units == 0 { 0 } else { (self.fc_units / divisor).max(1) };
        self
    }
}

fn conv_bn_relu(layers: &mut Vec<Layer>, idx: usize, in_channels: usize, out_channels: usize) {
    layers.push(Layer::Conv { name: format!("conv{}", idx + 1), in_channels, out_channels, kernel: 3 });
    layers.push(Layer::BatchNorm { name: format!("bn{}", idx + 1), channels: out_channels });
    layers.push(Layer::Relu);
}

fn feature_stack(plan: &StackPlan, convs: usize) -> (Vec<Layer>, usize) {
    let mut layers = Vec::new();
    let mut channels = 1;
    for (i, &out) in plan.conv_channels.iter().take(convs).enumerate() {
        conv_bn_relu(&mut layers, i, channels, out);
        channels = out;
        if plan.maxpool_after.contains(&i) {
            layers.push(Layer::MaxPool2x2);
        }
    }
    (layers, channels)
}

pub fn build_aug_vggish_with(plan: &StackPlan, num_classes: usize) -> Result<ModelSpec> {
    if num_classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
    }
    let (mut layers, channels) = feature_stack(plan, 6);
    layers.push(Layer::GlobalPool { pool: PoolKind::Avg });
    layers.push(Layer::Dense { name: "fc1".into(), in_units: channels, out_units: plan.fc_units });
    layers.push(Layer::Relu);
    layers.push(Layer::Dense { name: CLASSIFIER.into(), in_units: plan.fc_units, out_units: num_classes });
    ModelSpec::new(ArchId::AugVggish, num_classes, layers, OutputActivation::Softmax)
}

pub fn build_fcn_vggish_with(plan: &StackPlan, num_classes: usize) -> Result<ModelSpec> {
    if num_classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
    }
    let (mut layers, mut channels) = feature_stack(plan, 6);
    layers.push(Layer::MaxPool2x2);
    for (i, &out) in plan.conv_channels.iter().enumerate().skip(6) {
        conv_bn_relu(&mut layers, i, channels, out);
        channels = out;
    }
    layers.push(Layer::Conv { name: CLASSIFIER.into(), in_channels: channels, out_channels: num_classes, kernel: 1 });
    layers.push(Layer::GlobalPool { pool: PoolKind::Avg });
    ModelSpec::new(ArchId::FcnVggish, num_classes, layers, OutputActivation::Softmax)
}

/// Aug-VGGish: VGGish convolutions with batch norm, global average pooling,
/// one 256-unit FC layer and the classifier.
pub fn build_aug_vggish(num_classes: usize) -> Result<ModelSpec> {
    build_aug_vggish_with(&StackPlan::aug_vggish(), num_classes)
}

/// FCN-VGGish: eight batch-normed 3×3 convolutions, a 1×1 classifier
/// convolution and global average pooling.
pub fn build_fcn_vggish(num_classes: usize) -> Result<ModelSpec> {
    build_fcn_vggish_with(&StackPlan::fcn_vggish(), num_classes)
}

pub fn build_arch(arch: ArchId, num_classes: usize) -> Result<ModelSpec> {
    match arch {
        ArchId::AugVggish => build_aug_vggish(num_classes),
        ArchId::FcnVggish => build_fcn_vggish(num_classes),
    }
}
