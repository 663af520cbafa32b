use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{Map, Value};

use super::container::{read_container, write_container, Container};
use super::{build_arch, ArchId, Layer, ModelSpec, OutputActivation, ParamRole, PoolKind};
use crate::audio::{LogMelPatch, FRONTEND_TAG, NUM_MEL_BANDS};
use crate::error::{Error, Result};
use crate::nn::{
    batchnorm_infer, conv2d_same, dense, global_avg_pool, global_max_pool, maxpool_2x2, relu, sigmoid, softmax,
    BatchNormParams, ConvParams, DenseParams, DEFAULT_BN_EPSILON,
};
use crate::tensor::Tensor;

/// Parameters of one layer, aligned with `ModelSpec::layers`.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeights {
    None,
    Conv(ConvParams),
    BatchNorm(BatchNormParams),
    Dense(DenseParams),
}

/// Penultimate representation consumed by the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f32>);

impl Embedding {
    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// An architecture together with all of its parameters. Immutable once
/// built; forward passes take `&self` and may run concurrently.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBundle {
    spec: ModelSpec,
    weights: Vec<LayerWeights>,
    preproc_tag: String,
    epsilon: f64,
    extra: Map<String, Value>,
}

impl WeightBundle {
    /// Assembles a bundle from named tensors, requiring exactly the tensors
    /// the spec declares with matching shapes.
    pub fn from_tensors(
        spec: ModelSpec,
        mut tensors: BTreeMap<String, Tensor>,
        preproc_tag: impl Into<String>,
        epsilon: f64,
    ) -> Result<Self> {
        let mut weights = Vec::with_capacity(spec.layers.len());
        for layer in &spec.layers {
            let base = layer.name().unwrap_or_default();
            let mut take = |role: ParamRole, shape: Vec<usize>| -> Result<Tensor> {
                let key = format!("{base}.{}", role.suffix());
                let t = tensors.remove(&key).ok_or_else(|| Error::Validation(format!("missing tensor {key}")))?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::Validation(format!(
                        "tensor {key} has shape {:?}, layer needs {shape:?}",
                        t.shape()
                    )));
                }
                if !t.is_finite() {
                    return Err(Error::Validation(format!("tensor {key} has non-finite values")));
                }
                Ok(t)
            };
            let mut params = layer.params().into_iter();
            let mut next = || {
                let (role, shape) = params.next().expect("layer declares this parameter");
                take(role, shape)
            };
            let w = match layer {
                Layer::Conv { .. } => LayerWeights::Conv(ConvParams::new(next()?, next()?)?),
                Layer::Dense { .. } => LayerWeights::Dense(DenseParams::new(next()?, next()?)?),
                Layer::BatchNorm { .. } => LayerWeights::BatchNorm(
                    BatchNormParams::new(next()?, next()?, next()?, next()?, epsilon)
                        .map_err(|e| Error::Validation(format!("{base}: {e}")))?,
                ),
                _ => LayerWeights::None,
            };
            weights.push(w);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Validation(format!("unreferenced tensor {extra}")));
        }
        Ok(Self { spec, weights, preproc_tag: preproc_tag.into(), epsilon, extra: Map::new() })
    }

    /// All weights and biases zero; batch norms are identities.
    pub fn zeros(spec: ModelSpec) -> Self {
        let epsilon = DEFAULT_BN_EPSILON;
        let weights = spec
            .layers
            .iter()
            .map(|layer| match *layer {
                Layer::Conv { in_channels, out_channels, kernel, .. } => LayerWeights::Conv(ConvParams {
                    kernels: Tensor::zeros(vec![out_channels, in_channels, kernel, kernel]),
                    bias: Tensor::zeros(vec![out_channels]),
                }),
                Layer::BatchNorm { channels, .. } => {
                    LayerWeights::BatchNorm(BatchNormParams::identity(channels, epsilon))
                }
                Layer::Dense { in_units, out_units, .. } => LayerWeights::Dense(DenseParams {
                    weights: Tensor::zeros(vec![out_units, in_units]),
                    bias: Tensor::zeros(vec![out_units]),
                }),
                _ => LayerWeights::None,
            })
            .collect();
        Self { spec, weights, preproc_tag: FRONTEND_TAG.into(), epsilon, extra: Map::new() }
    }

    /// He-uniform weights, small random biases and plausible batch-norm
    /// statistics, all driven by `seed`.
    pub fn random(spec: ModelSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |shape: Vec<usize>, lo: f32, hi: f32| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape is non-empty")
        };
        let mut bundle = Self::zeros(spec);
        for (layer, w) in bundle.spec.layers.iter().zip(&mut bundle.weights) {
            *w = match *layer {
                Layer::Conv { in_channels, out_channels, kernel, .. } => {
                    let bound = (6.0 / (in_channels * kernel * kernel) as f32).sqrt();
                    LayerWeights::Conv(ConvParams {
                        kernels: uniform(vec![out_channels, in_channels, kernel, kernel], -bound, bound),
                        bias: uniform(vec![out_channels], -0.05, 0.05),
                    })
                }
                Layer::BatchNorm { channels, .. } => LayerWeights::BatchNorm(BatchNormParams {
                    gamma: uniform(vec![channels], 0.5, 1.5),
                    beta: uniform(vec![channels], -0.2, 0.2),
                    running_mean: uniform(vec![channels], -0.2, 0.2),
                    running_var: uniform(vec![channels], 0.5, 2.0),
                    epsilon: bundle.epsilon,
                }),
                Layer::Dense { in_units, out_units, .. } => {
                    let bound = (6.0 / in_units as f32).sqrt();
                    LayerWeights::Dense(DenseParams {
                        weights: uniform(vec![out_units, in_units], -bound, bound),
                        bias: uniform(vec![out_units], -0.05, 0.05),
                    })
                }
                _ => LayerWeights::None,
            };
        }
        bundle
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[LayerWeights] {
        &self.weights
    }

    pub fn preproc_tag(&self) -> &str {
        &self.preproc_tag
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Mutable access to one layer's parameters; shapes are re-checked.
    pub fn set_layer_weights(&mut self, layer: usize, w: LayerWeights) -> Result<()> {
        let ok = match (&self.weights[layer], &w) {
            (LayerWeights::Conv(a), LayerWeights::Conv(b)) => a.kernels.shape() == b.kernels.shape(),
            (LayerWeights::Dense(a), LayerWeights::Dense(b)) => a.weights.shape() == b.weights.shape(),
            (LayerWeights::BatchNorm(a), LayerWeights::BatchNorm(b)) => a.channels() == b.channels(),
            (LayerWeights::None, LayerWeights::None) => true,
            _ => false,
        };
        if !ok {
            return Err(Error::Validation(format!("replacement weights for layer {layer} do not fit")));
        }
        self.weights[layer] = w;
        Ok(())
    }

    /// Named tensors in declaration order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        self.spec
            .layers
            .iter()
            .zip(&self.weights)
            .flat_map(|(layer, w)| {
                let base = layer.name().unwrap_or_default();
                let named: Vec<(&str, &Tensor)> = match w {
                    LayerWeights::Conv(p) => vec![("weight", &p.kernels), ("bias", &p.bias)],
                    LayerWeights::Dense(p) => vec![("weight", &p.weights), ("bias", &p.bias)],
                    LayerWeights::BatchNorm(p) => vec![
                        ("gamma", &p.gamma),
                        ("beta", &p.beta),
                        ("running_mean", &p.running_mean),
                        ("running_var", &p.running_var),
                    ],
                    LayerWeights::None => vec![],
                };
                named.into_iter().map(move |(s, t)| (format!("{base}.{s}"), t))
            })
            .collect()
    }

    fn run_layers(&self, mut x: Tensor, layers: std::ops::Range<usize>) -> Result<Tensor> {
        for i in layers {
            x = match (&self.spec.layers[i], &self.weights[i]) {
                (Layer::Conv { .. }, LayerWeights::Conv(p)) => conv2d_same(&x, p)?,
                (Layer::BatchNorm { .. }, LayerWeights::BatchNorm(p)) => batchnorm_infer(&x, p)?,
                (Layer::Relu, _) => relu(&x),
                (Layer::MaxPool2x2, _) => maxpool_2x2(&x)?,
                (Layer::GlobalPool { pool: PoolKind::Avg }, _) => global_avg_pool(&x)?,
                (Layer::GlobalPool { pool: PoolKind::Max }, _) => global_max_pool(&x)?,
                (Layer::Dense { .. }, LayerWeights::Dense(p)) => dense(&x, p)?,
                (layer, _) => return Err(Error::Validation(format!("layer {} has no weights", layer.kind()))),
            };
        }
        Ok(x)
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        match *input.shape() {
            [1, frames, NUM_MEL_BANDS] if frames >= self.spec.min_input_frames() => Ok(()),
            ref s => Err(Error::Shape(format!(
                "input must be [1, >={}, {NUM_MEL_BANDS}], got {s:?}",
                self.spec.min_input_frames()
            ))),
        }
    }

    /// Raw network output for a `[1, frames, 64]` input.
    pub fn forward_logits(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        self.run_layers(input.clone(), 0..self.spec.layers.len())
    }

    /// Class probabilities for an arbitrary-length `[1, frames, 64]` input.
    pub fn forward_probs_input(&self, input: &Tensor) -> Result<Vec<f64>> {
        Ok(self.probs_from_logits(self.forward_logits(input)?.data()))
    }

    pub fn forward_probs(&self, patch: &LogMelPatch) -> Result<Vec<f64>> {
        self.forward_probs_input(&patch.to_input())
    }

    /// Maps logits to a probability vector of length `num_classes`. A
    /// sigmoid head yields `[1 - p, p]`.
    pub fn probs_from_logits(&self, logits: &[f32]) -> Vec<f64> {
        let z: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
        match self.spec.output {
            OutputActivation::Softmax => softmax(&z),
            OutputActivation::Sigmoid => {
                let p = sigmoid(z[0]);
                vec![1.0 - p, p]
            }
        }
    }

    /// Representation just before the classifier. Spatial maps are reduced
    /// with the network's own global pooling.
    pub fn forward_embedding_input(&self, input: &Tensor) -> Result<Embedding> {
        self.check_input(input)?;
        let cls = self.spec.classifier_index()?;
        let x = self.run_layers(input.clone(), 0..cls)?;
        let x = if x.shape().len() == 3 {
            match self.final_pool() {
                PoolKind::Avg => global_avg_pool(&x)?,
                PoolKind::Max => global_max_pool(&x)?,
            }
        } else {
            x
        };
        Ok(Embedding(x.into_data()))
    }

    pub fn forward_embedding(&self, patch: &LogMelPatch) -> Result<Embedding> {
        self.forward_embedding_input(&patch.to_input())
    }

    fn final_pool(&self) -> PoolKind {
        self.spec
            .layers
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::GlobalPool { pool } => Some(*pool),
                _ => None,
            })
            .unwrap_or(PoolKind::Avg)
    }

    /// The classifier as a dense layer over embeddings. For a 1×1
    /// convolution followed by average pooling the two are equal, since
    /// both operations are linear.
    pub fn head(&self) -> Result<DenseParams> {
        let cls = self.spec.classifier_index()?;
        match &self.weights[cls] {
            LayerWeights::Dense(p) => Ok(p.clone()),
            LayerWeights::Conv(p) if p.kernel_size() == 1 && self.final_pool() == PoolKind::Avg => {
                DenseParams::new(p.kernels.clone().reshape(vec![p.out_channels(), p.in_channels()])?, p.bias.clone())
            }
            _ => Err(Error::Structure("classifier is not expressible as a dense head".into())),
        }
    }

    /// Scores an embedding with the classifier.
    pub fn classify_embedding(&self, embedding: &[f32]) -> Result<Vec<f64>> {
        let logits = dense(&Tensor::from_vec(embedding.to_vec()), &self.head()?)?;
        Ok(self.probs_from_logits(logits.data()))
    }

    /// Copy of this bundle with the classifier replaced by a dense head.
    pub fn with_head(&self, head: &DenseParams) -> Result<Self> {
        let cls = self.spec.classifier_index()?;
        let current = self.head()?;
        if current.weights.shape() != head.weights.shape() {
            return Err(Error::Shape(format!(
                "head {:?} does not fit classifier {:?}",
                head.weights.shape(),
                current.weights.shape()
            )));
        }
        let mut out = self.clone();
        out.weights[cls] = match &self.weights[cls] {
            LayerWeights::Dense(_) => LayerWeights::Dense(head.clone()),
            LayerWeights::Conv(p) => LayerWeights::Conv(ConvParams::new(
                head.weights.clone().reshape(p.kernels.shape().to_vec())?,
                head.bias.clone(),
            )?),
            _ => unreachable!("head() accepted the classifier"),
        };
        Ok(out)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(self.spec.arch_id.as_str(), self.spec.num_classes, self.preproc_tag.clone());
        c.epsilon = Some(self.epsilon);
        c.extra = self.extra.clone();
        c.extra.insert("layers".into(), serde_json::to_value(&self.spec.layers).expect("layers serialize"));
        c.extra.insert("output".into(), serde_json::to_value(self.spec.output).expect("output serializes"));
        c.tensors = self.tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        c
    }

    /// Rebuilds a bundle from a decoded container. The `layers` header field
    /// wins when present; otherwise the architecture is rebuilt from
    /// `arch_id` and `num_classes`.
    pub fn from_container(c: Container) -> Result<Self> {
        let arch =
            ArchId::parse(&c.arch_id).ok_or_else(|| Error::Validation(format!("unknown arch_id {:?}", c.arch_id)))?;
        let mut extra = c.extra;
        let output: OutputActivation = match extra.remove("output") {
            Some(v) => serde_json::from_value(v).map_err(|e| Error::Validation(format!("output: {e}")))?,
            None => OutputActivation::Softmax,
        };
        let spec = match extra.remove("layers") {
            Some(v) => {
                let layers: Vec<Layer> =
                    serde_json::from_value(v).map_err(|e| Error::Validation(format!("layers: {e}")))?;
                ModelSpec::new(arch, c.num_classes, layers, output)
            }
            None => build_arch(arch, c.num_classes),
        }
        .map_err(|e| Error::Validation(e.to_string()))?;
        if c.preproc_tag != FRONTEND_TAG {
            return Err(Error::Validation(format!(
                "bundle expects front end {:?}, this build provides {FRONTEND_TAG:?}",
                c.preproc_tag
            )));
        }
        let mut map = BTreeMap::new();
        for (name, t) in c.tensors {
            if map.insert(name.clone(), t).is_some() {
                return Err(Error::Validation(format!("duplicate tensor {name}")));
            }
        }
        let mut bundle = Self::from_tensors(spec, map, c.preproc_tag, c.epsilon.unwrap_or(DEFAULT_BN_EPSILON))?;
        bundle.extra = extra;
        Ok(bundle)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        write_container(&self.to_container())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(read_container(bytes)?)
    }
}

pub fn save_bundle(bundle: &WeightBundle, path: &Path) -> Result<()> {
    std::fs::write(path, bundle.to_bytes()?)?;
    Ok(())
}

pub fn load_bundle(path: &Path) -> Result<WeightBundle> {
    WeightBundle::from_bytes(&std::fs::read(path)?)
}

/// Absorbs every inference-mode batch norm into the convolution before it:
/// `kernel' = kernel * s` and `bias' = (bias - mean) * s + beta` with
/// `s = gamma / sqrt(var + eps)`.
pub fn fold_batchnorm(bundle: &WeightBundle) -> Result<WeightBundle> {
    let mut layers: Vec<Layer> = Vec::new();
    let mut weights: Vec<LayerWeights> = Vec::new();
    for (layer, w) in bundle.spec.layers.iter().zip(&bundle.weights) {
        let LayerWeights::BatchNorm(bn) = w else {
            layers.push(layer.clone());
            weights.push(w.clone());
            continue;
        };
        let Some(LayerWeights::Conv(conv)) = weights.last_mut() else {
            return Err(Error::Structure(format!(
                "{} does not directly follow a convolution",
                layer.name().unwrap_or("batch norm")
            )));
        };
        let per_out = conv.kernels.len() / conv.out_channels();
        let affine = bn.affine();
        for (o, &(scale, shift)) in affine.iter().enumerate() {
            for k in &mut conv.kernels.data_mut()[o * per_out..(o + 1) * per_out] {
                *k = (*k as f64 * scale) as f32;
            }
            let b = &mut conv.bias.data_mut()[o];
            *b = (*b as f64 * scale + shift) as f32;
        }
    }
    let spec = ModelSpec::new(bundle.spec.arch_id, bundle.spec.num_classes, layers, bundle.spec.output)?;
    Ok(WeightBundle {
        spec,
        weights,
        preproc_tag: bundle.preproc_tag.clone(),
        epsilon: bundle.epsilon,
        extra: bundle.extra.clone(),
    })
}
