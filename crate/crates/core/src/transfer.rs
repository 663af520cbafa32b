//! Transfer to a new task with a frozen backbone: clip embeddings are
//! extracted once, a classifier head is trained on them by mini-batch SGD,
//! and k-fold cross-validation reports accuracy and macro F1.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::audio::{
    decode_wav, extract_patches, read_wav, resample_to_16k, AudioClip, LogMelFrontend, FRONTEND_TAG, PATCH_FRAMES,
};
use crate::error::{Error, Result};
use crate::metrics::accuracy_f1;
use crate::model::{Container, Embedding, WeightBundle};
use crate::nn::{cross_entropy_grad, dense_backward, dense_f64, softmax, DenseParams};
use crate::tensor::Tensor;

/// `arch_id` recorded for caches not produced by a network.
pub const SYNTHETIC_SOURCE: &str = "synthetic";
/// Header field holding `clip_id -> {fold, label}`.
const CLIPS_FIELD: &str = "clips";
const CONTENT_FIELD: &str = "content";
const CONTENT_EMBEDDINGS: &str = "embedding_cache";
/// How clip embeddings are formed from patch embeddings.
pub const CLIP_AGGREGATION: &str = "mean_patch_embedding";

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingItem {
    pub clip_id: String,
    pub fold: usize,
    pub label: usize,
    pub embedding: Vec<f32>,
}

/// Labeled clip embeddings, kept sorted by clip id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    items: Vec<EmbeddingItem>,
    dim: usize,
    num_classes: usize,
    /// Architecture that produced the embeddings.
    pub source_arch: String,
}

impl EmbeddingSet {
    pub fn new(mut items: Vec<EmbeddingItem>, dim: usize, num_classes: usize) -> Result<Self> {
        if dim == 0 || num_classes < 2 {
            return Err(Error::Config(format!("need dim >= 1 and >= 2 classes, got {dim} and {num_classes}")));
        }
        let mut ids = BTreeSet::new();
        for it in &items {
            if it.embedding.len() != dim {
                return Err(Error::Shape(format!(
                    "{}: embedding has {} values, expected {dim}",
                    it.clip_id,
                    it.embedding.len()
                )));
            }
            if it.label >= num_classes {
                return Err(Error::Config(format!("{}: label {} outside {num_classes} classes", it.clip_id, it.label)));
            }
            if it.fold == 0 {
                return Err(Error::Config(format!("{}: folds are numbered from 1", it.clip_id)));
            }
            if !ids.insert(it.clip_id.as_str()) {
                return Err(Error::Config(format!("duplicate clip id {}", it.clip_id)));
            }
        }
        items.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
        Ok(Self { items, dim, num_classes, source_arch: SYNTHETIC_SOURCE.into() })
    }

    pub fn items(&self) -> &[EmbeddingItem] {
        &self.items
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn folds(&self) -> BTreeSet<usize> {
        self.items.iter().map(|i| i.fold).collect()
    }

    /// CSNW cache: one `[dim]` tensor per clip plus a `clips` header map.
    pub fn to_container(&self) -> Container {
        let mut c = Container::new(self.source_arch.clone(), self.num_classes, FRONTEND_TAG);
        c.extra.insert(CONTENT_FIELD.into(), Value::String(CONTENT_EMBEDDINGS.into()));
        let clips: Map<String, Value> =
            self.items.iter().map(|it| (it.clip_id.clone(), json!({"fold": it.fold, "label": it.label}))).collect();
        c.extra.insert(CLIPS_FIELD.into(), Value::Object(clips));
        c.tensors = self.items.iter().map(|it| (it.clip_id.clone(), Tensor::from_vec(it.embedding.clone()))).collect();
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.preproc_tag != FRONTEND_TAG {
            return Err(Error::Validation(format!("cache built with front end {:?}", c.preproc_tag)));
        }
        let clips = c
            .extra
            .get(CLIPS_FIELD)
            .and_then(Value::as_object)
            .ok_or_else(|| Error::Validation("embedding cache has no clips map".into()))?;
        if clips.len() != c.tensors.len() {
            return Err(Error::Validation(format!("{} clip entries for {} tensors", clips.len(), c.tensors.len())));
        }
        let dim = c.tensors.first().map_or(1, |(_, t)| t.len());
        let mut items = Vec::with_capacity(c.tensors.len());
        for (name, t) in &c.tensors {
            let meta = clips.get(name).ok_or_else(|| Error::Validation(format!("no fold/label for clip {name}")))?;
            let field = |k: &str| {
                meta.get(k)
                    .and_then(Value::as_u64)
                    .ok_or_else(|| Error::Validation(format!("clip {name}: missing {k}")))
            };
            if t.shape().len() != 1 {
                return Err(Error::Validation(format!("clip {name}: embedding must be 1-D")));
            }
            items.push(EmbeddingItem {
                clip_id: name.clone(),
                fold: field("fold")? as usize,
                label: field("label")? as usize,
                embedding: t.data().to_vec(),
            });
        }
        let mut set = Self::new(items, dim, c.num_classes).map_err(|e| Error::Validation(e.to_string()))?;
        set.source_arch = c.arch_id.clone();
        Ok(set)
    }
}

/// Where a clip's audio comes from.
#[derive(Debug, Clone)]
pub enum AudioSource {
    Path(PathBuf),
    Wav(Vec<u8>),
    Clip(AudioClip),
}

#[derive(Debug, Clone)]
pub struct LabeledClip {
    pub clip_id: String,
    pub fold: usize,
    pub label: usize,
    pub audio: AudioSource,
}

#[derive(Debug)]
pub struct Extraction {
    pub set: EmbeddingSet,
    /// Clips that could not be embedded, with the reason.
    pub failures: Vec<(String, Error)>,
}

/// Embeddings of every 96-frame patch of a clip (hop 96, tail padding for
/// clips under one patch).
pub fn patch_embeddings(frontend: &LogMelFrontend, bundle: &WeightBundle, clip: &AudioClip) -> Result<Vec<Embedding>> {
    let spec = frontend.spectrogram(&resample_to_16k(clip))?;
    extract_patches(&spec, PATCH_FRAMES, true)?.iter().map(|p| bundle.forward_embedding(p)).collect()
}

/// Mean of a clip's patch embeddings.
pub fn clip_embedding(frontend: &LogMelFrontend, bundle: &WeightBundle, clip: &AudioClip) -> Result<Vec<f32>> {
    let patches = patch_embeddings(frontend, bundle, clip)?;
    let dim = patches[0].len();
    let mut sum = vec![0.0f64; dim];
    for e in &patches {
        for (s, &v) in sum.iter_mut().zip(e.values()) {
            *s += v as f64;
        }
    }
    Ok(sum.into_iter().map(|s| (s / patches.len() as f64) as f32).collect())
}

/// Runs the frozen backbone over clips labeled for a `num_classes` target
/// task. A clip that fails to load or carries an invalid label is reported
/// in `failures` and does not abort the batch.
pub fn extract_embeddings(bundle: &WeightBundle, clips: &[LabeledClip], num_classes: usize) -> Result<Extraction> {
    let frontend = LogMelFrontend::new();
    let mut items = Vec::new();
    let mut failures = Vec::new();
    let mut seen = BTreeSet::new();
    for c in clips {
        if c.label >= num_classes || c.fold == 0 {
            let why = format!("label {} / fold {} invalid for {num_classes} classes", c.label, c.fold);
            failures.push((c.clip_id.clone(), Error::Config(why)));
            continue;
        }
        if !seen.insert(c.clip_id.as_str()) {
            failures.push((c.clip_id.clone(), Error::Config(format!("duplicate clip id {}", c.clip_id))));
            continue;
        }
        let audio = match &c.audio {
            AudioSource::Path(p) => read_wav(p),
            AudioSource::Wav(bytes) => decode_wav(bytes, &c.clip_id),
            AudioSource::Clip(clip) => Ok(clip.clone()),
        };
        match audio.and_then(|a| clip_embedding(&frontend, bundle, &a)) {
            Ok(embedding) => {
                items.push(EmbeddingItem { clip_id: c.clip_id.clone(), fold: c.fold, label: c.label, embedding })
            }
            Err(e) => failures.push((c.clip_id.clone(), e)),
        }
    }
    failures.sort_by(|a, b| a.0.cmp(&b.0));
    let mut set = EmbeddingSet::new(items, bundle.spec().embedding_dim()?, num_classes)?;
    set.source_arch = bundle.spec().arch_id.to_string();
    Ok(Extraction { set, failures })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// L2 penalty on weights (not biases), `0.5 * l2 * |W|^2`.
    pub l2: f64,
    /// Optional ReLU hidden layer between embedding and classifier.
    pub hidden_units: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 0.01, batch_size: 32, epochs: 50, seed: 42, l2: 1e-4, hidden_units: None }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be at least 1".into()));
        }
        if self.l2.is_nan() || self.l2 < 0.0 {
            return Err(Error::Config(format!("l2 must be >= 0, got {}", self.l2)));
        }
        if self.hidden_units == Some(0) {
            return Err(Error::Config("hidden layer needs at least one unit".into()));
        }
        Ok(())
    }
}

/// Anything that maps an embedding to class probabilities.
pub trait Classifier {
    fn predict_proba(&self, embedding: &[f32]) -> Vec<f64>;
}

/// Dense layers with ReLU between them, softmax on top.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub layers: Vec<DenseParams>,
}

impl Classifier for Head {
    fn predict_proba(&self, embedding: &[f32]) -> Vec<f64> {
        let mut x: Vec<f64> = embedding.iter().map(|&v| v as f64).collect();
        for (i, l) in self.layers.iter().enumerate() {
            x = dense_f64(&x, l.weights.data(), l.bias.data());
            if i + 1 < self.layers.len() {
                x.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        softmax(&x)
    }
}

/// `arch_id` of a head stored without a backbone.
pub const HEAD_ARCH: &str = "dense_head";

impl Head {
    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, DenseParams::in_units)
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, DenseParams::out_units)
    }

    /// Layers stored as `head{i}.weight` / `head{i}.bias`.
    pub fn to_container(&self) -> Container {
        let mut c = Container::new(HEAD_ARCH, self.num_classes(), FRONTEND_TAG);
        for (i, l) in self.layers.iter().enumerate() {
            c.tensors.push((format!("head{i}.weight"), l.weights.clone()));
            c.tensors.push((format!("head{i}.bias"), l.bias.clone()));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.arch_id != HEAD_ARCH {
            return Err(Error::Validation(format!("expected a {HEAD_ARCH} container, found {}", c.arch_id)));
        }
        if c.tensors.is_empty() || !c.tensors.len().is_multiple_of(2) {
            return Err(Error::Validation(format!("{} tensors do not form weight/bias pairs", c.tensors.len())));
        }
        let mut layers: Vec<DenseParams> = Vec::new();
        for i in 0..c.tensors.len() / 2 {
            let get = |suffix: &str| {
                let name = format!("head{i}.{suffix}");
                c.tensor(&name).cloned().ok_or_else(|| Error::Validation(format!("missing tensor {name}")))
            };
            let layer = DenseParams::new(get("weight")?, get("bias")?).map_err(|e| Error::Validation(e.to_string()))?;
            if let Some(prev) = layers.last() {
                if prev.out_units() != layer.in_units() {
                    return Err(Error::Validation(format!(
                        "head{i} expects {} inputs, previous layer gives {}",
                        layer.in_units(),
                        prev.out_units()
                    )));
                }
            }
            layers.push(layer);
        }
        let head = Self { layers };
        if head.num_classes() != c.num_classes {
            return Err(Error::Validation(format!(
                "header says {} classes, head emits {}",
                c.num_classes,
                head.num_classes()
            )));
        }
        Ok(head)
    }
}

#[derive(Debug, Clone)]
pub struct TrainedHead {
    pub head: Head,
    /// Training objective (mean cross-entropy plus L2) after each epoch.
    pub epoch_losses: Vec<f64>,
}

struct Layer64 {
    w: Vec<f64>,
    b: Vec<f64>,
    n_in: usize,
}

impl Layer64 {
    fn to_params(&self) -> DenseParams {
        let n_out = self.b.len();
        DenseParams::new(
            Tensor::new(vec![n_out, self.n_in], self.w.iter().map(|&v| v as f32).collect()).expect("sized"),
            Tensor::from_vec(self.b.iter().map(|&v| v as f32).collect()),
        )
        .expect("consistent")
    }
}

struct HeadState {
    layers: Vec<Layer64>,
}

impl HeadState {
    fn init(widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| {
                let (n_in, n_out) = (w[0], w[1]);
                let bound = (6.0 / (n_in + n_out) as f64).sqrt() as f32;
                // Drawn as f32 so the initial head is exactly representable.
                let w = (0..n_in * n_out).map(|_| rng.gen_range(-bound..bound) as f64).collect();
                Layer64 { w, b: vec![0.0; n_out], n_in }
            })
            .collect();
        Self { layers }
    }

    /// Activations of every layer, input first.
    fn forward(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = dense_f64(acts.last().unwrap(), &l.w, &l.b);
            if i + 1 < self.layers.len() {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }

    fn l2_penalty(&self, l2: f64) -> f64 {
        0.5 * l2 * self.layers.iter().flat_map(|l| &l.w).map(|w| w * w).sum::<f64>()
    }

    /// Mean cross-entropy over `items` plus the L2 penalty.
    fn objective(&self, items: &[&EmbeddingItem], l2: f64) -> f64 {
        let ce: f64 = items
            .iter()
            .map(|it| {
                let x: Vec<f64> = it.embedding.iter().map(|&v| v as f64).collect();
                let acts = self.forward(&x);
                cross_entropy_grad(acts.last().unwrap(), it.label).expect("label checked").0
            })
            .sum();
        ce / items.len() as f64 + self.l2_penalty(l2)
    }

    /// Parameter gradients of the objective over a batch, as
    /// `(dW, db)` per layer.
    fn gradients(&self, batch: &[&EmbeddingItem], l2: f64) -> Vec<(Vec<f64>, Vec<f64>)> {
        let mut grads: Vec<(Vec<f64>, Vec<f64>)> =
            self.layers.iter().map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()])).collect();
        for it in batch {
            let x: Vec<f64> = it.embedding.iter().map(|&v| v as f64).collect();
            let acts = self.forward(&x);
            let (_, mut delta) = cross_entropy_grad(acts.last().unwrap(), it.label).expect("label checked");
            for (i, l) in self.layers.iter().enumerate().rev() {
                let (dw, db, dx) = dense_backward(&acts[i], &l.w, &delta);
                grads[i].0.iter_mut().zip(dw).for_each(|(g, d)| *g += d);
                grads[i].1.iter_mut().zip(db).for_each(|(g, d)| *g += d);
                // Back through the ReLU that produced acts[i].
                delta = dx.into_iter().zip(&acts[i]).map(|(d, &a)| if a > 0.0 { d } else { 0.0 }).collect();
            }
        }
        let n = batch.len() as f64;
        for ((dw, db), l) in grads.iter_mut().zip(&self.layers) {
            dw.iter_mut().zip(&l.w).for_each(|(g, w)| *g = *g / n + l2 * w);
            db.iter_mut().for_each(|g| *g /= n);
        }
        grads
    }
}

fn train_items(items: &[&EmbeddingItem], dim: usize, num_classes: usize, cfg: &TrainConfig) -> Result<TrainedHead> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::Config("cannot train on an empty set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut widths = vec![dim];
    widths.extend(cfg.hidden_units);
    widths.push(num_classes);
    let mut state = HeadState::init(&widths, &mut rng);

    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&EmbeddingItem> = chunk.iter().map(|&i| items[i]).collect();
            let grads = state.gradients(&batch, cfg.l2);
            for (l, (dw, db)) in state.layers.iter_mut().zip(grads) {
                l.w.iter_mut().zip(dw).for_each(|(w, g)| *w -= cfg.learning_rate * g);
                l.b.iter_mut().zip(db).for_each(|(b, g)| *b -= cfg.learning_rate * g);
            }
        }
        epoch_losses.push(state.objective(items, cfg.l2));
    }
    Ok(TrainedHead { head: Head { layers: state.layers.iter().map(Layer64::to_params).collect() }, epoch_losses })
}

/// Trains a softmax head on every item of `train` by mini-batch SGD.
/// Initialization and shuffling depend only on `cfg.seed`.
pub fn train_head(train: &EmbeddingSet, cfg: &TrainConfig) -> Result<TrainedHead> {
    let items: Vec<&EmbeddingItem> = train.items.iter().collect();
    train_items(&items, train.dim, train.num_classes, cfg)
}

/// Objective value and flattened parameter gradient of a head on a batch;
/// exposed for gradient checking.
pub fn head_objective_and_gradient(head: &Head, batch: &[EmbeddingItem], l2: f64) -> (f64, Vec<f64>) {
    let state = HeadState {
        layers: head
            .layers
            .iter()
            .map(|p| Layer64 {
                w: p.weights.data().iter().map(|&v| v as f64).collect(),
                b: p.bias.data().iter().map(|&v| v as f64).collect(),
                n_in: p.in_units(),
            })
            .collect(),
    };
    let refs: Vec<&EmbeddingItem> = batch.iter().collect();
    let grads = state.gradients(&refs, l2);
    let flat = grads.into_iter().flat_map(|(w, b)| w.into_iter().chain(b)).collect();
    (state.objective(&refs, l2), flat)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClipPrediction {
    pub clip_id: String,
    pub predicted: usize,
    pub true_label: usize,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldResult {
    pub fold: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub train_size: usize,
    pub per_clip_scores: Vec<ClipPrediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvReport {
    pub k: usize,
    pub folds: Vec<FoldResult>,
    /// Unweighted mean over folds.
    pub mean_accuracy: f64,
    pub mean_macro_f1: f64,
}

fn argmax(p: &[f64]) -> usize {
    // First maximum wins ties.
    p.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best }).0
}

/// k-fold cross-validation with a caller-supplied training routine. For
/// fold `f`, `fit` sees only items whose fold differs from `f`.
pub fn run_cv_with<C, F>(set: &EmbeddingSet, k: usize, mut fit: F) -> Result<CvReport>
where
    C: Classifier,
    F: FnMut(&[&EmbeddingItem]) -> Result<C>,
{
    if k < 2 {
        return Err(Error::Config(format!("need k >= 2, got {k}")));
    }
    if let Some(bad) = set.items.iter().find(|it| it.fold > k) {
        return Err(Error::Config(format!("clip {} has fold {} outside 1..={k}", bad.clip_id, bad.fold)));
    }
    let present = set.folds();
    if let Some(missing) = (1..=k).find(|f| !present.contains(f)) {
        return Err(Error::Config(format!("fold {missing} has no items")));
    }

    let mut folds = Vec::with_capacity(k);
    for fold in 1..=k {
        let (test, train): (Vec<&EmbeddingItem>, Vec<&EmbeddingItem>) =
            set.items.iter().partition(|it| it.fold == fold);
        let model = fit(&train)?;
        let per_clip_scores: Vec<ClipPrediction> = test
            .iter()
            .map(|it| {
                let probabilities = model.predict_proba(&it.embedding);
                ClipPrediction {
                    clip_id: it.clip_id.clone(),
                    predicted: argmax(&probabilities),
                    true_label: it.label,
                    probabilities,
                }
            })
            .collect();
        let pairs: Vec<(usize, usize)> = per_clip_scores.iter().map(|c| (c.predicted, c.true_label)).collect();
        let (accuracy, macro_f1) = accuracy_f1(&pairs, set.num_classes)?;
        folds.push(FoldResult { fold, accuracy, macro_f1, train_size: train.len(), per_clip_scores });
    }
    let mean_accuracy = folds.iter().map(|f| f.accuracy).sum::<f64>() / k as f64;
    let mean_macro_f1 = folds.iter().map(|f| f.macro_f1).sum::<f64>() / k as f64;
    Ok(CvReport { k, folds, mean_accuracy, mean_macro_f1 })
}

/// k-fold cross-validation of [`train_head`].
pub fn run_cv(set: &EmbeddingSet, k: usize, cfg: &TrainConfig) -> Result<CvReport> {
    run_cv_with(set, k, |train| train_items(train, set.dim, set.num_classes, cfg).map(|t| t.head))
}

impl CvReport {
    /// `fold,accuracy,macro_f1,n_test,n_train` rows and a final mean row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fold,accuracy,macro_f1,n_test,n_train\n");
        for f in &self.folds {
            out += &format!("{},{},{},{},{}\n", f.fold, f.accuracy, f.macro_f1, f.per_clip_scores.len(), f.train_size);
        }
        out += &format!("mean,{},{},,\n", self.mean_accuracy, self.mean_macro_f1);
        out
    }

    /// Report body without per-clip probability vectors.
    pub fn summary_json(&self) -> Value {
        json!({
            "k": self.k,
            "mean_accuracy": self.mean_accuracy,
            "mean_macro_f1": self.mean_macro_f1,
            "f1_average": "macro",
            "clip_aggregation": CLIP_AGGREGATION,
            "folds": self.folds.iter().map(|f| json!({
                "fold": f.fold,
                "accuracy": f.accuracy,
                "macro_f1": f.macro_f1,
                "n_test": f.per_clip_scores.len(),
                "n_train": f.train_size,
                "predictions": f.per_clip_scores.iter()
                    .map(|c| json!([c.clip_id, c.predicted, c.true_label]))
                    .collect::<Vec<_>>(),
            })).collect::<Vec<_>>(),
        })
    }
}

/// Parsed ESC-50 file name, `FOLD-SOURCE-TAKE-CLASS.wav`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Esc50Name {
    pub fold: usize,
    pub source: String,
    pub take: char,
    pub class: usize,
}

pub fn parse_esc50_name(filename: &str) -> Result<Esc50Name> {
    let bad = || Error::Parse(format!("{filename:?} is not FOLD-SOURCE-TAKE-CLASS.wav"));
    let stem = filename.strip_suffix(".wav").ok_or_else(bad)?;
    let parts: Vec<&str> = stem.split('-').collect();
    let [fold, source, take, class] = parts[..] else {
        return Err(bad());
    };
    let fold: usize = fold.parse().map_err(|_| bad())?;
    if !(1..=5).contains(&fold) {
        return Err(bad());
    }
    if source.is_empty() || !source.chars().all(|c| c.is_ascii_alphanumeric()) {
        return Err(bad());
    }
    let mut take_chars = take.chars();
    let take = match (take_chars.next(), take_chars.next()) {
        (Some(t), None) if t.is_ascii_uppercase() => t,
        _ => return Err(bad()),
    };
    if class.is_empty() || !class.chars().all(|c| c.is_ascii_digit()) {
        return Err(bad());
    }
    let class: usize = class.parse().map_err(|_| bad())?;
    if class >= 50 {
        return Err(bad());
    }
    Ok(Esc50Name { fold, source: source.to_string(), take, class })
}

/// Cross-validation fold (1-5) encoded in an ESC-50 file name.
pub fn assign_esc50_fold(filename: &str) -> Result<usize> {
    parse_esc50_name(filename).map(|n| n.fold)
}

/// Synthetic embeddings where class `c` sits on its own axis (with a sign
/// flip for classes beyond `dim`) plus small noise; linearly separable.
pub fn separable_embeddings(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    folds: usize,
    seed: u64,
) -> Result<EmbeddingSet> {
    if dim * 2 < num_classes {
        return Err(Error::Config(format!("{dim} dimensions cannot host {num_classes} signed axes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(num_classes * per_class);
    for class in 0..num_classes {
        for j in 0..per_class {
            let mut e: Vec<f32> = (0..dim).map(|_| rng.gen_range(-0.1..0.1)).collect();
            let (axis, sign) = if class < dim { (class, 1.0) } else { (class - dim, -1.0) };
            e[axis] += sign;
            items.push(EmbeddingItem {
                clip_id: format!("c{class:03}-{j:03}"),
                fold: j % folds + 1,
                label: class,
                embedding: e,
            });
        }
    }
    EmbeddingSet::new(items, dim, num_classes)
}

/// Per-fold breakdown keyed by fold id.
pub fn fold_sizes(set: &EmbeddingSet) -> BTreeMap<usize, usize> {
    let mut m = BTreeMap::new();
    for it in &set.items {
        *m.entry(it.fold).or_insert(0) += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_aug_vggish_with, StackPlan};

    fn two_blobs() -> EmbeddingSet {
        let mut items = Vec::new();
        for i in 0..100 {
            let mut e = vec![0.0f32; 4];
            e[0] = if i < 50 { 1.0 } else { -1.0 };
            e[1 + i % 3] = 0.05 * (i % 7) as f32;
            items.push(EmbeddingItem {
                clip_id: format!("x{i:03}"),
                fold: i % 5 + 1,
                label: (i >= 50) as usize,
                embedding: e,
            });
        }
        EmbeddingSet::new(items, 4, 2).unwrap()
    }

    fn train_accuracy(set: &EmbeddingSet, head: &Head) -> f64 {
        let correct = set.items().iter().filter(|it| argmax(&head.predict_proba(&it.embedding)) == it.label).count();
        correct as f64 / set.len() as f64
    }

    #[test]
    fn separable_two_class_reaches_full_accuracy() {
        let set = two_blobs();
        let cfg = TrainConfig { learning_rate: 0.1, epochs: 20, ..TrainConfig::default() };
        let trained = train_head(&set, &cfg).unwrap();
        assert_eq!(train_accuracy(&set, &trained.head), 1.0);
    }

    #[test]
    fn zero_learning_rate_keeps_initialization() {
        let set = two_blobs();
        let cfg = TrainConfig { learning_rate: 0.0, epochs: 3, ..TrainConfig::default() };
        let a = train_head(&set, &cfg).unwrap().head;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let init = HeadState::init(&[4, 2], &mut rng);
        assert_eq!(a.layers[0], init.layers[0].to_params());
    }

    #[test]
    fn same_seed_same_parameters() {
        let set = two_blobs();
        let cfg = TrainConfig { hidden_units: Some(8), ..TrainConfig::default() };
        let a = train_head(&set, &cfg).unwrap();
        let b = train_head(&set, &cfg).unwrap();
        assert_eq!(a.head, b.head);
        assert_eq!(a.epoch_losses, b.epoch_losses);
        let c = train_head(&set, &TrainConfig { seed: 7, ..cfg }).unwrap();
        assert_ne!(a.head, c.head);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]
        #[test]
        fn input_order_does_not_matter(shuffle_seed in proptest::prelude::any::<u64>()) {
            let set = two_blobs();
            let mut items = set.items().to_vec();
            items.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
            let other = EmbeddingSet::new(items, 4, 2).unwrap();
            let cfg = TrainConfig { epochs: 5, ..TrainConfig::default() };
            proptest::prop_assert_eq!(train_head(&set, &cfg).unwrap().head, train_head(&other, &cfg).unwrap().head);
        }
    }

    #[test]
    fn full_batch_loss_is_non_increasing() {
        let set = separable_embeddings(5, 20, 8, 5, 3).unwrap();
        // Unit-norm-ish embeddings, small step, one batch per epoch.
        let cfg = TrainConfig { learning_rate: 1e-3, batch_size: set.len(), epochs: 40, ..TrainConfig::default() };
        let losses = train_head(&set, &cfg).unwrap().epoch_losses;
        assert!(losses.windows(2).all(|w| w[1] <= w[0]), "{losses:?}");
    }

    #[test]
    fn empty_and_invalid_configs() {
        let empty = EmbeddingSet::new(vec![], 3, 2).unwrap();
        assert!(matches!(train_head(&empty, &TrainConfig::default()), Err(Error::Config(_))));
        let set = two_blobs();
        for cfg in [
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { learning_rate: -1.0, ..TrainConfig::default() },
            TrainConfig { l2: -0.1, ..TrainConfig::default() },
        ] {
            assert!(matches!(train_head(&set, &cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let set = separable_embeddings(6, 3, 5, 3, 9).unwrap();
        let cfg = TrainConfig { epochs: 2, hidden_units: Some(7), ..TrainConfig::default() };
        let head = train_head(&set, &cfg).unwrap().head;
        let batch: Vec<EmbeddingItem> = set.items()[..8].to_vec();
        let l2 = 0.01;
        let (_, grad) = head_objective_and_gradient(&head, &batch, l2);
        // Perturb in f64 through a copy of the state to avoid f32 rounding.
        let mut flat_idx = 0;
        let h = 1e-4;
        let base: Vec<(Vec<f64>, Vec<f64>)> = head
            .layers
            .iter()
            .map(|l| {
                (
                    l.weights.data().iter().map(|&v| v as f64).collect(),
                    l.bias.data().iter().map(|&v| v as f64).collect(),
                )
            })
            .collect();
        let objective = |params: &[(Vec<f64>, Vec<f64>)]| {
            let state = HeadState {
                layers: params
                    .iter()
                    .zip(&head.layers)
                    .map(|((w, b), l)| Layer64 { w: w.clone(), b: b.clone(), n_in: l.in_units() })
                    .collect(),
            };
            let refs: Vec<&EmbeddingItem> = batch.iter().collect();
            state.objective(&refs, l2)
        };
        for li in 0..base.len() {
            for which in 0..2 {
                let n = if which == 0 { base[li].0.len() } else { base[li].1.len() };
                for j in 0..n {
                    let mut up = base.clone();
                    let mut dn = base.clone();
                    if which == 0 {
                        up[li].0[j] += h;
                        dn[li].0[j] -= h;
                    } else {
                        up[li].1[j] += h;
                        dn[li].1[j] -= h;
                    }
                    let fd = (objective(&up) - objective(&dn)) / (2.0 * h);
                    let g = grad[flat_idx];
                    assert!((fd - g).abs() <= 1e-4 * g.abs().max(1e-2), "param {flat_idx}: {fd} vs {g}");
                    flat_idx += 1;
                }
            }
        }
        assert_eq!(flat_idx, grad.len());
    }

    struct Constant(usize, usize);
    impl Classifier for Constant {
        fn predict_proba(&self, _: &[f32]) -> Vec<f64> {
            let mut p = vec![0.0; self.1];
            p[self.0] = 1.0;
            p
        }
    }

    #[test]
    fn constant_predictor_scores_base_rate() {
        let set = separable_embeddings(50, 40, 32, 5, 1).unwrap();
        let report = run_cv_with(&set, 5, |_| Ok(Constant(0, 50))).unwrap();
        for f in &report.folds {
            assert_eq!(f.per_clip_scores.len(), 400);
            assert!((f.accuracy - 0.02).abs() < 1e-12);
        }
    }

    #[test]
    fn cv_never_tests_on_training_clips() {
        let set = separable_embeddings(4, 10, 4, 5, 2).unwrap();
        let mut train_sets: Vec<BTreeSet<String>> = Vec::new();
        let report = run_cv_with(&set, 5, |train| {
            train_sets.push(train.iter().map(|it| it.clip_id.clone()).collect());
            Ok(Constant(0, 4))
        })
        .unwrap();
        for (fold, train) in report.folds.iter().zip(&train_sets) {
            assert!(fold.per_clip_scores.iter().all(|c| !train.contains(&c.clip_id)));
            assert_eq!(fold.per_clip_scores.len() + train.len(), set.len());
        }
    }

    #[test]
    fn separable_cv_is_perfect() {
        let set = separable_embeddings(10, 10, 10, 5, 4).unwrap();
        let cfg = TrainConfig { learning_rate: 0.5, epochs: 100, ..TrainConfig::default() };
        let report = run_cv(&set, 5, &cfg).unwrap();
        assert_eq!(report.mean_accuracy, 1.0);
        for f in &report.folds {
            assert_eq!(
                f.accuracy,
                f.per_clip_scores.iter().filter(|c| c.predicted == c.true_label).count() as f64
                    / f.per_clip_scores.len() as f64
            );
        }
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.lines().last().unwrap().starts_with("mean,1,"));
    }

    #[test]
    fn cv_fold_errors() {
        let mut items = separable_embeddings(2, 8, 2, 4, 0).unwrap().items().to_vec();
        let set = EmbeddingSet::new(items.clone(), 2, 2).unwrap();
        assert!(matches!(run_cv(&set, 5, &TrainConfig::default()), Err(Error::Config(_))));
        items[0].fold = 9;
        let set = EmbeddingSet::new(items, 2, 2).unwrap();
        assert!(matches!(run_cv(&set, 4, &TrainConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn head_container_round_trip() {
        let set = separable_embeddings(3, 4, 5, 2, 8).unwrap();
        let cfg = TrainConfig { hidden_units: Some(6), epochs: 2, ..TrainConfig::default() };
        let head = train_head(&set, &cfg).unwrap().head;
        let bytes = crate::model::write_container(&head.to_container()).unwrap();
        let back = Head::from_container(&crate::model::read_container(&bytes).unwrap()).unwrap();
        assert_eq!(back, head);
        assert_eq!((back.input_dim(), back.num_classes()), (5, 3));
    }

    #[test]
    fn esc50_names() {
        assert_eq!(assign_esc50_fold("1-100032-A-0.wav").unwrap(), 1);
        assert_eq!(assign_esc50_fold("5-9032-A-49.wav").unwrap(), 5);
        let n = parse_esc50_name("3-118194-A-41.wav").unwrap();
        assert_eq!((n.fold, n.source.as_str(), n.take, n.class), (3, "118194", 'A', 41));
        for bad in ["chainsaw.wav", "6-1-A-0.wav", "1-1-A-50.wav", "1-1-AB-0.wav", "1-1-A-0.mp3", "1--A-0.wav"] {
            assert!(matches!(assign_esc50_fold(bad), Err(Error::Parse(_))), "{bad}");
        }
    }

    #[test]
    fn cache_container_round_trip() {
        let set = separable_embeddings(3, 4, 5, 2, 8).unwrap();
        let bytes = crate::model::write_container(&set.to_container()).unwrap();
        let back = EmbeddingSet::from_container(&crate::model::read_container(&bytes).unwrap()).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn clip_embeddings_average_patches() {
        let spec = build_aug_vggish_with(&StackPlan::aug_vggish().narrowed(16), 3).unwrap();
        let bundle = WeightBundle::random(spec, 6);
        let frontend = LogMelFrontend::new();
        let five_s: Vec<f32> = (0..80_000).map(|i| ((i as f32) * 0.013).sin() * 0.2).collect();
        let clip = AudioClip::new(five_s, 16_000, "a").unwrap();
        let patches = patch_embeddings(&frontend, &bundle, &clip).unwrap();
        assert_eq!(patches.len(), 5);
        let mean = clip_embedding(&frontend, &bundle, &clip).unwrap();
        for (d, &got) in mean.iter().enumerate() {
            let m = patches.iter().map(|p| p.values()[d] as f64).sum::<f64>() / 5.0;
            assert!((got as f64 - m).abs() < 1e-6);
        }
        let one_s = AudioClip::new(clip.samples[..16_000].to_vec(), 16_000, "b").unwrap();
        assert_eq!(patch_embeddings(&frontend, &bundle, &one_s).unwrap().len(), 1);
    }

    #[test]
    fn extraction_records_failures_and_sorts() {
        let spec = build_aug_vggish_with(&StackPlan::aug_vggish().narrowed(16), 2).unwrap();
        let bundle = WeightBundle::random(spec, 2);
        let tone = AudioClip::new((0..16_000).map(|i| (i as f32 * 0.02).sin() * 0.1).collect(), 16_000, "t").unwrap();
        let clips = vec![
            LabeledClip { clip_id: "z".into(), fold: 1, label: 0, audio: AudioSource::Clip(tone.clone()) },
            LabeledClip { clip_id: "bad".into(), fold: 1, label: 1, audio: AudioSource::Wav(b"garbage".to_vec()) },
            LabeledClip { clip_id: "a".into(), fold: 2, label: 1, audio: AudioSource::Clip(tone.clone()) },
            LabeledClip { clip_id: "m".into(), fold: 1, label: 2, audio: AudioSource::Clip(tone) },
        ];
        let out = extract_embeddings(&bundle, &clips, 2).unwrap();
        assert_eq!(out.set.items().iter().map(|i| i.clip_id.as_str()).collect::<Vec<_>>(), vec!["a", "z"]);
        assert_eq!(out.set.items()[0].embedding, out.set.items()[1].embedding);
        assert_eq!(out.failures.len(), 2);
        assert!(matches!(out.failures[0].1, Error::Decode(_)));
        assert!(matches!(out.failures[1].1, Error::Config(_)));
        assert_eq!(out.set.source_arch, "aug_vggish");
    }
}
