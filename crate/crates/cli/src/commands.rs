use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use canopy_core::audio::{
    extract_patches, log_mel_spectrogram, resample_to_16k, LogMelFrontend, LogMelSpectrogram, NUM_MEL_BANDS,
    PATCH_FRAMES,
};
use canopy_core::detect::{merge_events, score_stream_with, SecondScore};
use canopy_core::metrics::pr_curve;
use canopy_core::model::{
    build_aug_vggish_with, build_fcn_vggish_with, read_container, write_container, Container, ModelSpec, StackPlan,
    WeightBundle,
};
use canopy_core::transfer::{
    extract_embeddings, parse_esc50_name, run_cv, train_head as fit_head, AudioSource, EmbeddingSet, Head, LabeledClip,
    TrainConfig, CLIP_AGGREGATION, HEAD_ARCH,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::inputs::{clip_id, collect_inputs, load_input, logmel_container, Loaded, LOGMEL_KIND};
use crate::manifest::{sidecar_path, RunManifest};
use crate::{
    Arch, CliError, DetectArgs, EmbedArgs, EvalCvArgs, FeaturizeArgs, InferArgs, InfoArgs, InitArgs, PrArgs,
    SpecFormat, TrainHeadArgs, TrainOverrides,
};

type CmdResult = Result<(), CliError>;

const MANIFEST_FIELD: &str = "manifest";

fn echo<T: Serialize>(args: &T) -> Value {
    serde_json::to_value(args).expect("flags serialize")
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> CmdResult {
    fs::write(path, bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_with_sidecar(path: &Path, bytes: &[u8], manifest: &RunManifest) -> CmdResult {
    write(path, bytes)?;
    write(&sidecar_path(path), manifest.to_pretty_json().as_bytes())
}

fn write_container_with_manifest(path: &Path, mut c: Container, manifest: &RunManifest) -> CmdResult {
    c.extra.insert(MANIFEST_FIELD.into(), manifest.to_value());
    write(path, &write_container(&c)?)
}

fn load_model(path: &Path, manifest: &mut RunManifest) -> Result<WeightBundle, CliError> {
    let bytes = read(path)?;
    manifest.add_input(path, &bytes);
    WeightBundle::from_bytes(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Standard output, or a file accompanied by its manifest.
fn emit(out: Option<&Path>, text: &str, manifest: &RunManifest) -> CmdResult {
    match out {
        Some(path) => write_with_sidecar(path, text.as_bytes(), manifest),
        None => std::io::stdout().lock().write_all(text.as_bytes()).map_err(|e| CliError::Data(format!("stdout: {e}"))),
    }
}

/// Per-input failures are reported as they happen; the command still
/// processes the remaining inputs and fails at the end.
#[derive(Default)]
struct Failures {
    count: usize,
}

impl Failures {
    fn report(&mut self, what: &str, err: impl std::fmt::Display) {
        eprintln!("canopy: {what}: {err}");
        self.count += 1;
    }

    fn finish(self, total: usize) -> CmdResult {
        match self.count {
            0 => Ok(()),
            n => Err(CliError::Data(format!("{n} of {total} inputs failed"))),
        }
    }
}

fn gather(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let files = collect_inputs(inputs)?;
    if files.is_empty() {
        eprintln!("canopy: warning: no input files");
    }
    Ok(files)
}

fn spectrogram_csv(spec: &LogMelSpectrogram) -> String {
    let mut out = (0..NUM_MEL_BANDS).map(|b| format!("mel{b}")).collect::<Vec<_>>().join(",");
    out.push('\n');
    for t in 0..spec.num_frames() {
        let row: Vec<String> = spec.frame(t).iter().map(|v| v.to_string()).collect();
        out += &row.join(",");
        out.push('\n');
    }
    out
}

pub fn featurize(args: &FeaturizeArgs) -> CmdResult {
    let files = gather(&args.inputs)?;
    if files.is_empty() {
        return Ok(());
    }
    fs::create_dir_all(&args.out_dir)?;
    let mut failures = Failures::default();
    let mut written = std::collections::BTreeSet::new();
    for path in &files {
        let result = (|| -> Result<(), CliError> {
            let bytes = read(path)?;
            let id = clip_id(path);
            if !written.insert(id.clone()) {
                return Err(CliError::Data(format!("another input already produced {id}")));
            }
            let Loaded::Audio(clip) = load_input(path, &bytes)? else {
                return Err(CliError::Data("already a spectrogram".into()));
            };
            let spec = log_mel_spectrogram(&resample_to_16k(&clip))?;
            let mut manifest = RunManifest::new("featurize", echo(args));
            manifest.add_input(path, &bytes);
            match args.format {
                SpecFormat::Bin => {
                    let out = args.out_dir.join(format!("{id}.logmel.csnw"));
                    write_container_with_manifest(&out, logmel_container(&spec), &manifest)
                }
                SpecFormat::Csv => {
                    let out = args.out_dir.join(format!("{id}.logmel.csv"));
                    write_with_sidecar(&out, spectrogram_csv(&spec).as_bytes(), &manifest)
                }
            }
        })();
        if let Err(e) = result {
            failures.report(&path.display().to_string(), e);
        }
    }
    failures.finish(files.len())
}

fn argmax(p: &[f64]) -> usize {
    p.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best }).0
}

pub fn infer(args: &InferArgs) -> CmdResult {
    let mut manifest = RunManifest::new("infer", echo(args));
    let bundle = load_model(&args.model, &mut manifest)?;
    let files = gather(&args.inputs)?;
    let mut failures = Failures::default();
    let mut out = String::new();
    for path in &files {
        let result = (|| -> Result<String, CliError> {
            let bytes = read(path)?;
            manifest.add_input(path, &bytes);
            let spec = match load_input(path, &bytes)? {
                Loaded::Audio(clip) => log_mel_spectrogram(&resample_to_16k(&clip))?,
                Loaded::Spectrogram(spec) => spec,
            };
            let id = clip_id(path);
            let id = id.strip_suffix(".logmel").unwrap_or(&id);
            let mut lines = String::new();
            for (i, patch) in extract_patches(&spec, args.hop_frames as usize, true)?.iter().enumerate() {
                let probs = bundle.forward_probs(patch)?;
                let line = json!({
                    "clip_id": id,
                    "patch_index": i,
                    "start_s": patch.origin_s,
                    "predicted": argmax(&probs),
                    "probabilities": probs,
                });
                let _ = writeln!(lines, "{line}");
            }
            Ok(lines)
        })();
        match result {
            Ok(lines) => out += &lines,
            Err(e) => failures.report(&path.display().to_string(), e),
        }
    }
    emit(args.out.as_deref(), &out, &manifest)?;
    failures.finish(files.len())
}

pub fn detect(args: &DetectArgs) -> CmdResult {
    let mut manifest = RunManifest::new("detect", echo(args));
    let bundle = load_model(&args.model, &mut manifest)?;
    let classes = bundle.spec().num_classes;
    if args.positive_class >= classes {
        return Err(CliError::Data(format!(
            "positive class {} out of range for a {classes}-class model",
            args.positive_class
        )));
    }
    let frontend = LogMelFrontend::new();
    let files = gather(&args.inputs)?;
    let mut failures = Failures::default();
    let mut scores: Vec<SecondScore> = Vec::new();
    for path in &files {
        let result = (|| -> Result<Vec<SecondScore>, CliError> {
            let bytes = read(path)?;
            manifest.add_input(path, &bytes);
            match load_input(path, &bytes)? {
                Loaded::Audio(clip) => Ok(score_stream_with(&frontend, &bundle, &clip, args.positive_class)?),
                Loaded::Spectrogram(_) => Err(CliError::Data("detection needs audio, not a spectrogram".into())),
            }
        })();
        match result {
            Ok(s) => scores.extend(s),
            Err(e) => failures.report(&path.display().to_string(), e),
        }
    }
    let events = merge_events(&scores, args.threshold, args.gap);
    let mut out = String::new();
    for e in &events {
        out += &e.to_json_line();
        out.push('\n');
    }
    emit(args.out.as_deref(), &out, &manifest)?;
    if let Some(path) = &args.scores {
        let mut csv = String::from("clip_id,second,probability\n");
        for s in &scores {
            let _ = writeln!(csv, "{},{},{}", s.clip_id, s.second_index, s.probability);
        }
        write_with_sidecar(path, csv.as_bytes(), &manifest)?;
    }
    failures.finish(files.len())
}

pub fn embed(args: &EmbedArgs) -> CmdResult {
    let mut manifest = RunManifest::new("embed", echo(args));
    let bundle = load_model(&args.model, &mut manifest)?;
    let files = gather(&args.inputs)?;
    let mut failures = Failures::default();
    let mut clips = Vec::new();
    for path in &files {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let parsed = parse_esc50_name(&name).map_err(CliError::from).and_then(|n| Ok((n, read(path)?)));
        match parsed {
            Ok((n, bytes)) => {
                manifest.add_input(path, &bytes);
                clips.push(LabeledClip {
                    clip_id: clip_id(path),
                    fold: n.fold,
                    label: n.class,
                    audio: AudioSource::Wav(bytes),
                });
            }
            Err(e) => failures.report(&path.display().to_string(), e),
        }
    }
    let extraction = extract_embeddings(&bundle, &clips, args.num_classes as usize)?;
    for (id, e) in &extraction.failures {
        failures.report(id, e);
    }
    let mut c = extraction.set.to_container();
    c.extra.insert("clip_aggregation".into(), Value::String(CLIP_AGGREGATION.into()));
    write_container_with_manifest(&args.out, c, &manifest)?;
    failures.finish(files.len())
}

fn load_cache(path: &Path, manifest: &mut RunManifest) -> Result<EmbeddingSet, CliError> {
    let bytes = read(path)?;
    manifest.add_input(path, &bytes);
    let c = read_container(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    EmbeddingSet::from_container(&c).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn resolve_config(o: &TrainOverrides, manifest: &mut RunManifest) -> Result<TrainConfig, CliError> {
    let mut cfg = match &o.config {
        Some(path) => {
            let bytes = read(path)?;
            manifest.add_input(path, &bytes);
            serde_json::from_slice(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = o.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = o.batch_size {
        cfg.batch_size = v;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn with_train_config<T: Serialize>(args: &T, cfg: &TrainConfig) -> Value {
    json!({"flags": echo(args), "train_config": cfg})
}

pub fn train_head(args: &TrainHeadArgs) -> CmdResult {
    let mut manifest = RunManifest::new("train-head", Value::Null);
    let set = load_cache(&args.embeddings, &mut manifest)?;
    let cfg = resolve_config(&args.train, &mut manifest)?;
    manifest.config = with_train_config(args, &cfg);
    let trained = fit_head(&set, &cfg)?;
    let mut c = match &args.backbone {
        Some(path) => {
            let backbone = load_model(path, &mut manifest)?;
            let [layer] = trained.head.layers.as_slice() else {
                return Err(CliError::Data("a head with a hidden layer cannot be grafted onto a backbone".into()));
            };
            backbone.with_head(layer)?.to_container()
        }
        None => trained.head.to_container(),
    };
    c.extra.insert("epoch_losses".into(), json!(trained.epoch_losses));
    write_container_with_manifest(&args.out, c, &manifest)
}

pub fn eval_cv(args: &EvalCvArgs) -> CmdResult {
    let mut manifest = RunManifest::new("eval-cv", Value::Null);
    let set = load_cache(&args.embeddings, &mut manifest)?;
    let cfg = resolve_config(&args.train, &mut manifest)?;
    manifest.config = with_train_config(args, &cfg);
    let report = run_cv(&set, args.k as usize, &cfg)?;
    let doc = json!({
        "manifest": manifest.to_value(),
        "train_config": cfg,
        "seed": cfg.seed,
        "source_arch": set.source_arch,
        "num_items": set.len(),
        "num_classes": set.num_classes(),
        "results": report.summary_json(),
    });
    let text = serde_json::to_string_pretty(&doc).expect("report serializes") + "\n";
    write(&args.out, text.as_bytes())?;
    if let Some(csv) = &args.csv {
        write_with_sidecar(csv, report.to_csv().as_bytes(), &manifest)?;
    }
    Ok(())
}

fn describe_bundle(bundle: &WeightBundle) -> Result<String, CliError> {
    let spec = bundle.spec();
    let frames = PATCH_FRAMES;
    let mut out = String::new();
    let _ = writeln!(out, "arch_id: {}", spec.arch_id);
    let _ = writeln!(out, "num_classes: {}", spec.num_classes);
    let _ = writeln!(out, "output: {}", echo(&spec.output).as_str().unwrap_or("?"));
    let _ = writeln!(out, "preproc_tag: {}", bundle.preproc_tag());
    let _ = writeln!(out, "input: {:?}", ModelSpec::input_shape(frames));
    let _ = writeln!(out, "layers:");
    for (layer, shape) in spec.layers.iter().zip(spec.layer_shapes(frames)?) {
        let _ = writeln!(
            out,
            "  {:<10} {:<16} {:<16} {}",
            layer.name().unwrap_or("-"),
            layer.kind(),
            format!("{shape:?}"),
            layer.trainable_params()
        );
    }
    let _ = writeln!(out, "embedding_dim: {}", spec.embedding_dim()?);
    let _ = writeln!(out, "trainable_params: {}", spec.count_params());
    Ok(out)
}

pub fn info(args: &InfoArgs) -> CmdResult {
    let bytes = read(&args.model)?;
    let c = read_container(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", args.model.display())))?;
    let text = if c.arch_id == HEAD_ARCH {
        let head = Head::from_container(&c)?;
        let mut out = format!("arch_id: {HEAD_ARCH}\nnum_classes: {}\nlayers:\n", head.num_classes());
        for (i, l) in head.layers.iter().enumerate() {
            let _ = writeln!(out, "  head{i} dense [{}, {}]", l.out_units(), l.in_units());
        }
        let params: usize = head.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum();
        out + &format!("trainable_params: {params}\n")
    } else if c.arch_id == LOGMEL_KIND {
        let frames = c.tensor(LOGMEL_KIND).map_or(0, |t| t.shape()[0]);
        format!("arch_id: {LOGMEL_KIND}\nframes: {frames}\npreproc_tag: {}\n", c.preproc_tag)
    } else if c.extra.contains_key("clips") {
        let set = EmbeddingSet::from_container(&c)?;
        format!(
            "arch_id: {}\nnum_classes: {}\nclips: {}\nembedding_dim: {}\nfolds: {:?}\n",
            set.source_arch,
            set.num_classes(),
            set.len(),
            set.dim(),
            set.folds()
        )
    } else {
        describe_bundle(&WeightBundle::from_container(c)?)?
    };
    print!("{text}");
    Ok(())
}

pub fn init(args: &InitArgs) -> CmdResult {
    let classes = args.classes as usize;
    let divisor = args.width_divisor as usize;
    let mut spec = match args.arch {
        Arch::AugVggish => build_aug_vggish_with(&StackPlan::aug_vggish().narrowed(divisor), classes),
        Arch::FcnVggish => build_fcn_vggish_with(&StackPlan::fcn_vggish().narrowed(divisor), classes),
    }
    .map_err(|e| CliError::Usage(e.to_string()))?;
    if args.sigmoid {
        spec = spec.into_sigmoid().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let bundle = if args.zero { WeightBundle::zeros(spec) } else { WeightBundle::random(spec, args.seed) };
    let manifest = RunManifest::new("init", echo(args));
    write_container_with_manifest(&args.out, bundle.to_container(), &manifest)
}

/// `probability,label` rows; a non-numeric first row is taken as a header.
fn parse_scores(bytes: &[u8]) -> Result<Vec<(f64, bool)>, CliError> {
    let mut reader =
        csv::ReaderBuilder::new().has_headers(false).comment(Some(b'#')).trim(csv::Trim::All).from_reader(bytes);
    let mut out = Vec::new();
    for (n, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::Data(format!("scores: {e}")))?;
        let line = record.position().map_or(n as u64 + 1, |p| p.line());
        let [p, y] = [record.get(0), record.get(1)];
        let (Some(p), Some(y), 2) = (p, y, record.len()) else {
            return Err(CliError::Data(format!("line {line}: expected probability,label")));
        };
        let Ok(p) = p.parse::<f64>() else {
            if n == 0 {
                continue;
            }
            return Err(CliError::Data(format!("line {line}: bad probability {p:?}")));
        };
        let y = match y {
            "1" | "true" => true,
            "0" | "false" => false,
            _ => return Err(CliError::Data(format!("line {line}: label must be 0 or 1, got {y:?}"))),
        };
        out.push((p, y));
    }
    Ok(out)
}

pub fn pr(args: &PrArgs) -> CmdResult {
    let mut manifest = RunManifest::new("pr", echo(args));
    let bytes = read(&args.scores)?;
    manifest.add_input(&args.scores, &bytes);
    let curve = pr_curve(&parse_scores(&bytes)?)?;
    write_with_sidecar(&args.out, curve.to_csv().as_bytes(), &manifest)?;
    if let Some(svg) = &args.svg {
        write_with_sidecar(svg, curve.to_svg(&args.title).as_bytes(), &manifest)?;
    }
    Ok(())
}
