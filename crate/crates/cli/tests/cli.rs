//! Black-box tests of the `canopy` binary: exit codes, outputs, determinism.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use canopy_core::model::{read_container, write_container};
use canopy_core::transfer::{separable_embeddings, EmbeddingItem, EmbeddingSet};
use serde_json::Value;
use tempfile::TempDir;

fn canopy(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_canopy")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_wav(path: &Path, samples: &[f32], rate: u32) {
    let spec =
        hound::WavSpec { channels: 1, sample_rate: rate, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for &x in samples {
        w.write_sample((x.clamp(-1.0, 1.0) * 32767.0) as i16).unwrap();
    }
    w.finalize().unwrap();
}

fn tone(seconds: f32, rate: u32) -> Vec<f32> {
    (0..(seconds * rate as f32) as usize)
        .map(|i| 0.4 * (2.0 * std::f32::consts::PI * 700.0 * i as f32 / rate as f32).sin())
        .collect()
}

/// Narrow, fast model written by the binary itself.
fn init_model(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("model.csnw");
    let mut args = vec!["init", "--arch", "aug-vggish", "--width-divisor", "16", "--out", s(&out)];
    args.extend_from_slice(extra);
    let o = canopy(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

fn write_cache(path: &Path, set: &EmbeddingSet) {
    fs::write(path, write_container(&set.to_container()).unwrap()).unwrap();
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&canopy(&["--help"])), 0);
    assert_eq!(code(&canopy(&["--version"])), 0);
    assert_eq!(code(&canopy(&[])), 64);
    assert_eq!(code(&canopy(&["frobnicate"])), 64);
    assert_eq!(code(&canopy(&["info"])), 64);
    assert_eq!(code(&canopy(&["eval-cv", "--embeddings", "x", "--out", "y", "--k", "1"])), 64);
}

#[test]
fn featurize_one_valid_wav() {
    let dir = TempDir::new().unwrap();
    let wav = dir.path().join("a.wav");
    write_wav(&wav, &tone(1.0, 22_050), 22_050);
    let out = dir.path().join("feats");
    let o = canopy(&["featurize", s(&wav), "--out-dir", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let c = read_container(&fs::read(out.join("a.logmel.csnw")).unwrap()).unwrap();
    assert_eq!(c.tensor("logmel").unwrap().shape(), &[98, 64]);
    let manifest = &c.extra["manifest"];
    assert_eq!(manifest["command"], "featurize");
    assert_eq!(manifest["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn featurize_empty_input_list_warns() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("feats");
    let o = canopy(&["featurize", "--out-dir", s(&out)]);
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).contains("warning"));
    assert!(!out.exists() || fs::read_dir(&out).unwrap().next().is_none());
}

#[test]
fn featurize_partial_failure_exits_2() {
    let dir = TempDir::new().unwrap();
    let good = dir.path().join("good.wav");
    let bad = dir.path().join("bad.wav");
    write_wav(&good, &tone(1.0, 16_000), 16_000);
    fs::write(&bad, b"RIFF\x04\x00\x00\x00WAVE").unwrap();
    let out = dir.path().join("feats");
    let o = canopy(&["featurize", s(dir.path()), "--out-dir", s(&out), "--format", "csv"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bad.wav"));
    let mut names: Vec<String> =
        fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["good.logmel.csv", "good.logmel.csv.manifest.json"]);
    let csv = fs::read_to_string(out.join("good.logmel.csv")).unwrap();
    assert_eq!(csv.lines().count(), 99);
    assert_eq!(csv.lines().nth(1).unwrap().split(',').count(), 64);
}

#[test]
fn info_reports_parameter_counts() {
    let dir = TempDir::new().unwrap();
    for (arch, expected) in [("aug-vggish", 4_647_346), ("fcn-vggish", 18_716_338)] {
        let path = dir.path().join(format!("{arch}.csnw"));
        let o = canopy(&["init", "--arch", arch, "--classes", "50", "--zero", "--out", s(&path)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let o = canopy(&["info", "--model", s(&path)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let text = stdout(&o);
        assert!(text.lines().any(|l| l == format!("trainable_params: {expected}")), "{text}");
        assert!(text.contains("num_classes: 50"));
        fs::remove_file(&path).unwrap();
    }
}

#[test]
fn info_on_truncated_file_exits_2() {
    let dir = TempDir::new().unwrap();
    let model = init_model(dir.path(), &[]);
    let bytes = fs::read(&model).unwrap();
    let cut = dir.path().join("cut.csnw");
    fs::write(&cut, &bytes[..bytes.len() - 10]).unwrap();
    let o = canopy(&["info", "--model", s(&cut)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).to_lowercase().contains("format"), "{}", stderr(&o));

    fs::write(&cut, b"XXXX").unwrap();
    assert_eq!(code(&canopy(&["info", "--model", s(&cut)])), 2);
    assert_eq!(code(&canopy(&["info", "--model", s(&dir.path().join("absent"))])), 2);
}

#[test]
fn detect_thresholds_on_silence() {
    let dir = TempDir::new().unwrap();
    let model = init_model(dir.path(), &["--zero"]);
    let wav = dir.path().join("silent.wav");
    write_wav(&wav, &vec![0.0; 160_000], 16_000);

    let o = canopy(&["detect", "--model", s(&model), "--threshold", "0.6", s(&wav)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o), "");

    let o = canopy(&["detect", "--model", s(&model), "--threshold", "0.4", s(&wav)]);
    assert_eq!(code(&o), 0);
    let lines: Vec<Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 1);
    assert_eq!(lines[0]["clip_id"], "silent");
    assert_eq!((lines[0]["start_s"].as_i64(), lines[0]["end_s"].as_i64()), (Some(0), Some(10)));
    assert_eq!(lines[0]["peak_prob"].as_f64(), Some(0.5));
    assert!(stdout(&o).contains("\"peak_prob\":0.500000"));

    assert_eq!(code(&canopy(&["detect", "--model", s(&model), "--threshold", "1.1", s(&wav)])), 64);
    assert_eq!(code(&canopy(&["detect", "--model", s(&model), "--threshold", "-0.1", s(&wav)])), 64);
    assert_eq!(code(&canopy(&["detect", "--model", s(&model), "--positive-class", "2", s(&wav)])), 2);
}

#[test]
fn detect_writes_scores_and_sidecar() {
    let dir = TempDir::new().unwrap();
    let model = init_model(dir.path(), &["--seed", "4"]);
    for name in ["b", "a"] {
        write_wav(&dir.path().join(format!("{name}.wav")), &tone(3.0, 16_000), 16_000);
    }
    let events = dir.path().join("events.jsonl");
    let scores = dir.path().join("scores.csv");
    let o = canopy(&[
        "detect",
        "--model",
        s(&model),
        "--threshold",
        "0",
        "--out",
        s(&events),
        "--scores",
        s(&scores),
        s(dir.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ids: Vec<String> = fs::read_to_string(&events)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["clip_id"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(ids, ["a", "b"]);
    assert_eq!(fs::read_to_string(&scores).unwrap().lines().count(), 7);
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("events.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["threshold"], 0.0);
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 3);
}

#[test]
fn infer_accepts_wav_and_stored_spectrogram() {
    let dir = TempDir::new().unwrap();
    let model = init_model(dir.path(), &["--seed", "9"]);
    let wav = dir.path().join("clip.wav");
    write_wav(&wav, &tone(2.5, 16_000), 16_000);
    let feats = dir.path().join("feats");
    assert_eq!(code(&canopy(&["featurize", s(&wav), "--out-dir", s(&feats)])), 0);

    let from_wav = canopy(&["infer", "--model", s(&model), s(&wav)]);
    let from_spec = canopy(&["infer", "--model", s(&model), s(&feats.join("clip.logmel.csnw"))]);
    assert_eq!(code(&from_wav), 0, "{}", stderr(&from_wav));
    assert_eq!(code(&from_spec), 0, "{}", stderr(&from_spec));
    assert_eq!(stdout(&from_wav), stdout(&from_spec));
    let rows: Vec<Value> = stdout(&from_wav).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    // 248 frames at hop 96.
    assert_eq!(rows.len(), 2);
    let p: Vec<f64> = rows[0]["probabilities"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

fn eval_cv(cache: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["eval-cv", "--embeddings", s(cache), "--out", s(out)];
    args.extend_from_slice(extra);
    canopy(&args)
}

fn without_timestamp(mut v: Value) -> Value {
    v["manifest"].as_object_mut().unwrap().remove("created_unix_s").expect("timestamp present");
    v
}

#[test]
fn eval_cv_on_separable_cache() {
    let dir = TempDir::new().unwrap();
    let cache = dir.path().join("cache.csnw");
    write_cache(&cache, &separable_embeddings(10, 10, 16, 5, 1).unwrap());
    let (r1, r2) = (dir.path().join("r1.json"), dir.path().join("r2.json"));
    let csv = dir.path().join("r.csv");
    let flags = ["--learning-rate", "0.5", "--epochs", "60", "--seed", "11"];
    let o = eval_cv(&cache, &r1, &[&flags[..], &["--csv", s(&csv)]].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(code(&eval_cv(&cache, &r2, &flags)), 0);

    let v1: Value = serde_json::from_str(&fs::read_to_string(&r1).unwrap()).unwrap();
    let v2: Value = serde_json::from_str(&fs::read_to_string(&r2).unwrap()).unwrap();
    assert_eq!(v1["results"]["mean_accuracy"], 1.0);
    assert_eq!(v1["seed"], 11);
    assert_eq!(v1["train_config"]["epochs"], 60);
    assert_eq!(v1["results"]["f1_average"], "macro");
    assert_eq!(v1["results"]["clip_aggregation"], "mean_patch_embedding");
    // Only the output paths and the timestamp may differ.
    let mut a = without_timestamp(v1);
    let mut b = without_timestamp(v2);
    for v in [&mut a, &mut b] {
        let flags = &mut v["manifest"]["config"]["flags"];
        flags["out"] = Value::Null;
        flags["csv"] = Value::Null;
    }
    assert_eq!(a, b);
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 7);
}

#[test]
fn eval_cv_is_byte_identical_apart_from_timestamp() {
    let dir = TempDir::new().unwrap();
    let cache = dir.path().join("cache.csnw");
    write_cache(&cache, &separable_embeddings(4, 10, 8, 5, 2).unwrap());
    let out = dir.path().join("r.json");
    assert_eq!(code(&eval_cv(&cache, &out, &["--seed", "3"])), 0);
    let first = fs::read_to_string(&out).unwrap();
    assert_eq!(code(&eval_cv(&cache, &out, &["--seed", "3"])), 0);
    let second = fs::read_to_string(&out).unwrap();
    let strip = |t: &str| t.lines().filter(|l| !l.contains("created_unix_s")).collect::<Vec<_>>().join("\n");
    assert_eq!(strip(&first), strip(&second));
    assert_eq!(first.lines().filter(|l| l.contains("created_unix_s")).count(), 1);
}

#[test]
fn eval_cv_missing_fold_exits_2() {
    let dir = TempDir::new().unwrap();
    let items: Vec<EmbeddingItem> = separable_embeddings(4, 8, 4, 4, 0).unwrap().items().to_vec();
    assert!(items.iter().all(|i| i.fold <= 4));
    let cache = dir.path().join("cache.csnw");
    write_cache(&cache, &EmbeddingSet::new(items, 4, 4).unwrap());
    let o = eval_cv(&cache, &dir.path().join("r.json"), &["--k", "5"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("fold 5"), "{}", stderr(&o));
    assert_eq!(code(&eval_cv(&cache, &dir.path().join("r.json"), &["--learning-rate", "-1"])), 64);
}

#[test]
fn train_head_standalone_and_grafted() {
    let dir = TempDir::new().unwrap();
    let model = init_model(dir.path(), &["--classes", "3", "--seed", "2"]);
    // The narrowed backbone embeds into 16 dimensions.
    let cache = dir.path().join("cache.csnw");
    write_cache(&cache, &separable_embeddings(3, 6, 16, 3, 5).unwrap());
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"learning_rate": 0.2, "epochs": 5}"#).unwrap();

    let head = dir.path().join("head.csnw");
    let o = canopy(&["train-head", "--embeddings", s(&cache), "--config", s(&cfg), "--out", s(&head)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let c = read_container(&fs::read(&head).unwrap()).unwrap();
    assert_eq!(c.arch_id, "dense_head");
    assert_eq!(c.extra["manifest"]["config"]["train_config"]["learning_rate"], 0.2);
    assert_eq!(c.extra["manifest"]["config"]["train_config"]["batch_size"], 32);

    let head2 = dir.path().join("head2.csnw");
    canopy(&["train-head", "--embeddings", s(&cache), "--config", s(&cfg), "--out", s(&head2)]);
    let c2 = read_container(&fs::read(&head2).unwrap()).unwrap();
    assert_eq!(c.tensors, c2.tensors);

    let grafted = dir.path().join("grafted.csnw");
    let o = canopy(&[
        "train-head",
        "--embeddings",
        s(&cache),
        "--backbone",
        s(&model),
        "--out",
        s(&grafted),
        "--epochs",
        "3",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = canopy(&["info", "--model", s(&grafted)]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("num_classes: 3"));

    let bad_cfg = dir.path().join("bad.json");
    fs::write(&bad_cfg, r#"{"learning_rate": "fast"}"#).unwrap();
    let o = canopy(&["train-head", "--embeddings", s(&cache), "--config", s(&bad_cfg), "--out", s(&head)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn embed_builds_cache_from_esc50_names() {
    let dir = TempDir::new().unwrap();
    let model = init_model(dir.path(), &["--seed", "1"]);
    let clips = dir.path().join("clips");
    fs::create_dir(&clips).unwrap();
    for name in ["1-100032-A-0.wav", "2-100038-A-3.wav", "noise.wav"] {
        write_wav(&clips.join(name), &tone(1.5, 16_000), 16_000);
    }
    let cache = dir.path().join("cache.csnw");
    let o = canopy(&["embed", "--model", s(&model), "--num-classes", "5", "--out", s(&cache), s(&clips)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("noise.wav"));
    let c = read_container(&fs::read(&cache).unwrap()).unwrap();
    let set = EmbeddingSet::from_container(&c).unwrap();
    let meta: Vec<(&str, usize, usize)> = set.items().iter().map(|i| (i.clip_id.as_str(), i.fold, i.label)).collect();
    assert_eq!(meta, [("1-100032-A-0", 1, 0), ("2-100038-A-3", 2, 3)]);
    assert_eq!(set.dim(), 16);

    let o = canopy(&["info", "--model", s(&cache)]);
    assert!(stdout(&o).contains("clips: 2"), "{}", stdout(&o));
}

#[test]
fn pr_command_writes_curve() {
    let dir = TempDir::new().unwrap();
    let scores = dir.path().join("scores.csv");
    fs::write(&scores, "probability,label\n0.9,1\n0.8,0\n0.7,1\n").unwrap();
    let out = dir.path().join("pr.csv");
    let svg = dir.path().join("pr.svg");
    let o = canopy(&["pr", "--scores", s(&scores), "--out", s(&out), "--svg", s(&svg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("threshold,precision,recall\n"));
    assert_eq!(csv.lines().last().unwrap(), format!("# average_precision={}", 5.0 / 6.0));
    assert!(fs::read_to_string(&svg).unwrap().starts_with("<svg"));

    fs::write(&scores, "0.3,0\n0.2,0\n").unwrap();
    assert_eq!(code(&canopy(&["pr", "--scores", s(&scores), "--out", s(&out)])), 2);
    fs::write(&scores, "0.3,maybe\n").unwrap();
    assert_eq!(code(&canopy(&["pr", "--scores", s(&scores), "--out", s(&out)])), 2);
}

#[test]
fn init_is_deterministic_per_seed() {
    let dir = TempDir::new().unwrap();
    let tensors = |seed: &str, name: &str| {
        let p = dir.path().join(name);
        let o = canopy(&["init", "--arch", "fcn-vggish", "--width-divisor", "16", "--seed", seed, "--out", s(&p)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        read_container(&fs::read(&p).unwrap()).unwrap().tensors
    };
    assert_eq!(tensors("5", "a.csnw"), tensors("5", "b.csnw"));
    assert_ne!(tensors("5", "a.csnw"), tensors("6", "c.csnw"));
    let o = canopy(&["init", "--arch", "aug-vggish", "--classes", "3", "--sigmoid", "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&o), 64);
}
