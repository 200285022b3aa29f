use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn facelora(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_facelora"))
        .args(args)
        .env_remove("FACELORA_RUN_ROOT")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small enough for a few-second end-to-end run.
const TINY: &str = r#"
seed = 3

[vit]
image_size = 16
patch_size = 8
d_model = 16
n_heads = 2
n_layers = 1
mlp_ratio = 2.0

[train]
epochs = 2
batch_size = 8
base_lr = 1e-2
parallel = false

[train.lora]
rank = 4
alpha = 4.0

[train.augment]
flip_prob = 0.0
ops = 0
magnitude = 0

[synth]
identities = 6
per_identity = 10
image_size = 16
holdout = 4
groups = 2
"#;

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p
}

#[test]
fn report_bias_prints_average_std_and_ser() {
    let o = facelora(&["report-bias", "--accuracies", "75.25,75.68,84.75,78.58"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("average 78.57"), "{out}");
    assert!(out.contains("std 4.38"), "{out}");
    assert!(out.contains("ser 1.62"), "{out}");
}

#[test]
fn report_bias_flags_zero_error() {
    let o = facelora(&["report-bias", "--accuracies", "100,90"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("ser inf"));
    let o = facelora(&["report-bias", "--accuracies", "90"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn unknown_command_exits_with_usage_status() {
    assert_eq!(facelora(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(facelora(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(facelora(&["--help"]).status.code(), Some(0));
}

#[test]
fn validate_config_names_bad_fields() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train.lora]\nrank = -1\n").unwrap();
    let o = facelora(&["validate-config", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("rank"), "{}", stderr(&o));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));

    std::fs::write(&bad, "[train]\nmargin = 1.5\n").unwrap();
    let o = facelora(&["validate-config", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.margin"), "{}", stderr(&o));
}

#[test]
fn empty_config_resolves_to_presets_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.toml");
    std::fs::write(&empty, "").unwrap();
    let a = facelora(&["validate-config", s(&empty), "--print"]);
    let b = facelora(&["validate-config", s(&empty), "--print"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let text = stdout(&a);
    for line in ["rank = 16", "alpha = 16.0", "scaling_mode = \"rank_stabilized\"", "margin = 0.3", "scale = 64.0", "base_lr = 0.0001", "weight_decay = 0.05"] {
        assert!(text.contains(line), "missing `{line}` in\n{text}");
    }
}

#[test]
fn missing_input_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = facelora(&["train", "--manifest", s(&dir.path().join("nope.csv")), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("paths.manifest"), "{}", stderr(&o));
    let o = facelora(&["evaluate", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("paths.protocol"));
}

#[test]
fn runtime_failure_exits_one_after_writing_the_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.csv");
    std::fs::write(&manifest, "path,identity\nmissing.png,a\n").unwrap();
    let out = dir.path().join("run");
    let o = facelora(&["train", "--manifest", s(&manifest), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(out.join("resolved_config.toml").exists());
}

#[test]
fn synth_writes_manifest_images_and_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("toy");
    let o = facelora(&["synth", "--identities", "10", "--per-id", "20", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["manifest.csv", "train.csv", "heldout.csv", "pairs.csv", "resolved_config.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(out.join("images/id0009/0019.png").exists());
    let manifest = std::fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 200);
    let pairs = std::fs::read_to_string(out.join("pairs.csv")).unwrap();
    assert!(pairs.starts_with("pathA,pathB,label,fold"));
}

#[test]
fn run_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_facelora"))
        .args(["synth", "--identities", "2", "--per-id", "6", "--holdout", "3", "--image-size", "8"])
        .env("FACELORA_RUN_ROOT", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("synth/manifest.csv").exists());
}

#[test]
fn subset_keeps_the_requested_width() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(facelora(&["synth", "--identities", "6", "--per-id", "6", "--holdout", "3", "--image-size", "8", "--out", s(&data)]).status.success());
    let out = dir.path().join("sub");
    let o = facelora(&["subset", "--manifest", s(&data.join("manifest.csv")), "--width", "4", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 4 * 6);
    let o = facelora(&["subset", "--manifest", s(&data.join("manifest.csv")), "--width", "7", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_merge_evaluate_smoke_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let c = s(&cfg);
    let data = dir.path().join("data");
    assert!(facelora(&["synth", "--config", c, "--out", s(&data)]).status.success());

    let train = dir.path().join("train");
    let o = facelora(&["train", "--config", c, "--manifest", s(&data.join("train.csv")), "--out", s(&train)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["resolved_config.toml", "metrics.jsonl", "checkpoint.safetensors", "checkpoints/epoch_002.safetensors", "backbone.safetensors"] {
        assert!(train.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(train.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2 * 5);
    assert!(log.lines().next().unwrap().contains("\"lr\""));

    let merged = dir.path().join("merged");
    let ckpt = train.join("checkpoint.safetensors");
    let o = facelora(&["merge", "--config", c, "--checkpoint", s(&ckpt), "--out", s(&merged)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let eval = dir.path().join("eval");
    let o = facelora(&[
        "evaluate", "--config", c,
        "--model", s(&merged.join("merged.safetensors")),
        "--protocol", s(&data.join("pairs.csv")),
        "--manifest", s(&data.join("manifest.csv")),
        "--out", s(&eval),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    let acc = report["benchmarks"][0]["accuracy"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&acc));
    assert!(report["bias"]["std"].is_number(), "{report}");
    let summary = std::fs::read_to_string(eval.join("summary.csv")).unwrap();
    assert!(summary.contains("pairs.accuracy"), "{summary}");
    assert!(eval.join("roc_pairs.csv").exists());

    // Adapter mode against the training backbone gives the same report.
    let eval2 = dir.path().join("eval2");
    let o = facelora(&[
        "evaluate", "--config", c,
        "--checkpoint", s(&ckpt),
        "--backbone", s(&train.join("backbone.safetensors")),
        "--protocol", s(&data.join("pairs.csv")),
        "--out", s(&eval2),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report2: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval2.join("report.json")).unwrap()).unwrap();
    assert_eq!(report2["benchmarks"][0]["accuracy"], report["benchmarks"][0]["accuracy"]);

    // A checkpoint never silently pairs with another backbone.
    let o = facelora(&["merge", "--config", c, "--seed", "4", "--checkpoint", s(&ckpt), "--out", s(&dir.path().join("m2"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("fingerprint"), "{}", stderr(&o));
}

#[test]
fn rerun_from_snapshot_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    assert!(facelora(&["synth", "--config", s(&cfg), "--out", s(&data)]).status.success());
    let a = dir.path().join("a");
    let o = facelora(&["train", "--config", s(&cfg), "--manifest", s(&data.join("train.csv")), "--out", s(&a)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let b = dir.path().join("b");
    let o = facelora(&["train", "--config", s(&a.join("resolved_config.toml")), "--out", s(&b)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["checkpoint.safetensors", "metrics.jsonl"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}
