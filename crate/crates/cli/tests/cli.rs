use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn tiny_config(dir: &Path, optim: &str) -> PathBuf {
    let text = format!(
        r#"{{
  "experiment": "tiny",
  "output": {out:?},
  "domains": [
    {{"name": "a", "classes": 3, "content": "glyphs", "image_size": 8, "train_per_class": 6,
      "val_per_class": 3, "test_per_class": 3, "seed": 1}},
    {{"name": "b", "classes": 4, "content": "polygons", "image_size": 8, "train_per_class": 6,
      "val_per_class": 3, "test_per_class": 3, "seed": 2, "style": {{"invert": true}}}}
  ],
  "network": {{"preset": "desk", "input_size": 8, "blocks": [
    {{"units": 1, "width": 4, "stride": 1}}, {{"units": 1, "width": 8, "stride": 2}}]}},
  "optim": {optim},
  "predictor": {{"epochs": 2, "batch_size": 8}},
  "seeds": [3]
}}"#,
        out = dir.join("out")
    );
    let path = dir.join("tiny.cfg");
    std::fs::write(&path, text).unwrap();
    path
}

const OPTIM: &str = r#"{"epochs": 2, "batch_size": 8}"#;

fn resadapt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_resadapt")).args(args).env_remove("RESADAPT_OUT").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = resadapt(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str], code: i32) -> String {
    let out = resadapt(args);
    assert_eq!(out.status.code(), Some(code), "{args:?}: {}", String::from_utf8_lossy(&out.stdout));
    String::from_utf8(out.stderr).unwrap()
}

fn setup(optim: &str) -> (TempDir, String, PathBuf) {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path(), optim);
    let root = dir.path().join("out/tiny");
    ok(&["gen", "--config", cfg.to_str().unwrap()]);
    (dir, cfg.to_str().unwrap().to_string(), root)
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&read(path)).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_writes_datasets_and_refuses_to_overwrite() {
    let (_dir, cfg, root) = setup(OPTIM);
    for d in ["a", "b"] {
        for f in ["train.mdld", "val.mdld", "test.mdld", "manifest.json", "contact-sheet.png"] {
            assert!(root.join("data").join(d).join(f).exists(), "{d}/{f}");
        }
    }
    let before = read(&root.join("data/a/train.mdld"));
    let err = fails(&["gen", "--config", &cfg], 1);
    assert!(err.contains("--force"), "{err}");
    let out = ok(&["gen", "--config", &cfg, "--force"]);
    assert!(out.contains("a: 3 classes, train 18 val 9 test 9"), "{out}");
    assert_eq!(before, read(&root.join("data/a/train.mdld")));
    assert!(root.join("config.json").exists());
}

#[test]
fn unknown_config_key_is_named() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path(), r#"{"epochs": 2, "batchsize": 8}"#);
    let err = fails(&["gen", "--config", path(&cfg)], 1);
    assert!(err.contains("batchsize"), "{err}");
}

#[test]
fn res_adapt_leaves_the_source_domain_untouched_end_to_end() {
    let (_dir, cfg, root) = setup(OPTIM);
    ok(&["train", "--config", &cfg, "--protocol", "scratch", "--domain", "a", "--name", "base"]);
    let base = root.join("checkpoints/base.ckpt");
    ok(&["train", "--config", &cfg, "--protocol", "res-adapt", "--domain", "b", "--from", path(&base), "--name", "ra"]);
    ok(&["eval", "--config", &cfg, "--checkpoint", path(&base), "--domain", "a", "--name", "before"]);
    let ra = root.join("checkpoints/ra.ckpt");
    ok(&["eval", "--config", &cfg, "--checkpoint", path(&ra), "--domain", "a", "--name", "after"]);
    let before = json(&root.join("results/before.json"));
    let after = json(&root.join("results/after.json"));
    assert_eq!(before["domains"], after["domains"]);
    ok(&["eval", "--config", &cfg, "--checkpoint", path(&ra), "--name", "both"]);
    assert_eq!(json(&root.join("results/both.json"))["domains"].as_object().unwrap().len(), 2);
}

#[test]
fn protocols_that_adapt_need_a_source() {
    let (_dir, cfg, _root) = setup(OPTIM);
    let err = fails(&["train", "--config", &cfg, "--protocol", "res-adapt", "--domain", "b"], 1);
    assert!(err.contains("--from"), "{err}");
    let err = fails(&["train", "--config", &cfg, "--protocol", "finetune", "--domain", "b", "--from", "nope.ckpt"], 1);
    assert!(err.contains("nope.ckpt"), "{err}");
    fails(&["train", "--config", &cfg, "--protocol", "lwf", "--domain", "b"], 1);
}

#[test]
fn feature_extract_report_lists_only_classifier_as_trainable() {
    let (_dir, cfg, root) = setup(OPTIM);
    ok(&["train", "--config", &cfg, "--protocol", "scratch", "--domain", "a", "--name", "base"]);
    let base = root.join("checkpoints/base.ckpt");
    ok(&["train", "--config", &cfg, "--protocol", "feature-extract", "--domain", "b", "--from", path(&base), "--name", "fe"]);
    let text = String::from_utf8(read(&root.join("reports/fe.jsonl"))).unwrap();
    let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines[0]["record"], "run");
    assert_eq!(lines[0]["seed"], 3);
    assert_eq!(lines[0]["config_hash"].as_str().unwrap().len(), 64);
    let census = &lines.last().unwrap()["census"];
    assert_eq!(census["agnostic"], 0);
    assert_eq!(census["specific"], 0);
    assert_eq!(census["classifier"], 8 * 4 + 4);
}

#[test]
fn joint_training_serves_every_head() {
    let (_dir, cfg, root) = setup(OPTIM);
    ok(&["train", "--config", &cfg, "--protocol", "joint-round-robin", "--name", "joint"]);
    let ckpt = root.join("checkpoints/joint.ckpt");
    ok(&["eval", "--config", &cfg, "--checkpoint", path(&ckpt), "--name", "joint"]);
    let r = json(&root.join("results/joint.json"));
    assert_eq!(r["domains"].as_object().unwrap().len(), 2);
    assert_eq!(r["mode"], "oracle-domain");
}

#[test]
fn reruns_are_byte_identical() {
    let (_dir, cfg, root) = setup(OPTIM);
    let run = |tag: &str| {
        ok(&["train", "--config", &cfg, "--protocol", "scratch", "--domain", "a", "--name", tag]);
        let ckpt = root.join(format!("checkpoints/{tag}.ckpt"));
        ok(&["eval", "--config", &cfg, "--checkpoint", path(&ckpt), "--domain", "a", "--name", "same"]);
        (read(&ckpt), read(&root.join(format!("reports/{tag}.jsonl"))), read(&root.join("results/same.json")))
    };
    let (c1, r1, e1) = run("x");
    let (c2, r2, e2) = run("x");
    assert_eq!(c1, c2);
    assert_eq!(r1, r2);
    assert_eq!(e1, e2);
}

#[test]
fn eval_errors() {
    let (_dir, cfg, root) = setup(OPTIM);
    ok(&["train", "--config", &cfg, "--protocol", "scratch", "--domain", "a", "--name", "base"]);
    let base = root.join("checkpoints/base.ckpt");
    let err = fails(&["eval", "--config", &cfg, "--checkpoint", path(&base)], 1);
    assert!(err.contains("no heads for: b"), "{err}");
    let err = fails(&["eval", "--config", &cfg, "--checkpoint", path(&base), "--domain", "a", "--mode", "predicted"], 1);
    assert!(err.contains("--predictor"), "{err}");
}

#[test]
fn predicted_mode_routes_through_the_domain_predictor() {
    let (_dir, cfg, root) = setup(OPTIM);
    ok(&["train", "--config", &cfg, "--protocol", "joint-round-robin", "--name", "joint"]);
    let out = ok(&["predict-domain-train", "--config", &cfg]);
    assert!(out.contains("domain accuracy"), "{out}");
    let predictor = root.join("checkpoints/domain-predictor.ckpt");
    assert!(root.join("checkpoints/domain-predictor.norm.json").exists());
    let ckpt = root.join("checkpoints/joint.ckpt");
    ok(&["eval", "--config", &cfg, "--checkpoint", path(&ckpt), "--mode", "predicted", "--predictor", path(&predictor), "--name", "p"]);
    let r = json(&root.join("results/p.json"));
    assert_eq!(r["mode"], "predicted-domain");
    assert!(r["domain_accuracy"].as_f64().unwrap() >= 0.0);
}

#[test]
fn memorized_training_split_has_zero_error() {
    let optim = r#"{"epochs": 40, "batch_size": 10, "base_lr": 0.05, "lr_drops": []}"#;
    let dir = TempDir::new().unwrap();
    let text = format!(
        r#"{{"experiment": "memo", "output": {:?},
            "domains": [{{"name": "m", "classes": 2, "content": "polygons", "image_size": 8,
                          "train_per_class": 5, "val_per_class": 2, "test_per_class": 2, "seed": 3}}],
            "network": {{"input_size": 8, "adapter_mode": "none"}}, "optim": {optim}}}"#,
        dir.path().join("out")
    );
    let cfg = dir.path().join("memo.cfg");
    std::fs::write(&cfg, text).unwrap();
    let cfg = path(&cfg);
    ok(&["gen", "--config", cfg]);
    ok(&["train", "--config", cfg, "--protocol", "scratch", "--name", "memo"]);
    let root = dir.path().join("out/memo");
    let ckpt = root.join("checkpoints/memo.ckpt");
    ok(&["eval", "--config", cfg, "--checkpoint", path(&ckpt), "--split", "train", "--name", "memo"]);
    let r = json(&root.join("results/memo.json"));
    assert_eq!(r["domains"]["m"]["count"], 10);
    assert_eq!(r["domains"]["m"]["error"], 0.0);
}

#[test]
fn divergence_is_a_runtime_failure() {
    let (_dir, cfg, _root) = setup(r#"{"epochs": 2, "batch_size": 8, "base_lr": 1e30}"#);
    let err = fails(&["train", "--config", &cfg, "--protocol", "scratch", "--domain", "a"], 2);
    assert!(err.contains("diverged"), "{err}");
}

fn write_results(path: &Path, errors: &[(&str, f64)]) {
    let domains: serde_json::Map<String, Value> = errors
        .iter()
        .map(|(n, e)| (n.to_string(), serde_json::json!({"error": e, "accuracy": 1.0 - e, "count": 100})))
        .collect();
    std::fs::write(path, serde_json::json!({"mode": "oracle-domain", "domains": domains}).to_string()).unwrap();
}

#[test]
fn scoring_a_reference_against_itself_gives_250_per_domain() {
    let dir = TempDir::new().unwrap();
    let results = dir.path().join("results");
    std::fs::create_dir(&results).unwrap();
    let r = results.join("ref.json");
    write_results(&r, &[("x", 0.3), ("y", 0.45), ("z", 0.1)]);
    let out = ok(&["score", "--results", path(&r), "--reference", path(&r)]);
    assert!(out.contains("250.00"), "{out}");
    let record = json(&dir.path().join("scores/ref.json"));
    assert_eq!(record["report"]["total_rounded"], 750);
    assert!(dir.path().join("scores/ref.txt").exists());
}

#[test]
fn score_input_errors() {
    let dir = TempDir::new().unwrap();
    let empty = dir.path().join("empty.json");
    std::fs::write(&empty, "").unwrap();
    let err = fails(&["score", "--results", path(&empty), "--reference", path(&empty)], 1);
    assert!(err.contains("line 1"), "{err}");

    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    write_results(&a, &[("x", 0.3), ("y", 0.4)]);
    write_results(&b, &[("x", 0.3)]);
    let err = fails(&["score", "--results", path(&a), "--reference", path(&b)], 1);
    assert!(err.contains("results only [y]"), "{err}");
    fails(&["score", "--results", path(&a)], 1);
    fails(&["score"], 1);
}

#[test]
fn published_vectors_self_test_passes() {
    let out = ok(&["score", "--published-vectors"]);
    assert_eq!(out.matches(" ok").count(), 3, "{out}");
}

#[test]
fn help_and_version_exit_zero() {
    ok(&["--help"]);
    ok(&["--version"]);
    fails(&["frobnicate"], 1);
}

#[test]
fn bundled_fixture_is_valid() {
    let cfg = resadapt_cli::ExperimentConfig::parse(resadapt_cli::DESK_DECATHLON_CFG).unwrap();
    assert_eq!(cfg.domains.len(), 5);
    for d in &cfg.domains {
        let train = d.classes * d.train_per_class;
        assert!((10..=50).contains(&d.classes), "{}", d.name);
        assert!((40..=2000).contains(&train), "{}", d.name);
        assert_eq!(d.image_size, 32);
    }
}
