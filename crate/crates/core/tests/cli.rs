//! Command-line behaviour: outputs, manifests, errors and exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn esnv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_esnv")).args(args).env_remove("ESNV_SEED").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = esnv(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn fails(args: &[&str], code: i32) -> String {
    let o = esnv(args);
    assert_eq!(o.status.code(), Some(code), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn build(dir: &Path, n: &str) -> std::path::PathBuf {
    let ds = dir.join("ds");
    ok(&["--seed", "5", "dataset", "build", "--fixtures", "--n-samples", n, "--out", s(&ds)]);
    ds
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn dataset_build_writes_split_and_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let ds = build(dir.path(), "12");
    let split = read_json(&ds.join("split.json"));
    assert_eq!(split["test"].as_array().unwrap().len(), 3);
    assert_eq!(split["train"].as_array().unwrap().len(), 9);
    let pairs = fs::read_to_string(ds.join("pairs.jsonl")).unwrap();
    assert_eq!(pairs.lines().count(), 9);
    let m = read_json(&ds.join("manifest.json"));
    assert_eq!(m["seed"], 5);
    assert!(m["outputs"].as_object().unwrap().len() >= 6);
    assert!(ds.join("images/scene-0000.ppm").exists());
}

#[test]
fn dataset_build_is_deterministic_and_seed_sensitive() {
    let d = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let out = d.path().join(name);
        ok(&["--seed", seed, "dataset", "build", "--fixtures", "--n-samples", "12", "--out", s(&out)]);
        (fs::read(out.join("split.json")).unwrap(), fs::read(out.join("pairs.jsonl")).unwrap())
    };
    assert_eq!(run("a", "1"), run("b", "1"));
    assert_ne!(run("c", "1").0, run("d", "2").0);
}

#[test]
fn seed_from_environment() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("ds");
    let o = Command::new(env!("CARGO_BIN_EXE_esnv"))
        .args(["dataset", "build", "--fixtures", "--n-samples", "4", "--out", s(&out)])
        .env("ESNV_SEED", "17")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(read_json(&out.join("manifest.json"))["seed"], 17);
}

#[test]
fn external_corpus_with_missing_image_names_sample() {
    let d = tempfile::tempdir().unwrap();
    let corpus = d.path().join("c.jsonl");
    fs::write(
        &corpus,
        r#"{"id":"walk-1","image":"nope.ppm","conversations":[{"from":"human","value":"<image> What should the robot do?"},{"from":"gpt","value":"The robot should stop."}]}
"#,
    )
    .unwrap();
    let err = fails(&["dataset", "build", "--data", s(&corpus), "--out", s(&d.path().join("o"))], 1);
    assert!(err.contains("walk-1"), "{err}");
}

#[test]
fn external_corpus_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let src = build(d.path(), "8");
    let out = d.path().join("rebuilt");
    ok(&["--seed", "5", "dataset", "build", "--data", s(&src.join("corpus.jsonl")), "--n-test", "2", "--out", s(&out)]);
    let split = read_json(&out.join("split.json"));
    assert_eq!(split["test"].as_array().unwrap().len(), 2);
    // image references now resolve from anywhere
    let line = fs::read_to_string(out.join("train.jsonl")).unwrap();
    let first: Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    assert!(Path::new(first["image"].as_str().unwrap()).is_absolute());
}

#[test]
fn train_eval_report_infer_flow() {
    let d = tempfile::tempdir().unwrap();
    let ds = build(d.path(), "8");
    let sft = d.path().join("sft");
    let dpo = d.path().join("dpo");
    let out = ok(&["train", "sft", "--data", s(&ds), "--out", s(&sft), "--epochs", "2"]);
    assert!(out.contains("SFT(projector)"), "{out}");
    let log = fs::read_to_string(sft.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2 * 2 + 1);
    assert!(log.lines().last().unwrap().contains("summary"));

    let ck = sft.join("checkpoint.esnv");
    ok(&["train", "dpo", "--data", s(&ds), "--init", s(&ck), "--out", s(&dpo), "--epochs", "1", "--beta", "0.2"]);
    assert_eq!(read_json(&dpo.join("manifest.json"))["config"]["beta"], 0.2);

    let ev = d.path().join("eval");
    let ck = dpo.join("checkpoint.esnv");
    let table = ok(&["eval", "--data", s(&ds), "--init", s(&ck), "--out", s(&ev), "--max-new-tokens", "6"]);
    assert!(table.contains("SFT(projector) + DPO(lora)"), "{table}");
    let report = read_json(&ev.join("report.json"));
    assert_eq!(report["n_samples"], 2);
    assert_eq!(report["settings"]["sms_transform"], "1/(1+emd)");

    // a gold baseline scored with the same provider sits in the same table
    let test = fs::read_to_string(ds.join("test.jsonl")).unwrap();
    let responses: Vec<Value> = test
        .lines()
        .map(|l| {
            let v: Value = serde_json::from_str(l).unwrap();
            let conv = v["conversations"].as_array().unwrap();
            serde_json::json!({"id": v["id"], "response": conv.last().unwrap()["value"]})
        })
        .collect();
    let base = d.path().join("gold.json");
    fs::write(&base, serde_json::json!({"model": "Gold", "responses": responses}).to_string()).unwrap();
    let rep = d.path().join("rep");
    let table = ok(&[
        "report",
        s(&ev.join("report.json")),
        s(&base),
        "--data",
        s(&ds),
        "--init",
        s(&ck),
        "--out",
        s(&rep),
    ]);
    let gold = table.lines().find(|l| l.starts_with("Gold")).unwrap();
    assert_eq!(gold.matches("**1.000**").count(), 6, "{table}");
    assert!(fs::read_to_string(rep.join("table.csv")).unwrap().starts_with("model,"));

    let img = ds.join("images/scene-0000.ppm");
    let answers = ok(&[
        "infer",
        "--init",
        s(&ck),
        "--vocab",
        s(&ds),
        "--image",
        s(&img),
        "--question",
        "What do you perceive from the image?",
        "--question",
        "What should the robot do?",
        "--max-new-tokens",
        "4",
    ]);
    assert_eq!(answers.lines().count(), 2);
}

#[test]
fn dpo_requires_checkpoint_and_sft_rejects_beta() {
    let d = tempfile::tempdir().unwrap();
    let ds = build(d.path(), "4");
    let err = fails(&["train", "dpo", "--data", s(&ds), "--out", s(&d.path().join("x"))], 1);
    assert!(err.contains("stage-1 checkpoint required"), "{err}");
    fails(&["train", "sft", "--data", s(&ds), "--out", s(&d.path().join("y")), "--beta", "0.1"], 1);
    fails(&["train", "sft", "--data", s(&ds), "--out", s(&d.path().join("z")), "--trainable", "decoder"], 1);
}

#[test]
fn numeric_failure_exits_two() {
    let d = tempfile::tempdir().unwrap();
    let ds = build(d.path(), "4");
    let err = fails(&["train", "sft", "--data", s(&ds), "--out", s(&d.path().join("x")), "--lr", "1e300", "--epochs", "3"], 2);
    assert!(err.contains("error:"), "{err}");
}

#[test]
fn config_file_and_flag_precedence() {
    let d = tempfile::tempdir().unwrap();
    let ds = build(d.path(), "4");
    let cfg = d.path().join("run.cfg");
    fs::write(&cfg, "# stage I\nepochs = 3\nlr = 0.001\nbatch-size = 2\n").unwrap();
    let out = d.path().join("sft");
    ok(&["--config", s(&cfg), "train", "sft", "--data", s(&ds), "--out", s(&out), "--epochs", "1"]);
    let m = read_json(&out.join("manifest.json"));
    assert_eq!(m["config"]["epochs"], 1);
    assert_eq!(m["config"]["lr"], 0.001);
    assert_eq!(m["config"]["batch_size"], 2);

    fs::write(&cfg, "bogus = 1\n").unwrap();
    let err = fails(&["--config", s(&cfg), "train", "sft", "--data", s(&ds), "--out", s(&out)], 1);
    assert!(err.contains("bogus"), "{err}");
}

#[test]
fn report_rejects_unknown_baseline_ids() {
    let d = tempfile::tempdir().unwrap();
    let ds = build(d.path(), "4");
    let base = d.path().join("b.json");
    fs::write(&base, r#"{"model":"X","responses":[{"id":"nowhere","response":"The robot should stop."}]}"#).unwrap();
    let err = fails(&["report", s(&base), "--data", s(&ds), "--provider", "hash"], 1);
    assert!(err.contains("nowhere"), "{err}");
}

#[test]
fn help_and_usage_codes() {
    assert_eq!(esnv(&["--help"]).status.code(), Some(0));
    assert_eq!(esnv(&["frobnicate"]).status.code(), Some(1));
}
