use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "corpus": {
    "grid": [3, 3, 3],
    "labels": 3,
    "descriptors": [
      {"dim": 2, "cost": 1, "informativeness": 2.0, "noise": 1.0},
      {"dim": 3, "cost": 3, "informativeness": 3.0, "noise": 1.0},
      {"dim": 3, "cost": 4, "informativeness": 3.5, "noise": 1.0}
    ],
    "smoothing": 1,
    "seeds_per_label": 1,
    "seed": 5
  },
  "videos": 6,
  "budgets": [0.3, 0.9],
  "base_types": 2,
  "bank": {"epochs": 5},
  "crf": {"epochs": 2},
  "policy": {"max_iters": 1, "patience": 1, "max_states": 40},
  "qlearn": {"episodes": 50}
}"#;

fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_budgetseg"))
        .args(args)
        .arg("--out")
        .arg(dir.join("out"))
        .arg("--config")
        .arg(dir.join("config.json"))
        .output()
        .expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("config.json"), TINY).unwrap();
    dir
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn staged_pipeline() {
    let dir = setup();
    let out = dir.path().join("out");
    ok(&cli(dir.path(), &["gen"]));
    assert!(out.join("corpus.json").exists());
    ok(&cli(dir.path(), &["train-classifiers"]));
    ok(&cli(dir.path(), &["train-crf"]));
    assert!(out.join("crf_base.json").exists() && out.join("crf_full.json").exists());

    ok(&cli(dir.path(), &["train-policy", "--budget", "0.3", "--variant", "NhbRnk"]));
    let log = fs::read_to_string(out.join("train_log_NhbRnk_0.3.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "iteration,policy_train_acc,rollout_states,elapsed");
    assert!(out.join("policies/NhbRnk_0.3.json").exists());

    ok(&cli(dir.path(), &["infer", "--budget", "0.3", "--variant", "NhbRnk"]));
    let row = fs::read_to_string(out.join("infer/NhbRnk_0.3.csv")).unwrap();
    assert_eq!(row.lines().next().unwrap(), "variant,budget,class_0,class_1,class_2,avg,cost_spent");
    assert!(row.lines().nth(1).unwrap().starts_with("NhbRnk,0.3,"));
    ok(&cli(dir.path(), &["infer", "--budget", "12", "--variant", "Baseline2"]));
    assert!(out.join("infer/Baseline2_12.csv").exists());
}

#[test]
fn eval_then_hist() {
    let dir = setup();
    let out = dir.path().join("out");
    ok(&cli(dir.path(), &["eval", "--seed", "3", "--weighted-accuracy", "false"]));
    let results = fs::read_to_string(out.join("results.csv")).unwrap();
    let lines: Vec<&str> = results.lines().collect();
    assert_eq!(lines[0], "variant,budget,class_0,class_1,class_2,avg,cost_spent");
    // 7 variants at 2 budgets
    assert_eq!(lines.len(), 1 + 14);
    let unbounded: Vec<&str> = lines.iter().filter(|l| l.starts_with("UnboundedCRF,")).copied().collect();
    assert_eq!(unbounded.len(), 2);
    assert_eq!(unbounded[0], unbounded[1]);

    fs::remove_file(out.join("hist_budget.csv")).unwrap();
    ok(&cli(dir.path(), &["hist", "--variant", "Full"]));
    let hist = fs::read_to_string(out.join("hist_budget.csv")).unwrap();
    assert!(hist.lines().count() >= 2);
    assert!(out.join("hist_deciles.csv").exists());
}

#[test]
fn eval_is_reproducible() {
    let a = setup();
    let b = setup();
    ok(&cli(a.path(), &["eval"]));
    ok(&cli(b.path(), &["eval"]));
    let ra = fs::read(a.path().join("out/results.csv")).unwrap();
    let rb = fs::read(b.path().join("out/results.csv")).unwrap();
    assert_eq!(ra, rb);
}

#[test]
fn exit_codes() {
    let dir = setup();
    fs::write(dir.path().join("config.json"), r#"{"budgets": [-1]}"#).unwrap();
    assert_eq!(cli(dir.path(), &["gen"]).status.code(), Some(2));
    fs::write(dir.path().join("config.json"), r#"{"variants": ["Nope"]}"#).unwrap();
    assert_eq!(cli(dir.path(), &["gen"]).status.code(), Some(2));

    let dir = setup();
    // no classifiers saved yet
    assert_eq!(cli(dir.path(), &["train-crf"]).status.code(), Some(3));
    // no policy trained yet
    assert_eq!(
        cli(dir.path(), &["infer", "--budget", "0.3", "--variant", "RndRnk"]).status.code(),
        Some(3)
    );
    assert_eq!(cli(dir.path(), &["hist"]).status.code(), Some(3));
    assert_eq!(cli(dir.path(), &["infer", "--budget", "x", "--variant", "Full"]).status.code(), Some(2));
}
