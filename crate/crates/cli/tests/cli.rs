use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn hcpo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hcpo"))
        .args(args)
        .env_remove("HCPO_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Small, fast training settings on the spread gridworld.
const FAST: [&str; 8] = [
    "--override",
    "env.kind=spread",
    "--override",
    "train.batch_size=2",
    "--override",
    "train.k=2",
    "--override",
    "train.eval_episodes=2",
];

fn train_args<'a>(out: &'a str, iterations: &'a str) -> Vec<&'a str> {
    let mut args = vec!["train", "--out", out, "--override", iterations];
    args.extend(FAST);
    args
}

#[test]
fn missing_config_file_names_the_path() {
    let o = hcpo(&["train", "--config", "/nonexistent/run.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/nonexistent/run.toml"), "{}", stderr(&o));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[train]\niteratons = 3\n").unwrap();
    let o = hcpo(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("iteratons"), "{}", stderr(&o));
}

#[test]
fn invalid_suite_is_a_usage_error() {
    let o = hcpo(&["verify", "everything"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn single_iteration_run_writes_complete_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = hcpo(&train_args(out.to_str().unwrap(), "train.iterations=1"));
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert!(lines[0].starts_with("# hcpo-metrics"));
    assert_eq!(lines.len(), 3, "schema line, header, one iteration");
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["status"], "completed");
    assert_eq!(manifest["config"]["train"]["iterations"], 1);
    for a in manifest["artifacts"].as_array().unwrap() {
        assert!(out.join(a.as_str().unwrap()).exists(), "{a}");
    }
    assert!(out.join("checkpoints/iter_00001.ckpt").exists());
}

#[test]
fn identical_runs_give_identical_metrics_and_manifests_replay() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let mut args = train_args(out.to_str().unwrap(), "train.iterations=3");
        args.extend(["--seed", "7", "--parallelism", "1"]);
        let o = hcpo(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(out.join("metrics.csv")).unwrap()
    };
    let first = run("a");
    assert_eq!(first, run("b"));

    let replay = dir.path().join("replay");
    let manifest = dir.path().join("a/manifest.json");
    let o = hcpo(&["train", "--config", manifest.to_str().unwrap(), "--out", replay.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(first, std::fs::read(replay.join("metrics.csv")).unwrap());
}

#[test]
fn lemma_suite_certifies_random_instances() {
    let dir = tempfile::tempdir().unwrap();
    let o = hcpo(&["verify", "lemmas", "--seed-count", "100", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = read_json(&dir.path().join("verify_lemmas.json"));
    assert_eq!(report["instances"], 100);
    assert!(report["max_error"].as_f64().unwrap() < 1e-10);
}

#[test]
fn bound_suite_reports_equality_for_identical_policies() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = hcpo(&["verify", "bounds", "--seed-count", "10", "--override", "verify.perturbation=0", "--out", out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = read_json(&dir.path().join("verify_bounds.json"));
    assert_eq!(report["equality_cases"], 10);

    let o = hcpo(&["verify", "bounds", "--seed-count", "20", "--out", out]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read_json(&dir.path().join("verify_bounds.json"))["bound_violations"], 0);
}

#[test]
fn monotonicity_suite_reads_a_tabular_run() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = hcpo(&[
        "train",
        "--out",
        run.to_str().unwrap(),
        "--override",
        "env.kind=tabular",
        "--override",
        "train.iterations=3",
        "--override",
        "train.k=2",
        "--override",
        "train.batch_size=4",
        "--override",
        "train.gamma=0.9",
        "--override",
        "train.eval_interval=0",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpts = run.join("checkpoints");
    let verify = |out: &str| {
        hcpo(&[
            "verify",
            "monotonicity",
            "--checkpoints",
            ckpts.to_str().unwrap(),
            "--override",
            "env.kind=tabular",
            "--override",
            "verify.min_fraction=0",
            "--out",
            out,
        ])
    };
    let o = verify(dir.path().to_str().unwrap());
    assert!(o.status.success(), "{}", stderr(&o));
    let report = read_json(&dir.path().join("verify_monotonicity.json"));
    assert_eq!(report["audit"]["objective"].as_array().unwrap().len(), 4);

    std::fs::write(ckpts.join("iter_00004.ckpt"), b"garbage").unwrap();
    let o = verify(dir.path().to_str().unwrap());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("iter_00004.ckpt") && err.contains("magic"), "{err}");
}

#[test]
fn evaluate_reports_returns_of_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = hcpo(&train_args(run.to_str().unwrap(), "train.iterations=1"));
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = run.join("checkpoints/iter_00001.ckpt");
    let out = dir.path().join("eval");
    let o = hcpo(&[
        "evaluate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--episodes",
        "5",
        "--override",
        "env.kind=spread",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = read_json(&out.join("evaluation.json"));
    assert_eq!(report["returns"].as_array().unwrap().len(), 5);
    assert_eq!(report["mode"], "decentralized");
}

fn ablate_rows(dir: &Path, extra: &[&str]) -> Vec<csv::StringRecord> {
    let mut args = vec![
        "ablate",
        "--out",
        dir.to_str().unwrap(),
        "--seeds",
        "1",
        "--override",
        "train.iterations=1",
        "--override",
        "train.batch_size=2",
        "--override",
        "train.eval_episodes=2",
    ];
    args.extend(extra);
    let o = hcpo(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut r = csv::Reader::from_path(dir.join("ablate.csv")).unwrap();
    assert_eq!(r.headers().unwrap().iter().take(5).collect::<Vec<_>>(), ["variant", "k", "seeds", "median", "iqr"]);
    r.records().map(Result::unwrap).collect()
}

#[test]
fn ablation_with_one_variant_has_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let rows = ablate_rows(dir.path(), &["--variants", "hcpo"]);
    assert_eq!(rows.len(), 1);
    assert_eq!(&rows[0][0], "hcpo");
}

#[test]
fn instruction_sweep_records_k() {
    let dir = tempfile::tempdir().unwrap();
    let rows = ablate_rows(dir.path(), &["--variants", "hcpo", "--k", "1,4,10"]);
    let ks: Vec<&str> = rows.iter().map(|r| r.get(1).unwrap()).collect();
    assert_eq!(ks, ["1", "4", "10"]);
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_hcpo"))
        .args(["verify", "lemmas", "--seed-count", "2", "--seed", "5"])
        .env("HCPO_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("verify-lemmas-seed5/verify_lemmas.json").exists());
}
