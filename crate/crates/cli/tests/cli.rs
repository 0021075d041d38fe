use std::path::Path;
use std::process::{Command, Output};

use conceptlab::checkpoint::Checkpoint;
use conceptlab_core::data::load_dataset;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_conceptlab"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).env_remove("CONCEPTLAB_BIND").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const DATASET: &str = r#"{"kind": "synthetic", "group_sizes": [2, 2, 2, 2], "noise": [0.1, 0.2, 0.1, 0.2],
    "weights": [0, 1, 0, 1.2, 0, 0.8, 0, 1], "threshold": 2.0, "jitter": 0.3,
    "incomplete_fraction": 0.5, "n_train": 200, "n_test": 60, "seed": 3}"#;

fn write_run(dir: &Path, variant: &str) -> String {
    let run = format!(
        r#"{{"dataset": {DATASET},
            "model": {{"variant": "{variant}", "emb_width": 4, "hidden_f": [8], "hidden_psi": [8], "backbone_hidden": [8]}},
            "train": {{"epochs_max": 3, "batch_size": 32, "seed": 5}}}}"#
    );
    let path = dir.join(format!("{variant}.json"));
    std::fs::write(&path, run).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn train_and_curve_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let cfg = write_run(dir.path(), "IntCEM");
    ok(&["train", "--config", &cfg, "--out", &p("a.ck"), "--log", &p("a.csv")]);
    ok(&["train", "--config", &cfg, "--out", &p("b.ck"), "--log", &p("b.csv")]);
    let log = std::fs::read(p("a.csv")).unwrap();
    assert_eq!(log, std::fs::read(p("b.csv")).unwrap());
    assert!(String::from_utf8_lossy(&log).lines().count() > 1);
    assert_eq!(std::fs::read(p("a.ck")).unwrap(), std::fs::read(p("b.ck")).unwrap());

    let ck = Checkpoint::load(Path::new(&p("a.ck"))).unwrap();
    assert_eq!(ck.meta.seed, 5);
    assert_eq!(ck.meta.config_hash.len(), 64);
    assert!(ck.meta.final_metrics.contains_key("test_task_accuracy"));

    for policy in ["ucp", "random", "learned_psi", "skyline", "cva"] {
        ok(&["curve", "--checkpoint", &p("a.ck"), "--policy", policy, "--seed", "7", "--out", &p("c1.csv")]);
        ok(&["curve", "--checkpoint", &p("a.ck"), "--policy", policy, "--seed", "7", "--out", &p("c2.csv")]);
        let a = std::fs::read_to_string(p("c1.csv")).unwrap();
        assert_eq!(a, std::fs::read_to_string(p("c2.csv")).unwrap(), "{policy}");
        // Header plus one row per group count 0..=2 (half the groups are annotated).
        assert_eq!(a.lines().count(), 4, "{policy}: {a}");
    }
    ok(&[
        "curve", "--checkpoint", &p("a.ck"), "--policy", "coop", "--coop-alpha", "1", "--coop-beta", "0.5",
        "--adversarial", "--max-groups", "1", "--out", &p("c3.csv"),
    ]);
    assert_eq!(std::fs::read_to_string(p("c3.csv")).unwrap().lines().count(), 3);

    let grid = ok(&["coop-grid", "--checkpoint", &p("a.ck"), "--out", &p("grid.json")]);
    assert!(grid.starts_with("alpha "));
    ok(&["bc-train", "--checkpoint", &p("a.ck"), "--out", &p("bc.ck")]);
    assert!(Checkpoint::load(Path::new(&p("bc.ck"))).unwrap().bc.is_some());
    ok(&["curve", "--checkpoint", &p("bc.ck"), "--policy", "bc_skyline", "--out", &p("c4.csv")]);
}

#[test]
fn sweep_reports_the_selection() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_run(dir.path(), "IntCEM");
    let out = dir.path().join("best.ck");
    let text = ok(&["sweep", "--config", &cfg, "--lambdas", "5,0.1", "--out", out.to_str().unwrap()]);
    let last = text.lines().last().unwrap();
    assert!(last.starts_with("selected lambda_roll "), "{text}");
    let lambda: f64 = last.split_whitespace().nth(2).unwrap().parse().unwrap();
    assert!(lambda == 5.0 || lambda == 0.1);
    let ck = Checkpoint::load(&out).unwrap();
    assert_eq!(ck.meta.train.unwrap().lambda_roll, lambda);
}

#[test]
fn gen_data_writes_a_loadable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, DATASET).unwrap();
    let out = dir.path().join("data");
    ok(&["gen-data", "--spec", spec.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let data = load_dataset(&out).unwrap();
    assert_eq!((data.train.len(), data.test.len()), (200, 60));
    assert_eq!(data.train.n_concepts(), 4);
}

#[test]
fn verify_passes() {
    let text = ok(&["verify"]);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 6, "{text}");
}

#[test]
fn bad_input_exits_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ck");
    std::fs::write(&junk, b"CLCK\x01\x00\x00\x00garbage").unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["train", "--frobnicate"],
        vec!["nonsense"],
        vec!["curve", "--checkpoint", junk.to_str().unwrap(), "--policy", "ucp", "--out", "x.csv"],
        vec!["curve", "--checkpoint", "/nonexistent.ck", "--policy", "ucp", "--out", "x.csv"],
        vec!["train", "--config", junk.to_str().unwrap(), "--out", "x.ck"],
    ];
    for args in cases {
        let out = run(&args);
        assert!(!out.status.success(), "{args:?}");
        assert!(!out.stderr.is_empty(), "{args:?}");
    }
    let cfg = write_run(dir.path(), "CEM");
    let ck = dir.path().join("cem.ck");
    ok(&["train", "--config", &cfg, "--out", ck.to_str().unwrap()]);
    let out = run(&["curve", "--checkpoint", ck.to_str().unwrap(), "--policy", "learned_psi", "--out", "x.csv"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no learned policy"));
    let out = run(&["curve", "--checkpoint", ck.to_str().unwrap(), "--policy", "psychic", "--out", "x.csv"]);
    assert!(!out.status.success());
}
