//! End-to-end behaviour of the `medembed` binary.

use std::path::Path;
use std::process::{Command, Output};

fn medembed(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_medembed"))
        .current_dir(cwd)
        .args(args)
        .env_remove("MEDEMBED_LR")
        .output()
        .expect("binary runs")
}

fn ok(cwd: &Path, args: &[&str]) {
    let out = medembed(cwd, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

const TINY: &str = "emb_dim = 16\nhidden = 16\nrnn_hidden = 8\nmax_tokens = 12\nepochs = 1\nlr = 2e-3\nbatch_size = 64\ntask = mort\n";

fn cohort(dir: &Path, spec: &str, name: &str) {
    let raw = format!("raw_{name}");
    ok(
        dir,
        &[
            "generate",
            "--spec",
            spec,
            "--patients",
            "400",
            "--out",
            &raw,
        ],
    );
    ok(dir, &["etl", "--in", &raw, "--out", name]);
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let out = medembed(d.path(), &["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(64));
    let out = medembed(d.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(64));
}

#[test]
fn help_exits_cleanly() {
    let d = tempfile::tempdir().unwrap();
    let out = medembed(d.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("transfer"));
}

#[test]
fn config_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("bad.conf"), "colour = red\n").unwrap();
    let out = medembed(
        d.path(),
        &[
            "train",
            "--config",
            "bad.conf",
            "--dataset",
            "x",
            "--out",
            "o",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("colour") && err.contains("value_mode"),
        "{err}"
    );

    let out = medembed(
        d.path(),
        &["train", "--encoder", "lstm", "--dataset", "x", "--out", "o"],
    );
    assert_eq!(out.status.code(), Some(2));
    let out = medembed(
        d.path(),
        &[
            "train",
            "--seed",
            "1",
            "--seeds",
            "0..3",
            "--dataset",
            "x",
            "--out",
            "o",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    let out = medembed(d.path(), &["report", "--in", ".", "--style", "fancy"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn env_overrides_file_and_flags_override_env() {
    let d = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_medembed"))
        .current_dir(d.path())
        .args(["train", "--dataset", "x", "--out", "o"])
        .env("MEDEMBED_LR", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    // A valid flag replaces the broken environment value; the missing dataset is then an input error.
    let out = Command::new(env!("CARGO_BIN_EXE_medembed"))
        .current_dir(d.path())
        .args(["train", "--lr", "0.01", "--dataset", "x", "--out", "o"])
        .env("MEDEMBED_LR", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(1),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn missing_input_exits_1() {
    let d = tempfile::tempdir().unwrap();
    let out = medembed(d.path(), &["etl", "--in", "missing", "--out", "o"]);
    assert_eq!(out.status.code(), Some(1));
    let out = medembed(d.path(), &["report", "--in", "."]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn generate_is_reproducible_and_manifested() {
    let d = tempfile::tempdir().unwrap();
    ok(
        d.path(),
        &[
            "generate",
            "--spec",
            "default_b",
            "--patients",
            "200",
            "--out",
            "r1",
        ],
    );
    ok(
        d.path(),
        &[
            "generate",
            "--spec",
            "default_b",
            "--patients",
            "200",
            "--out",
            "r2",
        ],
    );
    let h1 = medembed::manifest::content_hash(&d.path().join("r1")).unwrap();
    let h2 = medembed::manifest::content_hash(&d.path().join("r2")).unwrap();
    assert_eq!(h1, h2);
    let m = json(&d.path().join("r1/manifest.json"));
    assert_eq!(m["config"]["spec"], "default_b");
    assert_eq!(m["command"][0], "generate");
    assert!(!m["outputs"].as_array().unwrap().is_empty());

    ok(
        d.path(),
        &[
            "generate",
            "--spec",
            "default_b",
            "--patients",
            "200",
            "--seed",
            "99",
            "--out",
            "r3",
        ],
    );
    let h3 = medembed::manifest::content_hash(&d.path().join("r3")).unwrap();
    assert_ne!(h1, h3);
}

#[test]
fn train_transfer_pool_report_pipeline() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    std::fs::write(p.join("tiny.conf"), TINY).unwrap();
    cohort(p, "default_a", "a");
    cohort(p, "default_b", "b");
    let etl = json(&p.join("a/manifest.json"));
    assert_eq!(etl["inputs"][0]["path"], "raw_a");

    let common = [
        "--config",
        "tiny.conf",
        "--encoder",
        "codeemb",
        "--value-mode",
        "vc",
    ];
    let mut train = vec!["train"];
    train.extend(common);
    train.extend(["--seeds", "0..1", "--dataset", "a", "--out", "runs/single"]);
    ok(p, &train);
    for s in 0..2 {
        let dir = p.join(format!("runs/single/seed_{s}"));
        for f in [
            "params.json",
            "vocab.json",
            "model.json",
            "train_report.json",
        ] {
            assert!(dir.join(f).is_file(), "missing {f}");
        }
    }
    let m = json(&p.join("runs/single/manifest.json"));
    assert_eq!(m["config"]["seeds"], "0,1");
    assert_eq!(m["config"]["emb_dim"], "16");
    assert_eq!(m["inputs"][0]["path"], "a/cohort.jsonl");
    let rows = medembed::experiments::read_rows(&p.join("runs/single/seeds.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows
        .iter()
        .all(|r| r.scenario == "single/a" && r.task == "mort"));
    let log = json(&p.join("runs/single/access_log.json"));
    assert!(!log.as_array().unwrap().is_empty());

    let mut train_b = vec!["train"];
    train_b.extend(common);
    train_b.extend([
        "--seeds",
        "0..1",
        "--dataset",
        "b",
        "--out",
        "runs/single_b",
    ]);
    ok(p, &train_b);

    let mut transfer = vec!["transfer"];
    transfer.extend(common);
    transfer.extend([
        "--seeds",
        "0..1",
        "--dataset",
        "a",
        "--target",
        "b",
        "--from",
        "runs/single",
    ]);
    transfer.extend(["--set", "ratios=0,0.5", "--out", "runs/transfer"]);
    ok(p, &transfer);
    let rows = medembed::experiments::read_rows(&p.join("runs/transfer/seeds.csv")).unwrap();
    assert_eq!(rows.len(), 4);

    let mut evaluate = vec!["evaluate"];
    evaluate.extend(common);
    evaluate.extend([
        "--seed",
        "0",
        "--dataset",
        "a",
        "--model",
        "runs/single/seed_0",
        "--out",
        "ev",
    ]);
    ok(p, &evaluate);
    let ev = json(&p.join("ev/metrics.json"));
    let single = medembed::experiments::read_rows(&p.join("runs/single/seeds.csv")).unwrap();
    let seed0 = single.iter().find(|r| r.seed == 0).unwrap().metric;
    assert!((ev[0]["metric"].as_f64().unwrap() - seed0).abs() < 1e-12);

    ok(
        p,
        &[
            "pca",
            "--seed",
            "0",
            "--dataset",
            "a",
            "--target",
            "b",
            "--model",
            "runs/single/seed_0",
            "--out",
            "pc",
        ],
    );
    let pca = std::fs::read_to_string(p.join("pc/pca.csv")).unwrap();
    assert!(pca.starts_with("x,y,source,label\n"));
    assert!(pca.lines().skip(1).any(|l| l.contains(",b,")));

    ok(p, &["report", "--in", "runs", "--ttest", "paired"]);
    let agg = json(&p.join("runs/report/aggregate.json"));
    assert_eq!(agg["ttest"], "paired");
    let cells = agg["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 4);
    assert!(cells
        .iter()
        .any(|c| c["scenario"] == "transfer/a->b/0.5" && !c["significance"].is_null()));
    assert!(p.join("runs/report/few_shot.csv").is_file());
    assert!(p.join("runs/report/few_shot_mort.svg").is_file());
    let text = std::fs::read_to_string(p.join("runs/report/aggregate.json")).unwrap();
    assert!(!text.contains("started") && !text.contains("finished"));

    // A second report over the same inputs is byte-identical.
    ok(
        p,
        &[
            "report", "--in", "runs", "--ttest", "paired", "--out", "again",
        ],
    );
    assert_eq!(
        text,
        std::fs::read_to_string(p.join("again/aggregate.json")).unwrap()
    );
}

#[test]
fn saved_model_must_match_the_requested_run() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    std::fs::write(p.join("tiny.conf"), TINY).unwrap();
    cohort(p, "default_a", "a");
    cohort(p, "default_b", "b");
    ok(
        p,
        &[
            "train",
            "--config",
            "tiny.conf",
            "--encoder",
            "codeemb",
            "--value-mode",
            "vc",
            "--seed",
            "3",
            "--dataset",
            "a",
            "--out",
            "m",
        ],
    );
    let out = medembed(
        p,
        &[
            "transfer",
            "--config",
            "tiny.conf",
            "--encoder",
            "rnn",
            "--value-mode",
            "dsva",
            "--seed",
            "3",
            "--dataset",
            "a",
            "--target",
            "b",
            "--from",
            "m",
            "--out",
            "t",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
