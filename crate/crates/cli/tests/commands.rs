use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn dialret(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dialret"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dialret(args);
    assert!(
        out.status.success(),
        "dialret {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn small_corpus(dir: &Path, seed: &str) {
    ok(&[
        "gen-corpus",
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        seed,
        "--train",
        "48",
        "--val",
        "8",
        "--test",
        "16",
    ]);
}

#[test]
fn unknown_command_prints_usage_and_fails() {
    let out = dialret(&["frobnicate"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "{err}");

    let out = dialret(&["eval", "--no-such-flag"]);
    assert!(!out.status.success());
}

#[test]
fn gen_corpus_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    small_corpus(&a, "7");
    small_corpus(&b, "7");
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(!names.is_empty());
    for name in names {
        assert_eq!(
            fs::read(a.join(&name)).unwrap(),
            fs::read(b.join(&name)).unwrap(),
            "{name:?}"
        );
    }
}

fn mean_ranks(report: &Path) -> Vec<f64> {
    let v: Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    v["rounds"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["mean_rank"].as_f64().unwrap())
        .collect()
}

#[test]
fn train_eval_simulate_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    small_corpus(&corpus, "3");
    let ckpt = tmp.path().join("model.bin");
    let log = tmp.path().join("log.csv");
    let c = corpus.to_str().unwrap();
    let k = ckpt.to_str().unwrap();
    let out = tmp.path().to_str().unwrap();
    ok(&[
        "train",
        "--corpus",
        c,
        "--out",
        k,
        "--log",
        log.to_str().unwrap(),
        "--phase1-epochs",
        "1",
        "--phase2-epochs",
        "1",
    ]);
    assert!(ckpt.exists());
    assert!(fs::read_to_string(&log).unwrap().lines().count() > 1);

    ok(&[
        "eval",
        "--checkpoint",
        k,
        "--corpus",
        c,
        "--split",
        "test",
        "--out",
        out,
    ]);
    assert!(tmp.path().join("eval_test.csv").exists());
    let eval = mean_ranks(&tmp.path().join("eval_test.json"));
    assert_eq!(eval.len(), 11);

    let sim_dir = tmp.path().join("sim");
    ok(&[
        "simulate",
        "--checkpoint",
        k,
        "--corpus",
        c,
        "--rounds",
        "10",
        "--oracle",
        "verbatim",
        "--gt-questions",
        "--out",
        sim_dir.to_str().unwrap(),
    ]);
    let sim = mean_ranks(&sim_dir.join("simulate_test.json"));
    assert_eq!(sim.len(), eval.len());
    for (a, b) in sim.iter().zip(&eval) {
        assert!((a - b).abs() <= 1e-9, "{sim:?} vs {eval:?}");
    }

    // generated questions with the templated oracle also run to completion
    ok(&[
        "simulate",
        "--checkpoint",
        k,
        "--corpus",
        c,
        "--out",
        sim_dir.to_str().unwrap(),
    ]);
    let summary: Value =
        serde_json::from_str(&fs::read_to_string(sim_dir.join("simulate_test_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["questions"].as_u64(), Some(160));

    let out = dialret(&["simulate", "--checkpoint", k, "--corpus", c, "--oracle", "verbatim"]);
    assert!(!out.status.success());
}
