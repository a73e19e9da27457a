//! End-to-end tests of the `toqnet` binary: exit codes, output files,
//! and rerun determinism.

use std::path::Path;
use std::process::{Command, Output};

fn toqnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_toqnet"))
        .current_dir(dir)
        .args(args)
        .env("TOQNET_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn assert_status(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn generate_is_deterministic_and_audited() {
    let dir = tempfile::tempdir().unwrap();
    let flags = [
        "generate", "--seed", "7", "--entities", "4", "--frames", "8", "--per-class", "3",
        "--classes", "chase,guard",
    ];
    let out = toqnet(dir.path(), &[&flags[..], &["-o", "a.jsonl"]].concat());
    assert_status(&out, 0);
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.contains("satisfy their class formula"), "{text}");

    let out = toqnet(dir.path(), &[&flags[..], &["-o", "b.jsonl"]].concat());
    assert_status(&out, 0);
    let a = std::fs::read(dir.path().join("a.jsonl")).unwrap();
    let b = std::fs::read(dir.path().join("b.jsonl")).unwrap();
    assert_eq!(a, b, "rerun must produce identical bytes");
}

#[test]
fn generate_rejects_infeasible_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = toqnet(
        dir.path(),
        &[
            "generate", "--seed", "1", "--entities", "4", "--frames", "4", "--per-class", "2",
            "--classes", "pass", "-o", "x.jsonl",
        ],
    );
    assert_status(&out, 1);
}

#[test]
fn compile_verify_roundtrip_and_rejection() {
    let dir = tempfile::tempdir().unwrap();
    let out = toqnet(
        dir.path(),
        &[
            "compile", "-f", "p U (G q)", "--mode", "hard", "--k-rrl", "2", "--l-trl", "2",
            "-o", "cc.json",
        ],
    );
    assert_status(&out, 0);
    assert!(dir.path().join("cc.json").exists());
    assert!(dir.path().join("cc.map.json").exists());

    let out = toqnet(
        dir.path(),
        &[
            "verify", "-f", "p U (G q)", "--k-rrl", "2", "--l-trl", "2", "--T", "4",
        ],
    );
    assert_status(&out, 0);
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.contains("256 traces, 0 mismatches"), "{text}");

    // Quantifier around a temporal operator: fragment rejection, exit 1.
    let out = toqnet(
        dir.path(),
        &["compile", "-f", "exists x. G q1(x)", "-o", "bad.json"],
    );
    assert_status(&out, 1);
    let err = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(err.contains("unsupported fragment"), "{err}");

    // Parse error also exits 1, with a caret diagnostic.
    let out = toqnet(dir.path(), &["compile", "-f", "p U", "-o", "bad.json"]);
    assert_status(&out, 1);
}

#[test]
fn soft_mode_verify_reports_small_deviation() {
    let dir = tempfile::tempdir().unwrap();
    let out = toqnet(
        dir.path(),
        &[
            "verify", "-f", "G q", "--mode", "soft", "--k-rrl", "1", "--l-trl", "1", "--T",
            "4", "-o", "v.json",
        ],
    );
    assert_status(&out, 0);
    let rep: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("v.json")).unwrap())
            .unwrap();
    assert_eq!(rep["mismatches"], 0);
    assert!(rep["max_dev"].as_f64().unwrap() <= 4.6e-5);
}

#[test]
fn gradcheck_passes_and_corruption_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = toqnet(dir.path(), &["gradcheck", "--seeds", "2", "--samples", "4"]);
    assert_status(&out, 0);
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.contains("worst relative error"), "{text}");

    let out = toqnet(
        dir.path(),
        &["gradcheck", "--seeds", "2", "--samples", "4", "--corrupt", "0.5"],
    );
    assert_status(&out, 1);
}

#[test]
fn train_eval_sweep_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let out = toqnet(
        dir.path(),
        &[
            "generate", "--seed", "11", "--entities", "4", "--frames", "8", "--per-class",
            "10", "--classes", "chase,guard", "-o", "d.jsonl",
        ],
    );
    assert_status(&out, 0);

    let out = toqnet(
        dir.path(),
        &[
            "train", "--data", "d.jsonl", "--seed", "11", "--epochs", "1", "--batch", "8",
            "--k-rrl", "1", "--l-trl", "1", "--rrl-dim", "4", "--trl-dim", "4",
            "--thresholds-per-property", "2", "--properties", "speed,dist",
            "-o", "ck.json", "--history", "h.csv",
        ],
    );
    assert_status(&out, 0);
    let csv = std::fs::read_to_string(dir.path().join("h.csv")).unwrap();
    assert!(csv.starts_with("epoch,train_loss,val_macro,lr,beta\n"));
    assert_eq!(csv.lines().count(), 2);

    let out = toqnet(
        dir.path(),
        &["eval", "--data", "d.jsonl", "--checkpoint", "ck.json", "-o", "rep.json"],
    );
    assert_status(&out, 0);
    let rep: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("rep.json")).unwrap())
            .unwrap();
    assert!(rep["macro_acc"].as_f64().unwrap() >= 0.0);

    let out = toqnet(
        dir.path(),
        &[
            "sweep", "--checkpoint", "ck.json", "--seed", "3", "--entities", "4", "--frames",
            "8", "--per-class", "3", "--classes", "chase,guard", "--sweep-entities", "3",
            "--sweep-stretch", "2", "-o", "sweep.json",
        ],
    );
    assert_status(&out, 0);
    let rep: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("sweep.json")).unwrap())
            .unwrap();
    assert_eq!(rep["rows"].as_array().unwrap().len(), 2);

    // Missing file is a validation error.
    let out = toqnet(
        dir.path(),
        &["eval", "--data", "nope.jsonl", "--checkpoint", "ck.json"],
    );
    assert_status(&out, 1);

    // A compiled checkpoint evaluates through the same interface.
    let out = toqnet(
        dir.path(),
        &["compile", "-f", "G q", "--k-rrl", "1", "--l-trl", "1", "-o", "gc.json"],
    );
    assert_status(&out, 0);
    // (Predicate-extractor checkpoints need trace inputs, so full eval on
    // trajectory data is exercised via the library; here we confirm the
    // checkpoint loads.)
    let ck: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("gc.json")).unwrap())
            .unwrap();
    assert_eq!(ck["schema"], "toqnet-checkpoint-v1");
}

#[test]
fn train_resume_matches_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = toqnet(
        dir.path(),
        &[
            "generate", "--seed", "13", "--entities", "4", "--frames", "8", "--per-class",
            "10", "--classes", "chase,guard", "-o", "d.jsonl",
        ],
    );
    assert_status(&out, 0);
    let base = [
        "train", "--data", "d.jsonl", "--seed", "13", "--batch", "8", "--k-rrl", "1",
        "--l-trl", "1", "--rrl-dim", "4", "--trl-dim", "4", "--thresholds-per-property",
        "2", "--properties", "speed,dist",
    ];

    let out = toqnet(
        dir.path(),
        &[&base[..], &["--epochs", "2", "-o", "full.json"]].concat(),
    );
    assert_status(&out, 0);

    // Same run interrupted after one epoch via --stop-after, then resumed.
    let out = toqnet(
        dir.path(),
        &[
            &base[..],
            &["--epochs", "2", "--stop-after", "1", "-o", "half.json", "--state-out", "st.json"],
        ]
        .concat(),
    );
    assert_status(&out, 0);
    let out = toqnet(
        dir.path(),
        &[&base[..], &["--epochs", "2", "-o", "resumed.json", "--resume", "st.json"]].concat(),
    );
    assert_status(&out, 0);

    let full = std::fs::read(dir.path().join("full.json")).unwrap();
    let resumed = std::fs::read(dir.path().join("resumed.json")).unwrap();
    assert_eq!(full, resumed, "resumed checkpoint differs from straight run");
}
