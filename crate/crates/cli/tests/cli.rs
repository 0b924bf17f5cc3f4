//! Drives the `pcae` binary through its subcommands on a tiny configuration.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
# small enough to train in well under a second
preset = reduced
n_points = 64
train_healthy = 8
val_healthy = 4
val_fractured = 4
test_healthy = 4
test_fractured = 4
epochs = 3
batch_size = 4
checkpoint_every = 2
";

fn pcae(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcae"))
        .current_dir(dir)
        .arg("--quiet")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = pcae(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.txt"), TINY).unwrap();
    dir
}

/// Synthesises and trains into `data` and `run` under `dir`.
fn synth_and_train(dir: &Path, seed: &str) {
    ok(
        dir,
        &[
            "--config", "tiny.txt", "--seed", seed, "synth", "--out", "data",
        ],
    );
    ok(
        dir,
        &[
            "--config", "tiny.txt", "--seed", seed, "train", "--data", "data", "--out", "run",
        ],
    );
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let tmp = workspace();
    let dir = tmp.path();
    synth_and_train(dir, "3");

    let manifest = fs::read_to_string(dir.join("data/manifest.csv")).unwrap();
    assert_eq!(
        manifest.lines().next(),
        Some("id,split,label,seed,severity")
    );
    assert_eq!(manifest.lines().count(), 1 + 8 + 4 + 4 + 4 + 4);
    for f in [
        "config.txt",
        "epoch-0002.ckpt",
        "final.ckpt",
        "train_log.csv",
    ] {
        assert!(dir.join("run").join(f).is_file(), "missing {f}");
    }
    let log = fs::read_to_string(dir.join("run/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 3);

    ok(
        dir,
        &[
            "score",
            "--model",
            "run/final.ckpt",
            "--data",
            "data",
            "--out",
            "score",
        ],
    );
    let report = fs::read_to_string(dir.join("score/report.csv")).unwrap();
    assert_eq!(report.lines().count(), 1 + 8);
    let thresholds: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("score/thresholds.json")).unwrap())
            .unwrap();
    assert!(thresholds["t_rec"].is_f64() && thresholds["t_l"].is_f64());

    let stdout = ok(
        dir,
        &[
            "eval",
            "--model",
            "run/final.ckpt",
            "--data",
            "data",
            "--out",
            "eval",
        ],
    );
    let summary: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(summary["variant"], "sigma-vae");
    for key in ["P", "R", "F1", "AUC"] {
        let v = summary["recon_error"][key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
    assert!(summary["log_likelihood"].is_object());
    let written: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("eval/eval.json")).unwrap()).unwrap();
    assert_eq!(written, summary);

    ok(
        dir,
        &[
            "reconstruct",
            "--model",
            "run/final.ckpt",
            "--input",
            "data/test/fractured",
            "--out",
            "recon",
        ],
    );
    let recon = fs::read_to_string(dir.join("recon/test-f-0000.recon.xyz")).unwrap();
    let rows: Vec<&str> = recon.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 64);
    assert_eq!(
        rows[0].split_whitespace().count(),
        6,
        "mean and per-axis variance"
    );
    let summary = fs::read_to_string(dir.join("recon/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 4);
}

#[test]
fn same_seed_same_bytes() {
    let (a, b) = (workspace(), workspace());
    synth_and_train(a.path(), "11");
    synth_and_train(b.path(), "11");
    let read = |d: &tempfile::TempDir, f: &str| fs::read(d.path().join(f)).unwrap();
    assert_eq!(read(&a, "data/manifest.csv"), read(&b, "data/manifest.csv"));
    assert_eq!(
        read(&a, "data/test/fractured/test-f-0001.xyz"),
        read(&b, "data/test/fractured/test-f-0001.xyz")
    );
    assert_eq!(read(&a, "run/final.ckpt"), read(&b, "run/final.ckpt"));
    let eval = |d: &tempfile::TempDir| {
        ok(
            d.path(),
            &["eval", "--model", "run/final.ckpt", "--data", "data"],
        )
    };
    assert_eq!(eval(&a), eval(&b));

    let c = workspace();
    synth_and_train(c.path(), "12");
    assert_ne!(read(&a, "run/final.ckpt"), read(&c, "run/final.ckpt"));
}

#[test]
fn echoed_config_reproduces_itself() {
    let tmp = workspace();
    let dir = tmp.path();
    ok(
        dir,
        &[
            "--config",
            "tiny.txt",
            "--set",
            "latent_dim=4",
            "--variant",
            "ae",
            "synth",
            "--out",
            "a",
        ],
    );
    ok(dir, &["--config", "a/config.txt", "synth", "--out", "b"]);
    let echo = fs::read_to_string(dir.join("a/config.txt")).unwrap();
    assert_eq!(echo, fs::read_to_string(dir.join("b/config.txt")).unwrap());
    assert!(echo.lines().any(|l| l == "variant = ae"), "{echo}");
    assert!(echo.lines().any(|l| l == "latent_dim = 4"), "{echo}");
}

#[test]
fn later_settings_override_earlier_ones() {
    let tmp = workspace();
    let dir = tmp.path();
    ok(
        dir,
        &[
            "--config",
            "tiny.txt",
            "--set",
            "n_points=32",
            "--set",
            "n_points=48",
            "synth",
            "--out",
            "d",
        ],
    );
    let echo = fs::read_to_string(dir.join("d/config.txt")).unwrap();
    assert!(echo.lines().any(|l| l == "n_points = 48"), "{echo}");
}

#[test]
fn configuration_mistakes_are_usage_errors() {
    let tmp = workspace();
    let dir = tmp.path();
    for args in [
        &["--set", "no_such_key=1", "synth", "--out", "x"][..],
        &["--set", "epochs=many", "synth", "--out", "x"],
        &["--variant", "gan", "synth", "--out", "x"],
        &["frobnicate"],
    ] {
        let out = pcae(dir, args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
    let out = pcae(dir, &["--set", "no_such_key=1", "synth", "--out", "x"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}

#[test]
fn runtime_failures_exit_with_one() {
    let tmp = workspace();
    let dir = tmp.path();
    let out = pcae(
        dir,
        &[
            "--config", "tiny.txt", "train", "--data", "missing", "--out", "run",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error:"), "{stderr}");

    fs::write(dir.join("bad.ckpt"), b"not a checkpoint").unwrap();
    ok(dir, &["--config", "tiny.txt", "synth", "--out", "data"]);
    let out = pcae(dir, &["eval", "--model", "bad.ckpt", "--data", "data"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn training_rejects_a_point_count_mismatch() {
    let tmp = workspace();
    let dir = tmp.path();
    ok(
        dir,
        &[
            "--config",
            "tiny.txt",
            "--set",
            "n_points=32",
            "synth",
            "--out",
            "data",
        ],
    );
    let out = pcae(
        dir,
        &[
            "--config", "tiny.txt", "train", "--data", "data", "--out", "run",
        ],
    );
    assert_ne!(out.status.code(), Some(0));
}
