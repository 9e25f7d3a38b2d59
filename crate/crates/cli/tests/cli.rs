use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn ead(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ead"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = ead(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Small synthetic dataset preprocessed into 64-sample windows.
fn dataset(dir: &Path) {
    ok(dir, &["synth", "--out", "ds", "--subjects", "4,2,2", "--trials", "2", "--timesteps", "128"]);
    ok(dir, &["preprocess", "--manifest", "ds/manifest.toml", "--window", "64", "--out", "w.ead"]);
}

const TRAIN_MIX: &[&str] = &[
    "train", "--windows", "w.ead", "--mode", "mix", "--montage", "ds/montage.txt", "--epochs", "2", "--seed", "3",
    "--out-checkpoint", "m.ckpt",
];

#[test]
fn mix_training_writes_checkpoint_and_metrics() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    dataset(d);
    ok(d, TRAIN_MIX);
    for f in ["m.ckpt", "m.ckpt.metrics.json", "m.ckpt.epochs.csv"] {
        assert!(d.join(f).is_file(), "{f} missing");
    }
    let metrics = fs::read_to_string(d.join("m.ckpt.metrics.json")).unwrap();
    assert!(metrics.contains("\"seed: 3") || metrics.contains("seed: 3"), "run header lacks the seed");
    assert!(metrics.contains("\"accuracy\""));
    let log = fs::read_to_string(d.join("m.ckpt.epochs.csv")).unwrap();
    assert!(log.starts_with("# command = train\n"));
    assert_eq!(log.lines().filter(|l| !l.starts_with('#')).count(), 3);

    let out = ead(d, &["eval", "--checkpoint", "m.ckpt", "--windows", "w.ead", "--subject-level"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = String::from_utf8(out.stdout).unwrap();
    assert!(report.contains("\"subject_metrics\"") && report.contains("\"subjects\""));

    ok(d, &["extract", "--checkpoint", "m.ckpt", "--windows", "w.ead", "--out-embeddings", "e.csv"]);
    let emb = fs::read_to_string(d.join("e.csv")).unwrap();
    assert!(emb.lines().any(|l| l.starts_with("e0,")));
    ok(d, &["zeroshot", "--embeddings", "e.csv", "--held-out-classes", "2,3", "--out", "z.toml"]);
    let z = fs::read_to_string(d.join("z.toml")).unwrap();
    assert!(z.contains("[accuracy]") && z.contains("svm = "));
}

#[test]
fn identical_runs_give_identical_outputs() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    dataset(d);
    let args: Vec<&str> = TRAIN_MIX.iter().map(|a| if *a == "mix" { "raw" } else { a }).collect();
    ok(d, &args);
    let first = (
        fs::read(d.join("m.ckpt.metrics.json")).unwrap(),
        fs::read(d.join("m.ckpt.epochs.csv")).unwrap(),
        fs::read(d.join("m.ckpt")).unwrap(),
    );
    ok(d, &args);
    assert_eq!(first.0, fs::read(d.join("m.ckpt.metrics.json")).unwrap());
    assert_eq!(first.1, fs::read(d.join("m.ckpt.epochs.csv")).unwrap());
    assert_eq!(first.2, fs::read(d.join("m.ckpt")).unwrap());
}

#[test]
fn eval_with_missing_checkpoint_fails_on_stderr() {
    let tmp = TempDir::new().unwrap();
    let out = ead(tmp.path(), &["eval", "--checkpoint", "absent.ckpt", "--windows", "w.ead"]);
    assert!(!out.status.success());
    assert!(out.stdout.is_empty());
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.ckpt"));
}

#[test]
fn mixing_five_sources_into_three_samples_is_a_domain_error() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    dataset(d);
    let map = fs::read_to_string(d.join("ds/montage.txt")).unwrap();
    let mut lines: Vec<String> = map.lines().map(String::from).collect();
    let first = lines.iter().position(|l| l.contains(':')).unwrap();
    let target = lines[first].split(':').next().unwrap().to_string();
    lines[first] = format!("{target}: S01,S02,S03,S04,S05");
    fs::write(d.join("five.txt"), lines.join("\n")).unwrap();
    let out = ead(d, &["align", "--windows", "w.ead", "--mode", "mix", "--montage", "five.txt", "--target-len", "3", "--out", "a.ead"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("domain error"));
    assert!(!d.join("a.ead").exists());
}

#[test]
fn aligned_windows_train_in_matching_mode_only() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    dataset(d);
    ok(d, &["align", "--windows", "w.ead", "--mode", "select", "--montage", "ds/montage.txt", "--out", "s.ead"]);
    ok(d, &["train", "--windows", "s.ead", "--mode", "select", "--epochs", "1", "--out-checkpoint", "s.ckpt"]);
    let out = ead(d, &["train", "--windows", "s.ead", "--mode", "mix", "--epochs", "1", "--out-checkpoint", "x.ckpt"]);
    assert!(!out.status.success());
}

#[test]
fn preprocessing_mismatch_is_refused() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    dataset(d);
    ok(d, &["train", "--windows", "w.ead", "--mode", "raw", "--epochs", "1", "--out-checkpoint", "r.ckpt"]);
    ok(d, &["preprocess", "--manifest", "ds/manifest.toml", "--window", "64", "--notch", "60", "--out", "w60.ead"]);
    let out = ead(d, &["eval", "--checkpoint", "r.ckpt", "--windows", "w60.ead"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("fingerprint mismatch"));
}

#[test]
fn incompatible_flags_are_rejected() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let out = ead(d, &["train", "--windows", "w.ead", "--mode", "raw", "--freeze-bfm", "--out-checkpoint", "x"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--freeze-bfm") && err.contains("Usage"), "{err}");
    let out = ead(d, &["train", "--windows", "w.ead", "--mode", "sideways", "--out-checkpoint", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("possible values"));
}

#[test]
fn unassigned_manifest_is_split_by_subject() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--out", "ds", "--subjects", "6,2,2", "--trials", "1", "--timesteps", "64", "--unassigned", "--format", "delimited-text"]);
    let manifest = fs::read_to_string(d.join("ds/manifest.toml")).unwrap();
    assert!(manifest.contains("[splitting]") && manifest.contains("split = \"unassigned\""));
    ok(d, &["preprocess", "--manifest", "ds/manifest.toml", "--window", "64", "--out", "w.ead"]);
}
