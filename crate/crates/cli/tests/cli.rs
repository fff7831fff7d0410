use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn metacl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metacl")).args(args).current_dir(dir).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = metacl(dir, args);
    assert!(out.status.success(), "metacl {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = metacl(dir, args);
    assert!(!out.status.success(), "metacl {} should fail", args.join(" "));
    (out.status.code().unwrap(), String::from_utf8(out.stderr).unwrap())
}

fn synth(dir: &Path) {
    ok(dir, &["synth", "--out", "data", "--patients", "8"]);
}

const SMALL: [&str; 2] = ["--set", "train.batch_size=16"];

fn pretrain_args<'a>(variant: &'a str, out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["pretrain", "--manifest", "data/manifest.csv", "--variant", variant, "--out", out, "--steps", "30"];
    v.extend_from_slice(&SMALL);
    v.extend_from_slice(extra);
    v
}

#[test]
fn synth_writes_a_manifest_and_images() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["synth", "--out", "data", "--patients", "5"]);
    assert!(stdout.contains("manifest_digest"));
    let manifest = fs::read_to_string(dir.path().join("data/manifest.csv")).unwrap();
    let scans = manifest.lines().count() - 1;
    assert!(scans >= 10);
    assert_eq!(fs::read_dir(dir.path().join("data/images")).unwrap().count(), scans);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let (code, err) = fails(dir.path(), &["pairs", "--manifest", "data/manifest.csv", "--min-gap", "1.0", "--max-gap", "0.5"]);
    assert_eq!(code, 2);
    assert!(err.starts_with("error[usage]"), "{err}");
    let (code, err) = fails(dir.path(), &["pretrain", "--bogus"]);
    assert_eq!(code, 2);
    assert!(err.starts_with("error[usage]"), "{err}");
    let (code, _) = fails(dir.path(), &["pretrain", "--manifest", "data/manifest.csv", "--variant", "moco", "--out", "x"]);
    assert_eq!(code, 2);
}

#[test]
fn runtime_errors_carry_a_category() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = fails(dir.path(), &["pairs", "--manifest", "missing.csv"]);
    assert_eq!(code, 1);
    assert!(err.starts_with("error[io]"), "{err}");
    fs::write(dir.path().join("bad.csv"), "scan_id,patient_id\na,b\n").unwrap();
    let (code, err) = fails(dir.path(), &["pairs", "--manifest", "bad.csv"]);
    assert_eq!(code, 1);
    assert!(err.starts_with("error[manifest]"), "{err}");
    synth(dir.path());
    let (code, err) = fails(dir.path(), &["pairs", "--manifest", "data/manifest.csv", "--set", "train.batch_size=7"]);
    assert_eq!(code, 1);
    assert!(err.starts_with("error[config]"), "{err}");
    assert_eq!(err.lines().count(), 1);
}

#[test]
fn pairs_report_grows_with_the_window() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let count = |max: &str| -> usize {
        let stdout = ok(dir.path(), &["pairs", "--manifest", "data/manifest.csv", "--max-gap", max]);
        let line = stdout.lines().find(|l| l.starts_with("pair_count")).unwrap_or_else(|| panic!("{stdout}"));
        line.split_whitespace().nth(1).unwrap().parse().unwrap()
    };
    let (a, b, c) = (count("0.5"), count("1.0"), count("inf"));
    assert!(a <= b && b <= c && c > 0, "{a} {b} {c}");
}

#[test]
fn halted_and_resumed_run_matches_a_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    ok(dir.path(), &pretrain_args("simclr-me-0.5", "straight", &[]));
    ok(dir.path(), &pretrain_args("simclr-me-0.5", "split", &["--halt-at", "13"]));
    assert!(!dir.path().join("split/checkpoint.bin").exists());
    ok(dir.path(), &pretrain_args("simclr-me-0.5", "split", &["--resume"]));
    for file in ["checkpoint.bin", "trace.csv", "run.json"] {
        let a = fs::read(dir.path().join("straight").join(file)).unwrap();
        let b = fs::read(dir.path().join("split").join(file)).unwrap();
        assert!(a == b, "{file} differs");
    }
}

#[test]
fn resume_refuses_a_different_variant_or_config() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    ok(dir.path(), &pretrain_args("byol", "run", &["--halt-at", "8"]));
    let (code, _) = fails(dir.path(), &pretrain_args("simclr", "run", &["--resume"]));
    assert_eq!(code, 2);
    let (code, err) = fails(dir.path(), &pretrain_args("byol", "run", &["--resume", "--set", "train.base_lr=0.01"]));
    assert_eq!(code, 1, "{err}");
}

#[test]
fn probe_and_grow_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    ok(dir.path(), &pretrain_args("byol-me-inf", "run", &[]));
    let mut probe = vec!["probe", "--manifest", "data/manifest.csv", "--task", "stage", "--task", "age"];
    probe.extend_from_slice(&SMALL);
    let with = |extra: &[&'static str]| -> Vec<&str> { probe.iter().copied().chain(extra.iter().copied()).collect() };
    ok(dir.path(), &with(&["--checkpoint", "run/checkpoint.bin", "--out", "pre"]));
    ok(dir.path(), &with(&["--random-init", "--out", "base"]));
    let table = fs::read_to_string(dir.path().join("pre/results.csv")).unwrap();
    assert!(table.starts_with("variant,task,subset_size,seed,metric,value"));
    assert!(table.lines().skip(1).all(|l| l.starts_with("byol-me-inf,")));

    let stdout = ok(dir.path(), &["grow", "--pretrained", "pre/results.csv", "--baseline", "base/results.csv", "--out", "grow.csv"]);
    assert!(stdout.contains("byol-me-inf\tstage"));
    let same = ok(dir.path(), &["grow", "--pretrained", "base/results.csv", "--baseline", "base/results.csv", "--out", "self.csv"]);
    for line in same.lines().filter(|l| l.starts_with("random-init")) {
        assert!(line.contains("\t0.00 "), "{line}");
    }
    let (code, err) = fails(dir.path(), &["grow", "--pretrained", "pre/results.csv", "--baseline", "base/results.csv", "--task", "acuity", "--out", "x.csv"]);
    assert_eq!(code, 1, "{err}");
}

#[test]
fn config_files_and_overrides_change_the_digest() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let digest = |args: &[&str]| -> String {
        let mut all = vec!["pairs", "--manifest", "data/manifest.csv"];
        all.extend_from_slice(args);
        let stdout = ok(dir.path(), &all);
        stdout.lines().find(|l| l.starts_with("config_digest")).unwrap().to_string()
    };
    let base = digest(&[]);
    fs::write(dir.path().join("run.toml"), "[relation]\nmax_gap = 1.0\n").unwrap();
    let from_file = digest(&["--config", "run.toml"]);
    let from_flag = digest(&["--set", "relation.max_gap=1.0"]);
    assert_ne!(base, from_file);
    assert_eq!(from_file, from_flag);
    assert_eq!(base, digest(&[]));
}
