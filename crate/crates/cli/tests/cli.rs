use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tunnelwave"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

const TINY: &[&str] = &[
    "generate-dataset",
    "--out",
    "d.twd",
    "--n-samples",
    "3",
    "--seed",
    "4",
    "--length-m",
    "20",
    "--height-m",
    "7.5",
    "--dz",
    "1",
];

#[test]
fn help_and_argument_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["--help"])), 0);
    assert_eq!(code(&run(dir.path(), &["train", "--help"])), 0);
    assert_eq!(code(&run(dir.path(), &["train", "--bogus"])), 2);
    assert_eq!(code(&run(dir.path(), &["no-such-command"])), 2);
    assert_eq!(code(&run(dir.path(), &[])), 2);
}

#[test]
fn generation_is_repeatable_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), TINY)), 0);
    let first = std::fs::read(dir.path().join("d.twd")).unwrap();
    assert_eq!(code(&run(dir.path(), TINY)), 0);
    assert_eq!(std::fs::read(dir.path().join("d.twd")).unwrap(), first);
    let bad = run(dir.path(), &["generate-dataset", "--out", "x.twd", "--freq-max", "9e9"]);
    assert_eq!(code(&bad), 2);
    assert!(!dir.path().join("x.twd").exists());
}

#[test]
fn train_evaluate_reconstruct_export() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&run(p, TINY)), 0);
    std::fs::write(p.join("c.json"), r#"{"epochs": 2, "batch_size": 2, "seed": 1, "val_fraction": 0.3}"#).unwrap();
    let out = run(p, &["train", "--config", "c.json", "--data", "d.twd", "--out", "run"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(p.join("run/final.twc").exists());
    let log = std::fs::read_to_string(p.join("run/train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,step,adv,l1,mse,ssim,nonneg,boundary,smooth,total"));

    let out = run(
        p,
        &["evaluate", "--checkpoint", "run/final.twc", "--data", "d.twd", "--split", "all", "--lines", "2", "--out", "ev"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(p.join("ev/eval.csv")).unwrap();
    assert!(csv.starts_with("index,mae,rmse,rel_error_percent\n"));
    assert_eq!(csv.lines().count(), 4);
    assert!(String::from_utf8_lossy(&out.stdout).contains("Inc-GAN RMSE: "));
    assert!(p.join("ev/lines_0.csv").exists());

    let line = vec!["0.25"; 21].join(",");
    std::fs::write(p.join("line.csv"), line).unwrap();
    let out = run(
        p,
        &["reconstruct", "--checkpoint", "run/final.twc", "--line", "line.csv", "--row", "8", "--out", "r.pgm", "--timing", "--compare-pwe"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("generator_seconds") && stdout.contains("pwe_seconds"));
    let pgm = std::fs::read(p.join("r.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n21 16\n65535\n"));
    let img = std::fs::read_to_string(p.join("r.csv")).unwrap();
    assert_eq!(img.lines().count(), 16);

    std::fs::write(p.join("short.csv"), "0.1,0.2").unwrap();
    let out = run(p, &["reconstruct", "--checkpoint", "run/final.twc", "--line", "short.csv", "--row", "0", "--out", "s.pgm"]);
    assert_eq!(code(&out), 3);

    assert_eq!(code(&run(p, &["export-image", "--data", "d.twd", "--index", "1", "--out", "t.pgm"])), 0);
    let t = std::fs::read(p.join("t.pgm")).unwrap();
    assert_eq!(t.len(), b"P5\n21 16\n65535\n".len() + 21 * 16 * 2);
    assert_eq!(code(&run(p, &["export-image", "--data", "d.twd", "--index", "9", "--out", "u.pgm"])), 2);
}

#[test]
fn data_failures_use_the_data_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&run(p, &["train", "--data", "missing.twd", "--out", "run"])), 3);
    std::fs::write(p.join("junk.twd"), b"JUNKJUNKJUNK").unwrap();
    assert_eq!(code(&run(p, &["train", "--data", "junk.twd", "--out", "run"])), 3);
    std::fs::write(p.join("c.json"), r#"{"epochs": 0}"#).unwrap();
    assert_eq!(code(&run(p, &["train", "--config", "c.json", "--data", "junk.twd", "--out", "run"])), 2);
}

#[test]
fn solver_validation_cases() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["validate-pwe", "--case", "energy", "--out", "v.json"]);
    assert_eq!(code(&out), 0);
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("v.json")).unwrap()).unwrap();
    assert_eq!(json["passed"], true);
    assert_eq!(code(&run(dir.path(), &["validate-pwe", "--case", "nope"])), 2);
}
