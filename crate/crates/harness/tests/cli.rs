use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_c2f");

fn c2f(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

// Small enough to train in well under a second.
const DATA: &[&str] = &["--task", "loc", "--n-train", "16", "--n-test", "8"];

fn train(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--iters", "30"];
    args.extend_from_slice(DATA);
    args.extend_from_slice(extra);
    args.extend_from_slice(&["--out", dir.to_str().unwrap()]);
    c2f(&args)
}

fn csv_rows(path: &Path) -> Vec<Vec<f64>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn help_exits_zero() {
    assert_eq!(c2f(&["--help"]).status.code(), Some(0));
    assert_eq!(c2f(&["train", "--help"]).status.code(), Some(0));
}

#[test]
fn unknown_flag_exits_one() {
    let o = c2f(&["train", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--bogus"));
}

#[test]
fn invalid_config_exits_one_naming_field() {
    let o = c2f(&["train", "--task", "loc", "--t0", "1.5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("t0"), "{}", stderr(&o));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "task = \"loc\"\nlearning_rate = 0.1\n").unwrap();
    let o = c2f(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn runtime_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = c2f(&["eval", "--run-dir", dir.path().join("missing").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = train(&dir.path().join("run"), &["--lr", "1e300", "--strategy", "bl"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"), "{}", stderr(&o));
    let file = dir.path().join("file");
    std::fs::write(&file, "").unwrap();
    let o = train(&file.join("run"), &["--strategy", "bl"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn train_writes_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("pt");
    let o = train(&run, &["--strategy", "pt", "--t0", "0.5", "--ramp-end", "0.6", "--seed", "7"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["metrics.csv", "eval.json", "run.json", "config.toml", "curves.svg", "checkpoint.c2f"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let text = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "iter,t,chose_coarse,loss_coarse,loss_fine,loss_total,lr");
    let rows = csv_rows(&run.join("metrics.csv"));
    assert_eq!(rows.len(), 30);
    for r in &rows {
        assert_eq!(r[5], r[3] + r[4]);
    }
    let eval: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("eval.json")).unwrap()).unwrap();
    assert!(eval["coarse"]["mean_iou"].is_f64());
    assert!(eval["fine"]["mean_iou"].is_f64());

    // Re-scoring from the checkpoint prints the same evaluation.
    let o = c2f(&["eval", "--run-dir", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let again: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(again, eval);
}

#[test]
fn baseline_has_zero_fine_loss() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), &["--strategy", "bl"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(&dir.path().join("metrics.csv"));
    assert!(rows.iter().all(|r| r[4] == 0.0 && r[2] == 0.0));
}

#[test]
fn sweep_table_has_seed_and_median_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["sweep"];
    args.extend_from_slice(DATA);
    args.extend_from_slice(&["--iters", "10", "--strategies", "bl,pt", "--seeds", "1..2", "--out", dir.path().to_str().unwrap()]);
    let o = c2f(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    assert_eq!(table, std::fs::read_to_string(dir.path().join("sweep.md")).unwrap());
    for setting in ["BL", "PT(0.5,0.6)"] {
        assert_eq!(table.lines().filter(|l| l.starts_with(&format!("| {setting} |"))).count(), 3, "{table}");
        assert!(table.lines().any(|l| l.starts_with(&format!("| {setting} | median |"))), "{table}");
    }
    assert!(dir.path().join("BL/seed2/metrics.csv").is_file());
}

#[test]
fn diagnose_peaks_near_logistic_point() {
    let o = c2f(&["diagnose", "--hgt", "1.0", "--hc", "3.0", "--grid", "0:1:0.05"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,H_approx,H_mc,mc_stderr"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 21);
    let best = rows.iter().max_by(|a, b| a[1].total_cmp(&b[1])).unwrap();
    let peak = 1.0 / (1.0 + (-2.0f64).exp());
    assert!((best[0] - peak).abs() <= 0.025, "peak at {}", best[0]);
}

#[test]
fn diagnose_rejects_few_samples() {
    let o = c2f(&["diagnose", "--hgt", "1", "--hc", "3", "--samples", "100"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("samples"));
}

#[test]
fn gen_data_writes_both_splits() {
    let dir = tempfile::tempdir().unwrap();
    let o = c2f(&["gen-data", "--task", "cls", "--n-train", "5", "--n-test", "3", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for (name, n) in [("train.c2fd", 5u32), ("test.c2fd", 3)] {
        let bytes = std::fs::read(dir.path().join(name)).unwrap();
        assert_eq!(&bytes[..4], b"C2FD");
        assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), n);
    }
}
