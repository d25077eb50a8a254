use std::path::Path;
use std::process::{Command, Output};

fn sdb(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdb"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

const TINY: &[&str] = &[
    "--set", "blocks=1",
    "--set", "d_model=8",
    "--set", "heads=2",
    "--set", "time_dim=4",
    "--set", "n_train=64",
    "--set", "n_test=600",
    "--set", "epochs=1",
    "--set", "batch_size=32",
    "--set", "cycle_batch=4",
    "--set", "traj_steps=4",
    "--set", "inference_steps=10",
];

#[test]
fn unknown_flag_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = sdb(&["gen-data", "--bogus"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_violation_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = sdb(&["gen-data", "--rho", "1.5"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    let out = sdb(&["gen-data", "--set", "nope=1"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    let out = sdb(&["sweep", "--kind", "nope"], dir.path());
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn gen_data_writes_the_paired_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let out = sdb(&["gen-data", "--rho", "0.5", "--n", "3000", "--out", "d.csv"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("d.csv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "paired").unwrap();
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3000);
    let paired = rows.iter().filter(|r| r.split(',').nth(col) == Some("1")).count();
    assert_eq!(paired, 1500);
}

#[test]
fn config_file_and_overrides_combine() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), "rho = 1.0\n").unwrap();
    let out = sdb(&["gen-data", "--config", "run.cfg", "--n", "10", "--out", "d.csv"], dir.path());
    assert!(String::from_utf8_lossy(&out.stdout).contains("(10 paired)"));
    let out = sdb(&["gen-data", "--config", "run.cfg", "--rho", "0", "--n", "10", "--out", "d.csv"], dir.path());
    assert!(String::from_utf8_lossy(&out.stdout).contains("(0 paired)"));
}

#[test]
fn train_then_eval_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--out-dir", "run", "--rho", "0.5"];
    args.extend_from_slice(TINY);
    let out = sdb(&args, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["metrics.csv", "config.txt"] {
        assert!(dir.path().join("run").join(f).exists(), "{f}");
    }
    let args = ["eval", "--checkpoint", "run", "--config", "run/config.txt"];
    let out = sdb(&args, dir.path());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout.lines().next(), Some("swd,mmd2,content_acc,cycle_mse"));
    assert_eq!(stdout.lines().nth(1).unwrap().split(',').count(), 4);
}

#[test]
fn sweep_and_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec![
        "sweep", "--kind", "rho", "--values", "0,0.5", "--methods", "paired-only,mm-only", "--seeds", "1",
        "--out", "r.csv",
    ];
    args.extend_from_slice(TINY);
    let out = sdb(&args, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let raw = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert_eq!(raw.lines().count(), 5);
    assert!(raw.contains("rho,0,paired-only,0,NA,NA,NA,NA,NA"));

    let md = sdb(&["report", "--input", "r.csv"], dir.path());
    let md = String::from_utf8_lossy(&md.stdout);
    assert!(md.contains("### rho = 0.5"));
    assert!(md.contains("| paired-only | n/a |"));
    let csv = sdb(&["report", "--input", "r.csv", "--format", "csv"], dir.path());
    assert_eq!(String::from_utf8_lossy(&csv.stdout).lines().count(), 5);
    let bad = sdb(&["report", "--input", "r.csv", "--format", "xml"], dir.path());
    assert_eq!(bad.status.code(), Some(3));
}
