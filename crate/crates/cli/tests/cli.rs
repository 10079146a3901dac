//! End-to-end tests of the command-line interface, driving the built
//! binary the way a user would.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_salnx")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary should run")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_small_config(dir: &Path) -> PathBuf {
    let path = dir.join("exp2.toml");
    let out = run(&[
        "init-config",
        "--benchmark",
        "exp2",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = fs::read_to_string(&path).unwrap();
    let text = text
        .replace("n_iterations = 50", "n_iterations = 5")
        .replace("rmse_grid = 1000", "rmse_grid = 200")
        .replace(
            "coverage_trajectories = 1000",
            "coverage_trajectories = 100",
        );
    // Two seeds keep the test quick.
    let re_start = text.find("seeds = [").unwrap();
    let re_end = text[re_start..].find(']').unwrap() + re_start + 1;
    let text = format!("{}seeds = [1, 2]{}", &text[..re_start], &text[re_end..]);
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn run_theory_report_round_trip() {
    let dir = tempdir("round_trip");
    let config = write_small_config(&dir);
    let out_dir = dir.join("runs");

    let out = run(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "run failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let log1 = out_dir.join("run_exp2_sal_seed1.jsonl");
    let csv1 = out_dir.join("run_exp2_sal_seed1.csv");
    assert!(log1.exists() && csv1.exists());
    assert!(out_dir.join("run_exp2_sal_seed2.jsonl").exists());

    // CSV header matches the documented column order.
    let csv = fs::read_to_string(&csv1).unwrap();
    assert!(csv.starts_with("iter,strategy,eta_1,eta_2,crit,xi_hat,unsafe,rmse,coverage,seed\n"));

    let out = run(&["theory", "--log", log1.to_str().unwrap()]);
    assert!(
        out.status.success(),
        "theory failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = stdout(&out);
    assert!(text.contains("mutual_info_dual_route: PASS"));
    assert!(!text.contains("FAIL"));

    let series_dir = dir.join("series");
    let out = run(&[
        "report",
        "--log",
        log1.to_str().unwrap(),
        "--out",
        series_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("exp2,sal,0.2,1,5"));
    assert!(series_dir.join("run_exp2_sal_seed1_series.csv").exists());
}

#[test]
fn run_is_reproducible_at_the_byte_level() {
    let dir = tempdir("reproducible");
    let config = write_small_config(&dir);
    let mut csvs = Vec::new();
    for attempt in ["a", "b"] {
        let out_dir = dir.join(attempt);
        let out = run(&[
            "run",
            "--config",
            config.to_str().unwrap(),
            "--seed",
            "7",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success());
        csvs.push(fs::read(out_dir.join("run_exp2_sal_seed7.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn strategy_and_budget_overrides_apply() {
    let dir = tempdir("overrides");
    let config = write_small_config(&dir);
    let out_dir = dir.join("runs");
    let out = run(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "3",
        "--strategy",
        "random_safe",
        "--budget",
        "0.05:50",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(stdout(&out).contains("alpha 0.001000"));
    assert!(out_dir.join("run_exp2_random_safe_seed3.jsonl").exists());
}

#[test]
fn sweep_alpha_writes_aggregate_summary() {
    let dir = tempdir("sweep");
    let config = write_small_config(&dir);
    let out_dir = dir.join("sweep");
    let out = run(&[
        "sweep-alpha",
        "--config",
        config.to_str().unwrap(),
        "--alphas",
        "0.1,0.6",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary = fs::read_to_string(out_dir.join("sweep_summary.csv")).unwrap();
    assert!(summary.starts_with("alpha,seed,unsafe_fraction,final_rmse,final_coverage\n"));
    // 2 alphas x 2 seeds plus the header.
    assert_eq!(summary.lines().count(), 5);
    assert!(out_dir
        .join("alpha0.1")
        .join("run_exp2_sal_seed1.csv")
        .exists());
}

#[test]
fn malformed_config_exits_nonzero_with_diagnostic() {
    let dir = tempdir("malformed");
    let path = dir.join("bad.toml");
    fs::write(&path, "benchmark = \"exp2\"\nstrategy = \"sal\"\n").unwrap();
    let out = run(&["run", "--config", path.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
}

#[test]
fn unknown_strategy_is_rejected() {
    let dir = tempdir("badstrategy");
    let config = write_small_config(&dir);
    let out = run(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--strategy",
        "maximal",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown strategy"));
}

fn tempdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("salnx_cli_{tag}_{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}
