use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stmom::synthetic::SyntheticMarket;

fn stmom(args: &[&str]) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_stmom"));
    c.args(args).env_remove("STMOM_OUTPUT_DIR");
    c
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn returns_csv(dir: &Path, n_assets: usize, years: usize) -> PathBuf {
    let path = dir.join("returns.csv");
    SyntheticMarket {
        n_assets,
        n_days: 252 * years,
        ..SyntheticMarket::default()
    }
    .generate(21)
    .unwrap()
    .save_csv(&path)
    .unwrap();
    path
}

#[test]
fn missing_input_is_a_usage_error() {
    let o = run(stmom(&["ingest", "/no/such/file.csv"]).arg("--format").arg("return"));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("/no/such/file.csv"));
}

#[test]
fn unknown_flag_and_bad_strategy_exit_two() {
    assert_eq!(run(&mut stmom(&["backtest", "--bogus"])).status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let data = returns_csv(tmp.path(), 3, 2);
    let o = run(stmom(&["backtest", "--format", "return", "--strategies", "tsmom,nope", "--data"]).arg(&data));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope"));
}

#[test]
fn ingest_prints_a_summary_and_writes_the_panel() {
    let tmp = tempfile::tempdir().unwrap();
    let data = returns_csv(tmp.path(), 3, 1);
    let out = tmp.path().join("clean.csv");
    let o = run(stmom(&["ingest", "--format", "return", "--winsorize", "off", "-o"])
        .arg(&out)
        .arg(&data));
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("assets: 3"));
    assert!(text.contains("dates: 252 (2000-01-03 to"));
    assert!(text.contains("  A02: 0"));
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&data).unwrap());
}

#[test]
fn backtest_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    let data = returns_csv(tmp.path(), 4, 3);
    let env_dir = tmp.path().join("from_env");
    let o = run(stmom(&["backtest", "--format", "return", "--strategies", "long_only,tsmom,csmom+tsmom", "--data"])
        .arg(&data)
        .env("STMOM_OUTPUT_DIR", &env_dir));
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["metrics_raw.csv", "metrics_rescaled.csv", "cost_sweep.csv", "manifest.json", "returns_tsmom.csv"] {
        assert!(env_dir.join(f).exists(), "{f} missing");
    }
    let header = std::fs::read_to_string(env_dir.join("metrics_rescaled.csv")).unwrap();
    assert!(header.starts_with("strategy,seeds,expected_return,expected_return_std,"));

    // The flag wins over the environment.
    let flag_dir = tmp.path().join("from_flag");
    let o = run(stmom(&["backtest", "--format", "return", "--strategies", "tsmom", "--data"])
        .arg(&data)
        .arg("--output-dir")
        .arg(&flag_dir)
        .env("STMOM_OUTPUT_DIR", &env_dir));
    assert!(o.status.success());
    assert!(flag_dir.join("metrics_raw.csv").exists());

    let o = run(stmom(&["report"]).arg(&env_dir));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("csmom+tsmom"));
    let o = run(stmom(&["report", "--format", "json"]).arg(&env_dir));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["metrics_rescaled"].as_array().unwrap().len(), 3);
}

#[test]
fn train_then_attribute() {
    let tmp = tempfile::tempdir().unwrap();
    let data = returns_csv(tmp.path(), 3, 3);
    let ck = tmp.path().join("slp.json");
    let log = tmp.path().join("log.csv");
    let o = run(stmom(&["train", "--format", "return", "--model", "slp", "--iterations", "1", "--epochs", "3", "--data"])
        .arg(&data)
        .arg("-o")
        .arg(&ck)
        .arg("--log")
        .arg(&log));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(std::fs::read_to_string(&log).unwrap().starts_with("window,candidate,epoch,train_loss,val_loss"));

    let o = run(stmom(&["attribution", "--format", "return", "--asset", "A01", "--top", "5", "--checkpoint"])
        .arg(&ck)
        .arg("--data")
        .arg(&data));
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "feature,rank,mean_abs_attr");
    assert_eq!(lines.len(), 6);
    assert!(lines[1].contains("@lag") && lines[1].contains(",1,"));

    let o = run(stmom(&["attribution", "--global", "--checkpoint", "/no/such.json", "--data"]).arg(&data));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn linear_attribution_needs_an_slp() {
    let tmp = tempfile::tempdir().unwrap();
    let data = returns_csv(tmp.path(), 3, 3);
    let ck = tmp.path().join("mlp.json");
    let o = run(stmom(&["train", "--format", "return", "--model", "mlp", "--iterations", "1", "--epochs", "2", "--data"])
        .arg(&data)
        .arg("-o")
        .arg(&ck));
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(stmom(&["attribution", "--format", "return", "--checkpoint"]).arg(&ck).arg("--data").arg(&data));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--method permutation"));
    let o = run(stmom(&["attribution", "--format", "return", "--method", "permutation", "--permutations", "1", "--top", "3", "--checkpoint"])
        .arg(&ck)
        .arg("--data")
        .arg(&data));
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 4);
}
