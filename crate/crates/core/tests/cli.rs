use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mspde::experiments::{fit_rate, read_rates_csv};

fn mspde(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mspde"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn strong_rate_writes_schema_and_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[rates]\npaths = 64\neps = [0.125, 0.0625, 0.03125, 0.015625]\n");
    let out = mspde(&["rates-strong", "--config", &cfg], &tmp.path().join("o"));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let csv = fs::read_to_string(tmp.path().join("o/rates.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("# mspde 0.1.0 config="));
    assert_eq!(lines.next().unwrap(), "experiment,epsilon,gamma,q,error,stderr,n,paths,seed");
    assert_eq!(lines.count(), 8);

    let (hash, points) = read_rates_csv(&tmp.path().join("o/rates.csv")).unwrap();
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("o/slopes.json")).unwrap()).unwrap();
    assert_eq!(json["config_hash"], hash.as_str());
    for fit in json["fits"].as_array().unwrap() {
        let gamma = fit["gamma"].as_f64().unwrap();
        let refit = fit_rate("strong", gamma, 2.0, &points, (0.8, 1.2), None);
        assert!((refit.slope.unwrap() - fit["slope"].as_f64().unwrap()).abs() < 1e-12);
    }
}

#[test]
fn unknown_key_is_a_failure_exit() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[rates]\npathz = 3\n");
    let out = mspde(&["rates-strong", "--config", &cfg], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pathz"));
}

#[test]
fn single_eps_rate_is_a_failure_exit() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[rates]\neps = [0.25]\n");
    let out = mspde(&["rates-strong", "--config", &cfg], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn weak_rate_below_noise_floor_is_inconclusive() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[rates]\neps = [0.0078125, 0.00390625]\n[weak]\npaths = 64\n");
    let out = mspde(&["rates-weak", "--config", &cfg], &tmp.path().join("o"));
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(tmp.path().join("o/rates.csv").exists());
}

#[test]
fn simulate_writes_tagged_trajectories() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[model]\nn = 2\n[rates]\neps = [0.25]\n");
    let out = mspde(&["simulate", "--config", &cfg], &tmp.path().join("o"));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(tmp.path().join("o/trajectories.csv")).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# mspde "));
    assert_eq!(lines.next().unwrap(), "time,mode,value,series");
    let tags: std::collections::BTreeSet<&str> = lines.map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(tags.into_iter().collect::<Vec<_>>(), ["averaged", "fast", "slow"]);
}

#[test]
fn probes_and_diagnostics_report_json() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "[model]\nn = 3\n[check]\npaths = 8\neps = [0.25, 0.125]\n[galerkin]\nlevels = [2, 4]\npaths = 4\n",
    );
    for (cmd, file) in [("average", "average.json"), ("check", "check.json"), ("galerkin", "galerkin.json")] {
        let out = mspde(&[cmd, "--config", &cfg], &tmp.path().join("o"));
        assert_eq!(out.status.code(), Some(0), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
        let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("o").join(file)).unwrap()).unwrap();
        assert_eq!(json["status"], "pass", "{cmd}");
    }
}

#[test]
fn threads_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[rates]\npaths = 16\neps = [0.125, 0.0625]\n");
    let run = |env: &str, dir: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_mspde"))
            .args(["rates-strong", "--config", &cfg, "--out"])
            .arg(tmp.path().join(dir))
            .env("MSPDE_THREADS", env)
            .output()
            .unwrap();
        assert!(out.status.code().is_some());
        fs::read(tmp.path().join(dir).join("rates.csv")).unwrap()
    };
    assert_eq!(run("1", "a"), run("2", "b"));
}
