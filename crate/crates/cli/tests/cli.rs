use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use serde_json::Value;

fn safe_lqr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_safe-lqr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn without_timing(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("timing");
    v
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let res = safe_lqr(&[
        "run", "--n", "2", "--p", "1", "--rho", "0.8", "--beta", "0.25", "--steps", "5000", "--replicates", "2",
        "--seed", "3", "--out", path(&out),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let report = read_json(&out.join("run_report.json"));
    assert_eq!(report["command"], "run");
    assert_eq!(report["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(report["seed"], 3);
    assert_eq!(report["config"]["steps"], 5000);
    assert_eq!(report["system"]["n"], 2);
    let beta = &report["betas"][0];
    assert_eq!(beta["completed"], 2);
    assert_eq!(beta["replicates"].as_array().unwrap().len(), 2);
    assert!(!beta["curves"]["a_err"].as_array().unwrap().is_empty());
    assert!(beta["slopes"]["a_err"]["slope"].is_number());
    assert!(report["timing"]["elapsed_seconds"].is_number());

    let curves = std::fs::read_to_string(out.join("curves.csv")).unwrap();
    assert!(curves.starts_with("series,k,value\n"));
    assert!(curves.contains("safe/beta=0.25/a_err/median,"));
    let traj = std::fs::read_to_string(out.join("trajectories/safe_beta0.25_rep1.csv")).unwrap();
    assert!(traj.starts_with("k,norm_x,norm_u,safesteps,gain_id\n"));
    assert_eq!(traj.lines().count(), 1 + 5000 / 100);
}

#[test]
fn embedded_config_reproduces_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let first = safe_lqr(&[
        "run", "--beta", "0,0.25", "--steps", "3000", "--replicates", "3", "--seed", "11", "--out", path(&out),
    ]);
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    let saved = dir.path().join("first.json");
    std::fs::copy(out.join("run_report.json"), &saved).unwrap();
    let curves = std::fs::read(out.join("curves.csv")).unwrap();

    let again = safe_lqr(&["run", "--config", path(&saved)]);
    assert_eq!(code(&again), 0, "{}", stderr(&again));
    assert_eq!(without_timing(read_json(&saved)), without_timing(read_json(&out.join("run_report.json"))));
    assert_eq!(curves, std::fs::read(out.join("curves.csv")).unwrap());
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let one = dir.path().join("one");
    let many = dir.path().join("many");
    let args = ["run", "--steps", "2000", "--replicates", "4", "--seed", "5", "--record-stride", "0"];
    let a = Command::new(env!("CARGO_BIN_EXE_safe-lqr"))
        .args(args)
        .args(["--out", path(&one)])
        .env("SAFE_LQR_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    let b = safe_lqr(&[&args[..], &["--out", path(&many), "--threads", "3"]].concat());
    assert_eq!(code(&b), 0, "{}", stderr(&b));
    let strip = |v: Value| {
        let mut v = without_timing(v);
        v["config"].as_object_mut().unwrap().remove("out");
        v
    };
    assert_eq!(
        strip(read_json(&one.join("run_report.json"))),
        strip(read_json(&many.join("run_report.json")))
    );
}

#[test]
fn compare_ce_matches_run_on_safe_side() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let ce_dir = dir.path().join("ce");
    let common = ["--steps", "4000", "--replicates", "3", "--seed", "9", "--record-stride", "0"];
    let run = safe_lqr(&[&["run"][..], &common, &["--out", path(&run_dir)]].concat());
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let ce = safe_lqr(&[&["compare-ce"][..], &common, &["--out", path(&ce_dir)]].concat());
    assert_eq!(code(&ce), 0, "{}", stderr(&ce));

    let run = read_json(&run_dir.join("run_report.json"));
    let ce = read_json(&ce_dir.join("compare_report.json"));
    assert_eq!(run["betas"][0]["replicates"], ce["safe"][0]["replicates"]);
    let totals = &ce["totals"][0];
    assert_eq!(totals["replicates"], 3);
    assert_eq!(totals["safe"]["diverged"], 0);
    assert_eq!(totals["safe"]["large_state"], 0);
    assert!(totals["ce"]["diverged"].is_u64());
    let rows = ce["comparison"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0]["safe"]["completed"], true);
}

#[test]
fn single_replicate_compare_is_quick() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let res = safe_lqr(&[
        "compare-ce", "--steps", "10000", "--replicates", "1", "--out", path(dir.path()),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn toml_config_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(
        &cfg,
        "seed = 4\nsteps = 3000\nreplicates = 2\nrecord_stride = 0\nbetas = [0.1]\n[system]\nn = 2\np = 2\nrho = 0.7\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let res = safe_lqr(&["run", "--config", path(&cfg), "--replicates", "1", "--out", path(&out)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let report = read_json(&out.join("run_report.json"));
    assert_eq!(report["config"]["replicates"], 1);
    assert_eq!(report["config"]["seed"], 4);
    assert_eq!(report["config"]["betas"][0], 0.1);
    assert_eq!(report["system"]["p"], 2);
    assert!(!out.join("trajectories").exists());
}

#[test]
fn system_file_source() {
    let dir = tempfile::tempdir().unwrap();
    let sys = dir.path().join("sys.json");
    std::fs::write(&sys, r#"{"n": 1, "p": 1, "A": [[0.5]], "B": [[1.0]]}"#).unwrap();
    let out = dir.path().join("out");
    let res = safe_lqr(&[
        "run", "--system", path(&sys), "--steps", "2000", "--replicates", "1", "--out", path(&out),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let report = read_json(&out.join("run_report.json"));
    assert_eq!(report["system"]["A"][0][0], 0.5);
    assert_eq!(report["config"]["system"]["file"], path(&sys));
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path());
    let zero = safe_lqr(&["run", "--replicates", "0", "--out", out]);
    assert_eq!(code(&zero), 2);
    assert!(stderr(&zero).contains("replicates"));
    assert_eq!(code(&safe_lqr(&["run", "--beta", "0.7", "--out", out])), 2);
    assert_eq!(code(&safe_lqr(&["run", "--rho", "1.2", "--out", out])), 2);
    assert_eq!(code(&safe_lqr(&["run", "--steps", "2", "--out", out])), 2);
    assert_eq!(code(&safe_lqr(&["run", "--no-such-flag"])), 2);
    assert_eq!(code(&safe_lqr(&["oscillation", "--t", "0", "--out", out])), 2);

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "stpes = 10\n").unwrap();
    assert_eq!(code(&safe_lqr(&["run", "--config", path(&cfg)])), 2);
}

fn series(csv: &str, name: &str) -> Vec<f64> {
    csv.lines()
        .filter_map(|l| l.strip_prefix(&format!("{name},")))
        .map(|rest| rest.split(',').nth(1).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn oscillation_default_and_custom() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let res = safe_lqr(&["oscillation", "--out", path(&a)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let csv = std::fs::read_to_string(a.join("oscillation.csv")).unwrap();
    let t1 = series(&csv, "t=1/norm");
    let t2 = series(&csv, "t=2/norm");
    assert_eq!(t1.len(), 61);
    assert_eq!(t2.len(), 61);
    assert!(t1.last().unwrap() > &1.0, "t=1 keeps oscillating");
    assert!(t2.last().unwrap() < &1e-6, "t=2 settles");
    let report = read_json(&a.join("oscillation_report.json"));
    assert_eq!(report["traces"].as_array().unwrap().len(), 2);

    let b = dir.path().join("b");
    assert_eq!(code(&safe_lqr(&["oscillation", "--out", path(&b)])), 0);
    assert_eq!(csv, std::fs::read_to_string(b.join("oscillation.csv")).unwrap());

    let c = dir.path().join("c");
    let res = safe_lqr(&["oscillation", "--m", "2.5", "--t", "3", "--steps", "20", "--out", path(&c)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let csv = std::fs::read_to_string(c.join("oscillation.csv")).unwrap();
    assert_eq!(series(&csv, "t=3/norm").len(), 21);
    assert!(series(&csv, "t=1/norm").is_empty());
    let report = read_json(&c.join("oscillation_report.json"));
    assert_eq!(report["config"]["oscillation"]["threshold"], 2.5);
    assert_eq!(report["traces"][0]["hold"], 3);
}

#[test]
fn reduced_validation_skips_monte_carlo() {
    let dir = tempfile::tempdir().unwrap();
    let res = safe_lqr(&["validate-bounds", "--samples", "100", "--out", path(dir.path())]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let report = read_json(&dir.path().join("validation_report.json"));
    assert_eq!(report["reduced"], true);
    let checks = report["checks"].as_array().unwrap();
    let status = |name: &str| checks.iter().find(|c| c["name"] == name).unwrap()["status"].clone();
    assert_eq!(status("escape/monte_carlo/M=8"), "skipped");
    assert_eq!(status("fourth_moment/monte_carlo"), "skipped");
    assert_eq!(status("switching_gap/monte_carlo"), "skipped");
    assert_eq!(status("escape/monotone"), "pass");
    assert_eq!(status("lyapunov_norm_bound"), "pass");
    assert!(checks.iter().all(|c| c["status"] != "fail"));
}

#[test]
fn threshold_below_escape_floor_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let res = safe_lqr(&["validate-bounds", "--samples", "100", "--escape-m", "1", "--out", path(dir.path())]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let stdout = String::from_utf8_lossy(&res.stdout);
    let line = stdout.lines().find(|l| l.contains("escape/monte_carlo/M=1")).unwrap();
    assert!(line.starts_with("invalid"), "{line}");
    assert!(line.contains("floor"), "{line}");
}

#[test]
fn rate_fit_recovers_slope() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("curve.csv");
    let mut text = String::from("series,k,value\n");
    for j in 0..=40 {
        let k = 10f64.powf(j as f64 / 8.0);
        text.push_str(&format!("a,{k},{}\n", 3.0 * k.powf(-0.5)));
        text.push_str(&format!("b,{k},{}\n", k.powf(-0.25)));
    }
    std::fs::write(&input, text).unwrap();
    let out = dir.path().join("fit.json");
    let res = safe_lqr(&[
        "rate-fit", "--input", path(&input), "--series", "a", "--from", "10", "--per-decade", "4", "--out", path(&out),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let report = read_json(&out);
    let fits = report["fits"].as_array().unwrap();
    assert_eq!(fits.len(), 1);
    assert!((fits[0]["fit"]["slope"].as_f64().unwrap() + 0.5).abs() < 1e-9);
    assert_eq!(fits[0]["fit"]["points"], 17);

    let all = safe_lqr(&["rate-fit", "--input", path(&input)]);
    let stdout: Value = serde_json::from_slice(&all.stdout).unwrap();
    assert_eq!(stdout["fits"].as_array().unwrap().len(), 2);
    assert!((stdout["fits"][1]["fit"]["slope"].as_f64().unwrap() + 0.25).abs() < 1e-9);

    assert_eq!(code(&safe_lqr(&["rate-fit", "--input", path(&input), "--series", "zzz"])), 2);
}
