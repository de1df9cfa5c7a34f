use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bdp(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bdp")).args(args).current_dir(dir).env_remove("BDP_JOBS").output().unwrap()
}

fn ok(out: Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn error_json(out: &Output) -> Value {
    assert!(!out.status.success());
    serde_json::from_slice(out.stderr.trim_ascii()).unwrap()
}

const SMALL_MODEL: &str = r#"{"N": 10, "K": 2, "family": "sis", "theta": {"beta": [0.101, 0.037], "mu": 1.0}}"#;

fn setup(config: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("model.json"), SMALL_MODEL).unwrap();
    let cfg = dir.path().join("config.json");
    fs::write(&cfg, config).unwrap();
    (dir, cfg)
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push((p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

#[test]
fn simulate_is_deterministic() {
    let (dir, _) = setup(r#"{"experiment": "trajectory", "model": "model.json", "x0": 5, "horizons": [20], "marked": true}"#);
    let d = dir.path();
    for out in ["a", "b"] {
        ok(bdp(&["simulate", "--config", "config.json", "--seed", "7", "--replicate", "3", "--out", out], d));
    }
    ok(bdp(&["simulate", "--config", "config.json", "--seed", "8", "--replicate", "3", "--out", "c"], d));
    let a = fs::read(d.join("a/trajectory_s7_r3.csv")).unwrap();
    assert_eq!(a, fs::read(d.join("b/trajectory_s7_r3.csv")).unwrap());
    assert_eq!(fs::read(d.join("a/trajectory_s7_r3.json")).unwrap(), fs::read(d.join("b/trajectory_s7_r3.json")).unwrap());
    assert_ne!(a, fs::read(d.join("c/trajectory_s8_r3.csv")).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("t,direction,mark,state_after\n"));
    // Births carry a 1-based mark, deaths none.
    for line in text.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        match cells[1] {
            "birth" => assert!(matches!(cells[2], "1" | "2")),
            "death" => assert_eq!(cells[2], ""),
            other => panic!("direction {other}"),
        }
    }
}

#[test]
fn run_output_is_independent_of_worker_count() {
    let (dir, _) = setup(
        r#"{"experiment": "estimator-means", "model": "model.json", "x0": 5, "horizons": [30, 60],
            "replicates": 12, "base_seed": 3, "marked": true, "sampling": "q_process"}"#,
    );
    let d = dir.path();
    ok(bdp(&["run", "--config", "config.json", "--jobs", "1", "--out", "one"], d));
    let out = Command::new(env!("CARGO_BIN_EXE_bdp"))
        .args(["run", "--config", "config.json", "--out", "many"])
        .env("BDP_JOBS", "4")
        .current_dir(d)
        .output()
        .unwrap();
    ok(out);
    let one = files(&d.join("one"));
    assert_eq!(one, files(&d.join("many")));
    let names: Vec<&str> = one.iter().map(|(n, _)| n.as_str()).collect();
    for expected in ["replicates.csv", "summary.json", "errors.jsonl", "plot_means_b_1.svg", "plot_means_mu.svg"] {
        assert!(names.contains(&expected), "missing {expected}");
    }
    for (name, bytes) in &one {
        if name.ends_with(".svg") {
            assert!(bytes.starts_with(b"<svg") && bytes.ends_with(b"</svg>\n"));
        }
    }
    // Different seed, different numbers.
    ok(bdp(&["run", "--config", "config.json", "--seed", "4", "--out", "other"], d));
    assert_ne!(fs::read(d.join("one/replicates.csv")).unwrap(), fs::read(d.join("other/replicates.csv")).unwrap());
}

#[test]
fn summary_is_recomputable_from_replicates() {
    let (dir, _) = setup(
        r#"{"experiment": "consistency", "model": "model.json", "x0": 5, "horizons": [40],
            "replicates": 10, "marked": true, "sampling": "q_process", "estimators": ["conditional-mle", "qmle"]}"#,
    );
    let d = dir.path();
    ok(bdp(&["run", "--config", "config.json", "--out", "o"], d));
    let v = ok(bdp(&["validate", "--out", "o"], d));
    assert_eq!(v["valid"], true);
    assert!(v["values_checked"].as_u64().unwrap() > 50);
    assert!(d.join("o/scatter_T40.csv").exists());
    assert!(d.join("o/plot_scatter_T40_marked.svg").exists());

    let summary: Value = serde_json::from_slice(&fs::read(d.join("o/summary.json")).unwrap()).unwrap();
    let groups = summary["groups"].as_array().unwrap();
    assert_eq!(groups.len(), 4, "two estimators on two views");
    assert_eq!(summary["truth"][0]["name"], "b_1");
    assert!((summary["truth"][0]["value"].as_f64().unwrap() - 1.01).abs() < 1e-12);

    // Tamper with one statistic.
    let mut tampered = summary.clone();
    let mean = tampered["groups"][0]["coords"][0]["mean"].as_f64().unwrap();
    tampered["groups"][0]["coords"][0]["mean"] = Value::from(mean * 1.01);
    fs::write(d.join("o/summary.json"), serde_json::to_vec(&tampered).unwrap()).unwrap();
    let out = bdp(&["validate", "--out", "o"], d);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_json(&out)["error"], "validation");
}

#[test]
fn fit_and_test_reports() {
    let (dir, _) = setup(r#"{"experiment": "trajectory", "model": "model.json", "x0": 5, "horizons": [200], "marked": true, "sampling": "q_process"}"#);
    let d = dir.path();
    ok(bdp(&["simulate", "--config", "config.json", "--seed", "1", "--out", "s"], d));
    let traj = "s/trajectory_s1_r0.csv";
    let report = ok(bdp(&["fit", "--trajectory", traj, "--out", "f"], d));
    let written: Value = serde_json::from_slice(&fs::read(d.join("f/fit.json")).unwrap()).unwrap();
    assert_eq!(report, written);
    assert_eq!(report["estimator"], "conditional-mle");
    assert_eq!(report["marks"], "marked");
    assert_eq!(report["information"], "observed");
    assert_eq!(report["fit"]["converged"], true);
    assert!(report["se"]["mu"].as_f64().unwrap() > 0.0);
    let b1 = report["scaled"][0].as_f64().unwrap();
    assert!((b1 - 10.0 * report["theta_hat"]["beta"][0].as_f64().unwrap()).abs() < 1e-12);

    let unmarked = ok(bdp(&["fit", "--trajectory", traj, "--unmarked", "--estimator", "qmle"], d));
    assert_eq!(unmarked["marks"], "unmarked");
    assert_eq!(unmarked["information"], "population");
    let naive = ok(bdp(&["fit", "--trajectory", traj, "--estimator", "naive"], d));
    assert_eq!(naive["fit"]["kind"], "marked-closed-form");

    let test = ok(bdp(&["test", "--trajectory", traj, "--mechanism", "2"], d));
    assert_eq!(test["i"], 2);
    let z = test["z"].as_f64().unwrap();
    assert!((test["w"].as_f64().unwrap() - z.max(0.0).powi(2)).abs() < 1e-12);
    assert_eq!(test["levels"].as_object().unwrap().len(), 3);

    let out = bdp(&["test", "--trajectory", traj, "--mechanism", "3"], d);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "config");
}

#[test]
fn trajectory_files_round_trip_through_fit() {
    let (dir, _) = setup(r#"{"experiment": "trajectory", "model": "model.json", "x0": 4, "horizons": [25], "replicates": 3}"#);
    let d = dir.path();
    ok(bdp(&["run", "--config", "config.json", "--out", "t"], d));
    let csv = fs::read_to_string(d.join("t/replicates.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    for r in 0..3 {
        let path = format!("t/trajectories/T25_r{r:04}.csv");
        let meta: Value = serde_json::from_slice(&fs::read(d.join(&path).with_extension("json")).unwrap()).unwrap();
        assert_eq!(meta["absorbed_at"], Value::Null);
        assert_eq!(meta["horizon"], 25.0);
        ok(bdp(&["fit", "--trajectory", &path, "--estimator", "naive"], d));
    }
    // A corrupted state column is rejected.
    let path = d.join("t/trajectories/T25_r0000.csv");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let last = lines.len() - 1;
    lines[last] = format!("{},99", lines[last].rsplit_once(',').unwrap().0);
    fs::write(&path, lines.join("\n")).unwrap();
    let out = bdp(&["fit", "--trajectory", "t/trajectories/T25_r0000.csv"], d);
    assert_eq!(error_json(&out)["error"], "io");
}

#[test]
fn diagnostics_dump() {
    let (dir, _) = setup(r#"{"experiment": "diagnostics", "model": "model.json", "x0": 3, "horizons": [30], "sampling": "q_process"}"#);
    let d = dir.path();
    ok(bdp(&["diagnostics", "--config", "config.json", "--out", "g"], d));
    let dump: Value = serde_json::from_slice(&fs::read(d.join("g/diagnostics.json")).unwrap()).unwrap();
    let pi: f64 = dump["spectral"]["pi_tilde"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
    assert!((pi - 1.0).abs() < 1e-12);
    assert!(dump["spectral"]["gamma"].as_f64().unwrap() < 0.0);
    assert_eq!(dump["information"]["fisher"].as_array().unwrap().len(), 3);
    let trace = dump["rn_fixed_window"].as_array().unwrap();
    assert_eq!(trace[0]["value"], 1.0);
    let (lo, hi) = (dump["rn_band"][0].as_f64().unwrap(), dump["rn_band"][1].as_f64().unwrap());
    let full = dump["rn_full_window"]["value"].as_f64().unwrap();
    assert!(full >= 0.99 * lo && full <= 1.01 * hi);

    ok(bdp(&["run", "--config", "config.json", "--out", "r"], d));
    assert!(d.join("r/diagnostics.json").exists());
    assert!(d.join("r/plot_rn_T30.svg").exists());
}

#[test]
fn errors_are_reported_as_json() {
    let (dir, _) = setup(r#"{"experiment": "consistency", "model": "model.json", "x0": 5, "horizons": [10], "typo": 1}"#);
    let d = dir.path();
    let out = bdp(&["run", "--config", "config.json"], d);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "config");

    fs::write(d.join("bad.json"), r#"{"experiment": "consistency", "model": "model.json", "x0": 50, "horizons": [10]}"#).unwrap();
    assert_eq!(error_json(&bdp(&["run", "--config", "bad.json"], d))["error"], "config");

    fs::write(
        d.join("neg.json"),
        r#"{"experiment": "consistency", "model": "model.json", "theta0": {"beta": [-0.1, 0.01], "mu": 1.0}, "x0": 5, "horizons": [10]}"#,
    )
    .unwrap();
    let out = bdp(&["run", "--config", "neg.json"], d);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"], "inadmissible");

    // Survival to T is hopeless: the run aborts with a subcriticality error.
    fs::write(
        d.join("sub.json"),
        r#"{"experiment": "consistency", "model": "model.json", "theta0": {"beta": [0.02, 0.001], "mu": 1.0},
            "x0": 2, "horizons": [200], "replicates": 4, "max_attempts": 20}"#,
    )
    .unwrap();
    let out = bdp(&["run", "--config", "sub.json", "--out", "sub"], d);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_json(&out)["error"], "subcritical");
    let errors = fs::read_to_string(d.join("sub/errors.jsonl")).unwrap();
    assert_eq!(errors.lines().count(), 4);
    assert!(errors.lines().all(|l| serde_json::from_str::<Value>(l).unwrap()["kind"] == "rejection_budget"));
}

/// Null-hypothesis p-values from the Wald test are close to uniform.
#[test]
fn null_test_p_values_are_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("model.json"),
        r#"{"N": 100, "K": 2, "family": "sis", "theta": {"beta": [0.02875, 0.001], "mu": 1.0}}"#,
    )
    .unwrap();
    fs::write(
        d.join("config.json"),
        r#"{"experiment": "null-test", "model": "model.json", "theta0": {"beta": [0.02875, 0.0], "mu": 1.0},
            "mechanism": 2, "x0": 10,
            "horizons": [1000], "replicates": 500, "base_seed": 11}"#,
    )
    .unwrap();
    ok(bdp(&["run", "--config", "config.json", "--out", "n"], d));
    let summary: Value = serde_json::from_slice(&fs::read(d.join("n/summary.json")).unwrap()).unwrap();
    let null = &summary["groups"][0]["null"];
    assert_eq!(null["n"], 500);
    let ks_p = null["ks_p"].as_f64().unwrap();
    assert!(ks_p < 0.08, "KS distance of p-values to U(0,1): {ks_p}");
    let atom = null["p_w0"].as_f64().unwrap();
    assert!((0.44..=0.56).contains(&atom), "P(W = 0) = {atom}");
    let hist = fs::read_to_string(d.join("n/z_histogram.csv")).unwrap();
    assert!(hist.starts_with("bin_lo,bin_hi,count,density,normal_density\n"));
    let counted: u64 = hist.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse::<u64>().unwrap()).sum();
    assert_eq!(counted, 500);

    // The `test` subcommand on one replicate's path agrees with the batch row.
    ok(bdp(&["simulate", "--config", "config.json", "--replicate", "7", "--out", "s"], d));
    let single = ok(bdp(&["test", "--trajectory", "s/trajectory_s11_r7.csv", "--mechanism", "2"], d));
    let csv = fs::read_to_string(d.join("n/replicates.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let zcol = header.iter().position(|h| *h == "z").unwrap();
    let row: Vec<&str> = csv.lines().nth(8).unwrap().split(',').collect();
    assert_eq!(row[0], "7");
    assert_eq!(row[zcol].parse::<f64>().unwrap(), single["z"].as_f64().unwrap());
}
