//! End-to-end checks of the binary: outputs, determinism, exit codes, config
//! handling.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_robmix"))
}

fn tempdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("robmix-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

#[test]
fn ingest_writes_long_form_and_summary() {
    let dir = tempdir("ingest");
    let out = run(&["ingest", "--out", dir.to_str().unwrap()]);
    assert!(out.status.success());
    let long = read(&dir.join("long.csv"));
    assert_eq!(long.lines().count(), 91);
    assert!(long.starts_with("x1,x2,x3,z1_raw,z2_raw,y\n"));
    let summary = read(&dir.join("ingest_summary.json"));
    assert!(summary.contains("\"n\": 90"));
}

#[test]
fn fit_ols_reports_reference_coefficients() {
    let dir = tempdir("ols");
    let out = run(&["fit-ols", "--out", dir.to_str().unwrap()]);
    assert!(out.status.success());
    let table = read(&dir.join("ols_coefficients.csv"));
    let first = table.lines().nth(1).unwrap();
    assert!(first.starts_with("x1,484.624"), "{first}");
    let summary = read(&dir.join("ols_summary.json"));
    assert!(summary.contains("\"p\": 18"));
}

#[test]
fn reruns_are_byte_identical() {
    let d1 = tempdir("det1");
    let d2 = tempdir("det2");
    for d in [&d1, &d2] {
        let out = run(&[
            "--seed",
            "99",
            "--mode",
            "paper",
            "diagnose",
            "--n-sim",
            "25",
            "--out",
            d.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for name in [
        "mean_residuals.csv",
        "dispersion_residuals.csv",
        "envelope.csv",
        "predicted_vs_observed.csv",
        "diagnostics.json",
    ] {
        assert_eq!(read(&d1.join(name)), read(&d2.join(name)), "{name}");
    }
}

#[test]
fn optimize_emits_one_row_per_request() {
    let dir = tempdir("opt");
    let scenarios = dir.join("scenarios.csv");
    std::fs::write(
        &scenarios,
        "mu_mix,var_mix,mu_proof,var_proof,method,mode\n\
         15.0,6.25,41.25,9.766,delta,paper\n\
         20.0,6.25,53.75,9.766,delta,paper\n",
    )
    .unwrap();
    let out = run(&[
        "--seed",
        "7",
        "optimize",
        "--scenarios",
        scenarios.to_str().unwrap(),
        "--delta-sigma2",
        "58.36",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = read(&dir.join("optimization.csv"));
    assert_eq!(table.lines().count(), 3);
    // x1 pinned at its lower bound for the delta method
    for line in table.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[4], "delta");
        let x1: f64 = cols[6].parse().unwrap();
        assert!((x1 - 0.25).abs() < 0.01, "{line}");
        let feasible: bool = cols[11].parse().unwrap();
        assert!(feasible);
    }
}

#[test]
fn moments_json_includes_feasibility() {
    let dir = tempdir("mom");
    let out = run(&[
        "--mode",
        "exact",
        "moments",
        "--method",
        "delta",
        "--mu-mix",
        "15",
        "--var-mix",
        "6.25",
        "--mu-proof",
        "41.25",
        "--var-proof",
        "9.766",
        "--x",
        "0.5,0.25,0.25",
        "--delta-sigma2",
        "58.36",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = read(&dir.join("moments.json"));
    assert!(rows.contains("\"feasible\": true"));
    assert!(rows.contains("\"method\": \"delta\""));
}

#[test]
fn select_reaches_the_reduced_dispersion_model() {
    let dir = tempdir("select");
    let out = run(&["select", "--out", dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let selected = read(&dir.join("selected_model.json"));
    let disp_list = selected
        .split("\"dispersion_terms\"")
        .nth(1)
        .expect("dispersion list present");
    assert!(!disp_list.contains("\"x1:z1\""));
    assert!(!disp_list.contains("\"x2:z1^2\""));
    assert_eq!(disp_list.matches("\"x").count(), 16);
    let trace = read(&dir.join("selection_trace.csv"));
    assert!(trace.lines().count() >= 3);
}

#[test]
fn missing_dataset_fails_without_partial_output() {
    let dir = tempdir("missing");
    let out = run(&[
        "fit-ols",
        "--data",
        "/nonexistent/data.csv",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(!dir.join("ols_coefficients.csv").exists());
}

#[test]
fn config_file_sets_defaults_and_flags_override() {
    let dir = tempdir("config");
    let config = dir.join("run.conf");
    std::fs::write(
        &config,
        format!(
            "# run configuration\nseed = 5\nformat = json\nout = {}\n",
            dir.join("from_config").display()
        ),
    )
    .unwrap();
    let out = run(&["--config", config.to_str().unwrap(), "fit-ols"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("from_config/ols_coefficients.json").exists());

    // flag overrides the config's format
    let out = run(&[
        "--config",
        config.to_str().unwrap(),
        "--format",
        "csv",
        "fit-ols",
    ]);
    assert!(out.status.success());
    assert!(dir.join("from_config/ols_coefficients.csv").exists());

    // unknown keys are rejected
    std::fs::write(&config, "bogus = 1\n").unwrap();
    let out = run(&["--config", config.to_str().unwrap(), "fit-ols"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bogus"), "{err}");
}

#[test]
fn long_layout_round_trips_through_ingest() {
    let d1 = tempdir("roundtrip1");
    let out = run(&["ingest", "--out", d1.to_str().unwrap()]);
    assert!(out.status.success());
    let d2 = tempdir("roundtrip2");
    let out = run(&[
        "fit-ols",
        "--data",
        d1.join("long.csv").to_str().unwrap(),
        "--layout",
        "long",
        "--out",
        d2.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let a = read(&d2.join("ols_summary.json"));
    assert!(a.contains("\"n\": 90"));
}
