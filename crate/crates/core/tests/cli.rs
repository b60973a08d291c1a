use std::process::{Command, Output};

use fastmtgp::bench::{BenchRecord, ScalingRecord};
use fastmtgp::gp::{FitReport, GpModel, ModelDocument};
use fastmtgp::kernels::KernelFamily;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fastmtgp")).args(args).env("FASTMTGP_THREADS", "2").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn points_are_deterministic_csv() {
    let args = ["points", "--kernel", "si-lattice", "--dim", "2", "--n", "4,2", "--seed", "7"];
    let a = ok(&args);
    assert_eq!(a, ok(&args));
    let mut lines = a.lines();
    assert_eq!(lines.next().unwrap(), "task,index,x1,x2");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 6);
    assert!(rows[0].starts_with("0,0,") && rows[5].starts_with("1,1,"));
    for r in rows {
        let f: Vec<f64> = r.split(',').skip(2).map(|v| v.parse().unwrap()).collect();
        assert!(f.iter().all(|v| (0.0..1.0).contains(v)));
    }
    assert_ne!(a, ok(&["points", "--kernel", "si-lattice", "--dim", "2", "--n", "4,2", "--seed", "8"]));
}

#[test]
fn zero_step_fit_reports_initial_hyperparameters() {
    let dir = tempfile::tempdir().unwrap();
    let model_path = dir.path().join("model.json");
    let report: FitReport = serde_json::from_str(&ok(&[
        "fit",
        "--problem",
        "rosenbrock",
        "--n",
        "64,32,16",
        "--steps",
        "0",
        "--seed",
        "3",
        "--out",
        model_path.to_str().unwrap(),
    ]))
    .unwrap();
    assert!(report.losses.is_empty());
    assert_eq!(report.hyper.eta, vec![1.0, 1.0]);
    assert_eq!(report.hyper.t, vec![0.1; 3]);
    let doc = ModelDocument::from_json(&std::fs::read_to_string(&model_path).unwrap()).unwrap();
    assert_eq!(doc.hyper.gamma, report.hyper.gamma);
    GpModel::import(&doc).unwrap();
}

#[test]
fn fit_is_reproducible_and_model_feeds_cubature() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    let args = ["fit", "--problem", "ackley", "--n", "64,64", "--steps", "5", "--seed", "11", "--out", path.to_str().unwrap()];
    let a: FitReport = serde_json::from_str(&ok(&args)).unwrap();
    let b: FitReport = serde_json::from_str(&ok(&args)).unwrap();
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.losses.len(), 5);

    let out: serde_json::Value = serde_json::from_str(&ok(&["cubature", "--model", path.to_str().unwrap(), "--chi", "0,1"])).unwrap();
    let mu = out["mu_hat"].as_array().unwrap();
    assert_eq!(mu.len(), 2);
    assert_eq!(out["chi_mean"].as_f64().unwrap(), mu[1].as_f64().unwrap());
    assert!(out["sigma_diag"][1].as_f64().unwrap() >= 0.0);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"kernel": "dsi-digital", "n": [8], "dim": 3, "seed": 1}"#).unwrap();
    let from_file = ok(&["points", "--config", cfg.to_str().unwrap()]);
    assert_eq!(from_file.lines().next().unwrap(), "task,index,x1,x2,x3");
    assert_eq!(from_file.lines().count(), 9);
    let overridden = ok(&["points", "--config", cfg.to_str().unwrap(), "--n", "4", "--dim", "1"]);
    assert_eq!(overridden.lines().count(), 5);
    assert_eq!(overridden.lines().next().unwrap(), "task,index,x1");
}

#[test]
fn bench_records_round_trip_and_dense_is_capped() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench.csv");
    let summary = dir.path().join("summary.csv");
    let res = run(&[
        "bench",
        "--problem",
        "borehole",
        "--kernel",
        "dsi-digital",
        "--methods",
        "se-dense",
        "--n",
        "16,16",
        "--sweep",
        "2048,1024",
        "--steps",
        "2",
        "--trials",
        "1",
        "--test-points",
        "128",
        "--out",
        out.to_str().unwrap(),
        "--summary",
        summary.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(String::from_utf8_lossy(&res.stderr).contains("skipped: se-dense n=2048x1024"));

    let mut rdr = csv::Reader::from_path(&out).unwrap();
    let recs: Vec<BenchRecord> = rdr.deserialize().collect::<Result<_, _>>().unwrap();
    assert_eq!(recs.len(), 3);
    let dense: Vec<_> = recs.iter().filter(|r| r.method == KernelFamily::SeDense).collect();
    assert_eq!(dense.len(), 1);
    assert_eq!(dense[0].n, "16x16");
    assert!(dense[0].l2_relative_error.is_finite() && dense[0].fit_seconds_per_step.is_finite());
    assert!(recs.iter().any(|r| r.method == KernelFamily::DsiDigital && r.n == "2048x1024"));
    for r in recs.iter().filter(|r| r.method == KernelFamily::DsiDigital) {
        assert!(r.cubature_abs_error.is_finite() && r.final_loss.is_finite());
    }
    assert_eq!(csv::Reader::from_path(&summary).unwrap().records().count(), 3);
}

#[test]
fn scaling_emits_one_row_per_size_vector() {
    let text = ok(&["scaling", "--kernel", "si-lattice", "--dim", "2", "--n", "64", "--sweep", "128,16", "--reps", "2"]);
    let recs: Vec<ScalingRecord> = csv::Reader::from_reader(text.as_bytes()).deserialize().collect::<Result<_, _>>().unwrap();
    assert_eq!(recs.len(), 2);
    assert_eq!(recs[1].n, "128x16");
    assert_eq!(recs[1].total, 144);
    assert!(recs.iter().all(|r| r.median_seconds > 0.0));
}

#[test]
fn failures_exit_nonzero() {
    for args in [
        vec!["points", "--kernel", "dsi-digital", "--dim", "2", "--n", "6"],
        vec!["fit", "--problem", "nowhere"],
        vec!["points", "--config", "/nonexistent/cfg.json"],
        vec!["cubature", "--model", "/nonexistent/model.json"],
    ] {
        let out = run(&args);
        assert!(!out.status.success(), "{args:?} should fail");
        assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    }
}
