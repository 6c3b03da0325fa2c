use std::path::{Path, PathBuf};
use std::process::Command;

use kgd_core::selectors::Rule;
use kgd_runner::output::{read_results, write_outputs, RESULTS_HEADER};
use kgd_runner::{run_experiment, sweep_constant, ExperimentConfig, RunnerError};

fn config(json: &str) -> ExperimentConfig {
    ExperimentConfig::from_json(json).unwrap()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn single_baseline_cell_gives_one_row_and_one_summary() {
    let c = config(r#"{"sizes": [50], "dims": [1], "methods": ["bs"], "trials": 1, "test_size": 100}"#);
    let out = run_experiment(&c).unwrap();
    assert_eq!(out.rows.len(), 1);
    assert_eq!(out.summary.len(), 1);
    let row = &out.rows[0];
    assert_eq!((row.method, row.d, row.n, row.trial, row.seed), (Rule::Bs, 1, 50, 0, 0));
    assert!(row.constant_used.is_none());
    assert!(row.l2.is_finite() && row.linf >= row.l2);
    assert_eq!(out.summary[0].l2_std, 0.0);
}

#[test]
fn row_count_is_methods_times_sizes_times_dims_times_trials() {
    let c = config(
        r#"{"sizes": [30, 40], "dims": [1, 3], "methods": ["bs", "ho", "dp"], "trials": 2, "test_size": 50,
            "tune": {"constants": {"kind": "grid", "grid": [2.0, 1.0, 0.5]}}}"#,
    );
    let out = run_experiment(&c).unwrap();
    assert_eq!(out.rows.len(), 3 * 2 * 2 * 2);
    assert_eq!(out.summary.len(), 3 * 2 * 2);
    let keys: Vec<_> = out.rows.iter().map(|r| (r.d, r.n)).collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    for r in &out.rows {
        assert_eq!(r.seed, r.trial as u64);
        assert!(r.l2.is_finite() && r.linf.is_finite() && r.wall_time_s >= 0.0 && r.peak_mem_mb.is_finite());
    }
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let json = |w: usize| {
        format!(r#"{{"sizes": [60], "methods": ["ho", "hss", "aic"], "trials": 3, "test_size": 80, "seed": 5, "workers": {w}}}"#)
    };
    let a = run_experiment(&config(&json(1))).unwrap();
    let b = run_experiment(&config(&json(3))).unwrap();
    assert_eq!(a.rows.len(), b.rows.len());
    for (x, y) in a.rows.iter().zip(&b.rows) {
        assert_eq!((x.method, x.trial, x.t_selected, x.constant_used), (y.method, y.trial, y.t_selected, y.constant_used));
        assert_eq!((x.l2, x.linf), (y.l2, y.linf));
    }
}

#[test]
fn results_csv_round_trips() {
    let c = config(r#"{"sizes": [40], "methods": ["bs", "hss"], "trials": 2, "test_size": 60}"#);
    let out = run_experiment(&c).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_outputs(dir.path(), &out).unwrap();
    let text = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), RESULTS_HEADER);
    assert_eq!(read_results(&dir.path().join("results.csv")).unwrap(), out.rows);
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
}

#[test]
fn sweep_extremes_hit_the_horizon() {
    let c = config(r#"{"experiment": "sim1_constant_sweep", "sizes": [80], "trials": 1, "test_size": 50, "sweep_constants": [0.0, 1e12]}"#);
    let rows = sweep_constant(&c).unwrap();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert_eq!(r.t_selected, r.horizon, "constant {}", r.constant);
    }
    let single = config(r#"{"experiment": "sim1_constant_sweep", "sizes": [80], "trials": 1, "test_size": 50, "sweep_constants": [1.0]}"#);
    assert_eq!(sweep_constant(&single).unwrap().len(), 1);
}

#[test]
fn sim1_and_sim3_write_their_curve_files() {
    let dir = tempfile::tempdir().unwrap();
    let sim1 = config(r#"{"experiment": "sim1_constant_sweep", "sizes": [60], "trials": 2, "test_size": 40, "sweep_constants": [0.5, 1.0]}"#);
    let written = write_outputs(dir.path(), &run_experiment(&sim1).unwrap()).unwrap();
    let names: Vec<String> = written.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert!(names.contains(&"curves_sweep.csv".to_string()));
    assert!(names.contains(&"curves_bias_variance_d1_n60.csv".to_string()));
    let sweep = std::fs::read_to_string(dir.path().join("curves_sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 2 * 2);

    let sim3 = config(r#"{"experiment": "sim3_covariate_shift", "sizes": [60], "trials": 1, "test_size": 200, "shifts": [1.0, 1.5]}"#);
    let out = run_experiment(&sim3).unwrap();
    assert_eq!(out.shift.len(), 2 * 2);
    let unshifted: Vec<_> = out.shift.iter().filter(|s| s.b == 1.0).collect();
    assert!(unshifted.iter().all(|s| s.l2_change_pct == 0.0 && s.kl < 0.1));
    assert!(out.shift.iter().filter(|s| s.b == 1.5).all(|s| s.kl > 0.2));
}

#[test]
fn realdata_runs_on_fixture_files() {
    let json = format!(
        r#"{{"experiment": "realdata", "trials": 2, "methods": ["bs", "ho", "hss"],
            "realdata": {{"train_csv": {:?}, "test_csv": {:?}, "column": "total_intensity",
                          "noise_std": 200.0, "step_size": 3.0}}}}"#,
        fixture("geo_train.csv"),
        fixture("geo_test.csv")
    );
    let out = run_experiment(&config(&json)).unwrap();
    assert_eq!(out.rows.len(), 6);
    assert!(out.rows.iter().all(|r| r.d == 3 && r.n == 60 && r.l2.is_finite()));
}

#[test]
fn invalid_configs_list_the_offending_fields() {
    let c = config(r#"{"trials": 0, "sizes": [2], "workers": 0}"#);
    match run_experiment(&c) {
        Err(RunnerError::Config(p)) => {
            for field in ["trials", "sizes", "workers"] {
                assert!(p.iter().any(|m| m.starts_with(field)), "{field} missing from {p:?}");
            }
        }
        other => panic!("unexpected {other:?}"),
    }
}

fn kgd(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_kgd")).args(args).output().unwrap()
}

#[test]
fn cli_exit_codes_and_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"sizes": [40], "methods": ["bs"], "trials": 1, "test_size": 30}"#).unwrap();
    let out_dir = dir.path().join("out");
    let ok = kgd(&["sim2", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--seed", "3", "--workers", "1"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let rows = read_results(&out_dir.join("results.csv")).unwrap();
    assert_eq!((rows.len(), rows[0].seed), (1, 3));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"trials": 0}"#).unwrap();
    let fail = kgd(&["sim2", "--config", bad.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(fail.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&fail.stderr).contains("trials"));

    let mismatch = dir.path().join("m.json");
    std::fs::write(&mismatch, r#"{"experiment": "sim3_covariate_shift"}"#).unwrap();
    assert_eq!(kgd(&["sim1", "--config", mismatch.to_str().unwrap()]).status.code(), Some(2));

    let spectral = kgd(&["dump-spectral", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(spectral.status.code(), Some(0));
    let table = std::fs::read_to_string(out_dir.join("spectral_d1_n40.csv")).unwrap();
    assert_eq!(table.lines().next().unwrap(), "t,N_D,W,U");
    assert!(out_dir.join("trace_d1_n40.csv").exists());
}
