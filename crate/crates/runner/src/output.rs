//! CSV files written by the CLI.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use kgd_core::kernel::KernelSpec;
use kgd_core::metrics::write_curves_csv;
use kgd_core::selectors::FitContext;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::RunnerError;
use crate::experiment::{ExperimentOutput, ResultRow};

pub const RESULTS_HEADER: &str = "method,d,n,trial,seed,t_selected,constant_used,l2,linf,wall_time_s,peak_mem_mb";

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, RunnerError> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

/// Writes `rows` with a header even when there are no rows.
fn write_rows<T: Serialize>(dir: &Path, name: &str, header: &[&str], rows: &[T]) -> Result<PathBuf, RunnerError> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(create(dir, name)?);
    wtr.write_record(header)?;
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(dir.join(name))
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>, RunnerError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != RESULTS_HEADER {
        return Err(RunnerError::Config(vec![format!(
            "{}: unexpected header `{}`",
            path.display(),
            header.join(",")
        )]));
    }
    rdr.deserialize().map(|r| r.map_err(RunnerError::from)).collect()
}

/// Writes `results.csv`, `summary.csv` and whichever curve files the experiment
/// produced. Returns the paths written.
pub fn write_outputs(dir: &Path, out: &ExperimentOutput) -> Result<Vec<PathBuf>, RunnerError> {
    std::fs::create_dir_all(dir)?;
    let results_header: Vec<&str> = RESULTS_HEADER.split(',').collect();
    let mut written = vec![
        write_rows(dir, "results.csv", &results_header, &out.rows)?,
        write_rows(
            dir,
            "summary.csv",
            &[
                "method", "d", "n", "trials", "t_mean", "t_std", "l2_mean", "l2_std", "linf_mean", "linf_std",
                "wall_time_s_mean", "peak_mem_mb_max",
            ],
            &out.summary,
        )?,
    ];
    if !out.sweep.is_empty() {
        written.push(write_rows(
            dir,
            "curves_sweep.csv",
            &["d", "n", "trial", "seed", "constant", "t_selected", "hit_horizon", "horizon", "l2", "linf"],
            &out.sweep,
        )?);
    }
    if !out.shift.is_empty() {
        written.push(write_rows(
            dir,
            "curves_shift.csv",
            &["method", "trial", "seed", "b", "kl", "l2", "linf", "l2_change_pct", "linf_change_pct"],
            &out.shift,
        )?);
    }
    for c in &out.curves {
        let name = format!("curves_bias_variance_d{}_n{}.csv", c.d, c.n);
        write_curves_csv(&c.points, create(dir, &name)?)?;
        written.push(dir.join(name));
    }
    Ok(written)
}

/// Spectral tables and gradient-descent trace of the first trial of every
/// (d, n) pair: `spectral_d{d}_n{n}.csv` and `trace_d{d}_n{n}.csv`.
pub fn dump_spectral(dir: &Path, config: &ExperimentConfig) -> Result<Vec<PathBuf>, RunnerError> {
    config.validate()?;
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for &d in &config.dims {
        for &n in &config.sizes {
            let target = kgd_core::datagen::Target::for_dimension(d)?;
            let data = kgd_core::datagen::gen_dataset(target, n, config.noise_std, config.seed)?;
            let spec = KernelSpec::default_for_dimension(d)?;
            let beta = config.step_size(d).unwrap_or(1.0);
            let kgd = kgd_core::kgd::KgdConfig::new(beta, config.max_iterations.unwrap_or(n));
            let ctx = FitContext::new(&data, &spec, &kgd, config.hss.delta)?;
            let horizon = ctx.tables().sudden_stop();
            log::info!("d={d} n={n}: sudden-stop horizon {} (defaulted: {})", horizon.t, horizon.defaulted);
            let spectral = format!("spectral_d{d}_n{n}.csv");
            ctx.tables().write_csv(create(dir, &spectral)?)?;
            let trace = format!("trace_d{d}_n{n}.csv");
            ctx.trace().write_csv(create(dir, &trace)?)?;
            written.push(dir.join(spectral));
            written.push(dir.join(trace));
        }
    }
    Ok(written)
}
