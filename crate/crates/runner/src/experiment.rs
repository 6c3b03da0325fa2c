//! Experiment driver: one cell per (d, n, trial), run on a rayon pool, with all
//! rows sorted by key before they are returned.

use std::collections::BTreeMap;
use std::time::Instant;

use kgd_core::datagen::{
    add_truncated_gaussian_noise, gen_dataset, gen_shifted_testset, gen_testset, kl_divergence,
    load_geomagnetic_csv, load_geomagnetic_csv_normalized, Dataset, ShiftConfig, Target,
};
use kgd_core::kernel::{cross_kernel, KernelSpec};
use kgd_core::kgd::KgdConfig;
use kgd_core::metrics::{bias_variance_curves, test_errors, BiasVariancePoint, ErrorReport};
use kgd_core::selectors::{
    baseline_select, bsp_select, hss_select, holdout_select, tuned_select, FitContext, Rule, RuleKind,
    Selection,
};
use kgd_core::KgdError;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::error::RunnerError;
use crate::memory;

/// One (method, trial) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: Rule,
    pub d: usize,
    pub n: usize,
    pub trial: usize,
    pub seed: u64,
    pub t_selected: usize,
    /// Empty for rules without a constant.
    pub constant_used: Option<f64>,
    pub l2: f64,
    pub linf: f64,
    pub wall_time_s: f64,
    /// Process-wide peak RSS after the cell; approximate when workers > 1.
    pub peak_mem_mb: f64,
}

/// Mean and sample standard deviation over trials of one (method, d, n) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Rule,
    pub d: usize,
    pub n: usize,
    pub trials: usize,
    pub t_mean: f64,
    pub t_std: f64,
    pub l2_mean: f64,
    pub l2_std: f64,
    pub linf_mean: f64,
    pub linf_std: f64,
    pub wall_time_s_mean: f64,
    pub peak_mem_mb_max: f64,
}

/// Backward-rule selection and test errors for one constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub d: usize,
    pub n: usize,
    pub trial: usize,
    pub seed: u64,
    pub constant: f64,
    pub t_selected: usize,
    pub hit_horizon: bool,
    pub horizon: usize,
    pub l2: f64,
    pub linf: f64,
}

/// Test errors of one fitted model on a shifted test domain `[0, b]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftRow {
    pub method: Rule,
    pub trial: usize,
    pub seed: u64,
    pub b: f64,
    pub kl: f64,
    pub l2: f64,
    pub linf: f64,
    /// Relative change against the unshifted test set, in percent.
    pub l2_change_pct: f64,
    pub linf_change_pct: f64,
}

/// Bias/variance curves of the first trial of a (d, n) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSet {
    pub d: usize,
    pub n: usize,
    pub points: Vec<BiasVariancePoint>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentOutput {
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
    pub sweep: Vec<SweepRow>,
    pub shift: Vec<ShiftRow>,
    pub curves: Vec<CurveSet>,
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    d: usize,
    n: usize,
    trial: usize,
    seed: u64,
}

#[derive(Default)]
struct CellOutput {
    rows: Vec<ResultRow>,
    sweep: Vec<SweepRow>,
    shift: Vec<ShiftRow>,
    curves: Option<CurveSet>,
}

fn synthetic_cells(config: &ExperimentConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &d in &config.dims {
        for &n in &config.sizes {
            for trial in 0..config.trials {
                cells.push(Cell {
                    d,
                    n,
                    trial,
                    seed: config.seed + trial as u64,
                });
            }
        }
    }
    cells
}

fn kgd_config(config: &ExperimentConfig, d: usize, n: usize) -> Result<KgdConfig, RunnerError> {
    let beta = config
        .step_size(d)
        .ok_or_else(|| RunnerError::Config(vec![format!("step_sizes: no step size for dimension {d}")]))?;
    Ok(KgdConfig::new(beta, config.max_iterations.unwrap_or(n)))
}

fn pool(workers: Option<usize>) -> Result<rayon::ThreadPool, RunnerError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        builder = builder.num_threads(w);
    }
    builder
        .build()
        .map_err(|e| RunnerError::Config(vec![format!("workers: cannot start thread pool: {e}")]))
}

fn truth(test: &Dataset) -> &nalgebra::DVector<f64> {
    test.clean_targets.as_ref().unwrap_or(&test.outputs)
}

/// Fits one method on `data` and returns the selection.
pub fn fit_method(
    method: Rule,
    data: &Dataset,
    spec: &KernelSpec,
    kgd: &KgdConfig,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<Selection, RunnerError> {
    let selection = match method {
        Rule::Bs => {
            let ctx = FitContext::new(data, spec, kgd, config.hss.delta)?;
            let result = baseline_select(ctx.trace(), data.clean_targets.as_ref())?;
            Selection {
                model: ctx.model(result.t_selected)?,
                result,
            }
        }
        Rule::Ho => holdout_select(data, spec, kgd, config.holdout_ratio, seed)?,
        Rule::Hss => {
            let mut hss = config.hss.clone();
            if let Some(f) = config.subsample_fraction {
                hss.subsample_size = Some(((f * data.n() as f64).round() as usize).clamp(2, data.n()));
            }
            hss_select(data, spec, kgd, &hss, seed)?
        }
        Rule::Bsp => {
            let ctx = FitContext::new(data, spec, kgd, config.hss.delta)?;
            let horizon = ctx.horizon(config.hss.final_horizon);
            let result = bsp_select(ctx.trace(), ctx.tables(), config.bsp_constant, horizon)?;
            Selection {
                model: ctx.model(result.t_selected)?,
                result,
            }
        }
        other => {
            let kind = RuleKind::from_rule(other).expect("remaining rules are tunable");
            tuned_select(data, spec, kgd, kind, &config.tune, seed)?
        }
    };
    Ok(selection)
}

fn evaluate(selection: &Selection, test: &Dataset) -> Result<ErrorReport, RunnerError> {
    let pred = selection.model.predict(&test.inputs)?;
    Ok(test_errors(&pred, truth(test))?)
}

fn check_finite(row: &ResultRow) -> Result<(), RunnerError> {
    if row.l2.is_finite() && row.linf.is_finite() {
        Ok(())
    } else {
        Err(KgdError::Numeric(format!(
            "{} produced non-finite test errors (d={}, n={}, trial={})",
            row.method, row.d, row.n, row.trial
        ))
        .into())
    }
}

/// Fits every configured method on one training set. `extra` sees each fitted
/// selection, for per-model follow-up work such as shifted test sets.
fn method_rows(
    config: &ExperimentConfig,
    cell: Cell,
    data: &Dataset,
    test: &Dataset,
    spec: &KernelSpec,
    kgd: &KgdConfig,
    mut extra: impl FnMut(Rule, &Selection, &ErrorReport) -> Result<(), RunnerError>,
) -> Result<Vec<ResultRow>, RunnerError> {
    let mut rows = Vec::new();
    for method in config.methods() {
        memory::reset_peak();
        let start = Instant::now();
        let selection = fit_method(method, data, spec, kgd, config, cell.seed)?;
        let report = evaluate(&selection, test)?;
        let wall_time_s = start.elapsed().as_secs_f64();
        let row = ResultRow {
            method,
            d: cell.d,
            n: cell.n,
            trial: cell.trial,
            seed: cell.seed,
            t_selected: selection.result.t_selected,
            constant_used: selection.result.constant_used,
            l2: report.l2,
            linf: report.linf,
            wall_time_s,
            peak_mem_mb: memory::peak_mb(),
        };
        check_finite(&row)?;
        log::debug!("{method} d={} n={} trial={}: t={} l2={:.4}", cell.d, cell.n, cell.trial, row.t_selected, row.l2);
        extra(method, &selection, &report)?;
        rows.push(row);
    }
    Ok(rows)
}

fn synthetic_data(config: &ExperimentConfig, cell: Cell) -> Result<(Target, Dataset, Dataset), RunnerError> {
    let target = Target::for_dimension(cell.d)?;
    let data = gen_dataset(target, cell.n, config.noise_std, cell.seed)?;
    let test = gen_testset(target, config.test_size, cell.seed)?;
    Ok((target, data, test))
}

fn sweep_cell(config: &ExperimentConfig, cell: Cell, data: &Dataset, test: &Dataset) -> Result<Vec<SweepRow>, RunnerError> {
    let spec = KernelSpec::default_for_dimension(cell.d)?;
    let kgd = kgd_config(config, cell.d, cell.n)?;
    let ctx = FitContext::new(data, &spec, &kgd, config.hss.delta)?;
    let horizon = ctx.horizon(config.hss.final_horizon);
    let cross = cross_kernel(&spec, &test.inputs, &data.inputs)?;
    let path = ctx.trace().predict_path(&cross)?;
    let mut by_t: BTreeMap<usize, ErrorReport> = BTreeMap::new();
    let mut rows = Vec::with_capacity(config.sweep_constants.len());
    for &c in &config.sweep_constants {
        let sel = bsp_select(ctx.trace(), ctx.tables(), c, horizon)?;
        let t = sel.t_selected;
        let report = match by_t.get(&t) {
            Some(r) => *r,
            None => {
                let r = test_errors(&path.column(t).into_owned(), truth(test))?;
                by_t.insert(t, r);
                r
            }
        };
        rows.push(SweepRow {
            d: cell.d,
            n: cell.n,
            trial: cell.trial,
            seed: cell.seed,
            constant: c,
            t_selected: t,
            hit_horizon: sel.hit_horizon,
            horizon,
            l2: report.l2,
            linf: report.linf,
        });
    }
    Ok(rows)
}

/// Backward-rule selection over `config.sweep_constants` on every synthetic
/// (d, n, trial) cell.
pub fn sweep_constant(config: &ExperimentConfig) -> Result<Vec<SweepRow>, RunnerError> {
    config.validate()?;
    let cells = synthetic_cells(config);
    let chunks = pool(config.workers)?.install(|| {
        cells
            .par_iter()
            .map(|&cell| {
                let (_, data, test) = synthetic_data(config, cell)?;
                sweep_cell(config, cell, &data, &test)
            })
            .collect::<Result<Vec<_>, RunnerError>>()
    })?;
    let mut rows: Vec<SweepRow> = chunks.into_iter().flatten().collect();
    sort_sweep(&mut rows);
    Ok(rows)
}

fn sort_sweep(rows: &mut [SweepRow]) {
    rows.sort_by(|a, b| (a.d, a.n, a.trial).cmp(&(b.d, b.n, b.trial)).then(a.constant.total_cmp(&b.constant)));
}

fn pct_change(new: f64, base: f64) -> f64 {
    if base > 0.0 {
        100.0 * (new - base) / base
    } else {
        0.0
    }
}

fn run_synthetic_cell(config: &ExperimentConfig, cell: Cell) -> Result<CellOutput, RunnerError> {
    let kind = config.kind();
    let (target, data, test) = synthetic_data(config, cell)?;
    let spec = KernelSpec::default_for_dimension(cell.d)?;
    let kgd = kgd_config(config, cell.d, cell.n)?;
    let mut out = CellOutput::default();

    if kind == ExperimentKind::Sim1ConstantSweep {
        out.sweep = sweep_cell(config, cell, &data, &test)?;
        if cell.trial == 0 {
            out.curves = Some(CurveSet {
                d: cell.d,
                n: cell.n,
                points: bias_variance_curves(&data, &spec, &kgd, &test)?,
            });
        }
    }

    let shifted: Vec<(f64, Dataset, f64)> = if kind == ExperimentKind::Sim3CovariateShift {
        let train_x: Vec<f64> = data.inputs.column(0).iter().copied().collect();
        config
            .shifts
            .iter()
            .map(|&b| {
                let shift = ShiftConfig::new(b)?;
                let t = gen_shifted_testset(target, config.test_size, &shift, cell.seed)?;
                let test_x: Vec<f64> = t.inputs.column(0).iter().copied().collect();
                let kl = kl_divergence(&train_x, &test_x, &shift)?;
                Ok((b, t, kl))
            })
            .collect::<Result<_, KgdError>>()?
    } else {
        Vec::new()
    };

    let mut shift_rows = Vec::new();
    out.rows = method_rows(config, cell, &data, &test, &spec, &kgd, |method, sel, base| {
        for (b, t, kl) in &shifted {
            let r = evaluate(sel, t)?;
            shift_rows.push(ShiftRow {
                method,
                trial: cell.trial,
                seed: cell.seed,
                b: *b,
                kl: *kl,
                l2: r.l2,
                linf: r.linf,
                l2_change_pct: pct_change(r.l2, base.l2),
                linf_change_pct: pct_change(r.linf, base.linf),
            });
        }
        Ok(())
    })?;
    out.shift = shift_rows;
    Ok(out)
}

fn run_realdata(config: &ExperimentConfig) -> Result<Vec<CellOutput>, RunnerError> {
    let real = config.realdata.as_ref().expect("validated");
    let clean = load_geomagnetic_csv(&real.train_csv, real.column)?;
    let norm = clean.normalization.clone().expect("loader records the normalization");
    let test = load_geomagnetic_csv_normalized(&real.test_csv, real.column, &norm)?;
    let d = clean.d();
    let n = clean.n();
    let spec = KernelSpec::default_for_dimension(d)?;
    let kgd = kgd_config(config, d, n)?;
    let cells: Vec<Cell> = (0..config.trials)
        .map(|trial| Cell {
            d,
            n,
            trial,
            seed: config.seed + trial as u64,
        })
        .collect();
    pool(config.workers)?.install(|| {
        cells
            .par_iter()
            .map(|&cell| {
                let data = add_truncated_gaussian_noise(&clean, real.noise_std, real.truncation, cell.seed)?;
                let rows = method_rows(config, cell, &data, &test, &spec, &kgd, |_, _, _| Ok(()))?;
                Ok(CellOutput {
                    rows,
                    ..CellOutput::default()
                })
            })
            .collect()
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Per (method, d, n) means and sample standard deviations, in row order.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    type Key = (usize, usize, Rule);
    let mut groups: Vec<(Key, Vec<&ResultRow>)> = Vec::new();
    for row in rows {
        let key = (row.d, row.n, row.method);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, g)) => g.push(row),
            None => groups.push((key, vec![row])),
        }
    }
    groups
        .into_iter()
        .map(|((d, n, method), g)| {
            let col = |f: fn(&ResultRow) -> f64| g.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let (t_mean, t_std) = mean_std(&col(|r| r.t_selected as f64));
            let (l2_mean, l2_std) = mean_std(&col(|r| r.l2));
            let (linf_mean, linf_std) = mean_std(&col(|r| r.linf));
            let (wall_time_s_mean, _) = mean_std(&col(|r| r.wall_time_s));
            SummaryRow {
                method,
                d,
                n,
                trials: g.len(),
                t_mean,
                t_std,
                l2_mean,
                l2_std,
                linf_mean,
                linf_std,
                wall_time_s_mean,
                peak_mem_mb_max: g.iter().map(|r| r.peak_mem_mb).fold(0.0, f64::max),
            }
        })
        .collect()
}

/// Runs the experiment named by `config.experiment`. Rows are sorted by
/// (d, n, method, trial) so the output does not depend on scheduling.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput, RunnerError> {
    config.validate()?;
    let outputs = if config.kind() == ExperimentKind::Realdata {
        run_realdata(config)?
    } else {
        let cells = synthetic_cells(config);
        pool(config.workers)?.install(|| {
            cells
                .par_iter()
                .map(|&cell| run_synthetic_cell(config, cell))
                .collect::<Result<Vec<_>, RunnerError>>()
        })?
    };

    let mut out = ExperimentOutput::default();
    for o in outputs {
        out.rows.extend(o.rows);
        out.sweep.extend(o.sweep);
        out.shift.extend(o.shift);
        out.curves.extend(o.curves);
    }
    let order: Vec<Rule> = config.methods();
    let rank = |m: Rule| order.iter().position(|&x| x == m).unwrap_or(usize::MAX);
    out.rows
        .sort_by_key(|r| (r.d, r.n, rank(r.method), r.trial));
    out.shift
        .sort_by(|a, b| (rank(a.method), a.trial).cmp(&(rank(b.method), b.trial)).then(a.b.total_cmp(&b.b)));
    sort_sweep(&mut out.sweep);
    out.curves.sort_by_key(|c| (c.d, c.n));
    out.summary = summarize(&out.rows);
    Ok(out)
}
