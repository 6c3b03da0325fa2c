use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{Rule, SelectionResult};
use crate::error::{invalid, KgdError, Result};
use crate::kernel::KernelMatrix;
use crate::kgd::{weighted_rkhs_norm, KgdTrace};
use crate::spectral::{local_rademacher, SpectralTables, Spectrum};

/// Rules whose stopping time depends on a tunable constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    Bsp,
    Bp,
    Lp,
    Esr,
    Dp,
    Aic,
    Bic,
}

impl RuleKind {
    pub fn rule(self) -> Rule {
        match self {
            RuleKind::Bsp => Rule::Bsp,
            RuleKind::Bp => Rule::Bp,
            RuleKind::Lp => Rule::Lp,
            RuleKind::Esr => Rule::Esr,
            RuleKind::Dp => Rule::Dp,
            RuleKind::Aic => Rule::Aic,
            RuleKind::Bic => Rule::Bic,
        }
    }

    pub fn from_rule(rule: Rule) -> Option<Self> {
        Some(match rule {
            Rule::Bsp | Rule::Hss => RuleKind::Bsp,
            Rule::Bp => RuleKind::Bp,
            Rule::Lp => RuleKind::Lp,
            Rule::Esr => RuleKind::Esr,
            Rule::Dp => RuleKind::Dp,
            Rule::Aic => RuleKind::Aic,
            Rule::Bic => RuleKind::Bic,
            Rule::Bs | Rule::Ho => return None,
        })
    }
}

/// Index of the smallest value; ties resolve to the smallest index and NaN never wins.
pub fn argmin_smallest(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        match best {
            Some(b) if values[b] <= v => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Reference lower bound `32 sqrt(2) (1 + beta) (kappa M + gamma)` on the backward
/// selection constant. `M` and `gamma` describe the noise tail and are rarely known.
pub fn theoretical_bsp_constant(beta: f64, kappa: f64, noise_m: f64, noise_gamma: f64) -> f64 {
    32.0 * std::f64::consts::SQRT_2 * (1.0 + beta) * (kappa * noise_m + noise_gamma)
}

pub(crate) fn bsp_lhs(trace: &KgdTrace, t: usize) -> f64 {
    let tf = t as f64;
    tf * trace.inc_empirical()[t] + tf.sqrt() * trace.inc_rkhs()[t]
}

fn check_horizon(trace: &KgdTrace, tables: &SpectralTables, horizon: usize) -> Result<()> {
    if horizon < 1 {
        return Err(invalid("selection horizon must be at least 1"));
    }
    if horizon > trace.t_max() || horizon > tables.t_max() {
        return Err(invalid(format!(
            "horizon {horizon} exceeds the recorded range (trace t_max {}, tables t_max {})",
            trace.t_max(),
            tables.t_max()
        )));
    }
    Ok(())
}

fn bsp_core(
    trace: &KgdTrace,
    tables: &SpectralTables,
    constant: f64,
    factor: f64,
    horizon: usize,
) -> Result<SelectionResult> {
    check_horizon(trace, tables, horizon)?;
    if !(constant >= 0.0) {
        return Err(invalid(format!("constant must be non-negative, got {constant}")));
    }
    for t in (1..=horizon).rev() {
        let lhs = bsp_lhs(trace, t);
        let rhs = constant * tables.w(t) * factor;
        if lhs >= rhs {
            return Ok(SelectionResult::new(Rule::Bsp, t, Some(constant), false)
                .with("lhs", lhs)
                .with("rhs", rhs)
                .with("horizon", horizon as f64));
        }
    }
    Ok(SelectionResult::new(Rule::Bsp, horizon, Some(constant), true).with("horizon", horizon as f64))
}

/// Largest `t` in `[1, horizon]` with
/// `t ||f_{t+1} - f_t||_D + sqrt(t) ||f_{t+1} - f_t||_K >= constant * W_{D,t}`,
/// or `horizon` when no index qualifies.
pub fn bsp_select(
    trace: &KgdTrace,
    tables: &SpectralTables,
    constant: f64,
    horizon: usize,
) -> Result<SelectionResult> {
    bsp_core(trace, tables, constant, 1.0, horizon)
}

/// [`bsp_select`] with the threshold scaled by `log^2(16 / delta)`.
pub fn bsp_select_strict(
    trace: &KgdTrace,
    tables: &SpectralTables,
    constant: f64,
    horizon: usize,
) -> Result<SelectionResult> {
    let factor = (16.0 / tables.delta()).ln().powi(2);
    bsp_core(trace, tables, constant, factor, horizon).map(|r| r.with("log_factor", factor))
}

fn fitted_distance(trace: &KgdTrace, a: usize, b: usize) -> Result<f64> {
    let f = trace.fitted_matrix().ok_or_else(|| {
        KgdError::Unsupported("balancing principle needs a trace with retained coefficients".into())
    })?;
    let n = f.nrows() as f64;
    Ok((f.column(b) - f.column(a)).norm() / n.sqrt())
}

fn bp_range(trace: &KgdTrace, tables: &SpectralTables, range_end: Option<usize>) -> Result<usize> {
    let end = range_end.unwrap_or(trace.t_max());
    if end > trace.t_max() || end > tables.t_max() {
        return Err(invalid(format!(
            "balancing range end {end} exceeds the recorded range (trace t_max {}, tables t_max {})",
            trace.t_max(),
            tables.t_max()
        )));
    }
    Ok(end)
}

fn bp_factor(tables: &SpectralTables) -> f64 {
    (16.0 / tables.delta()).ln().powi(4)
}

/// Smallest `t` in `[0, end]` such that
/// `||f_{t'} - f_t||_D <= constant * W_{D,t'} * log^4(16 / delta)` for every
/// `t' = t + 1..=end`. `end` defaults to the trace length.
pub fn bp_select(
    trace: &KgdTrace,
    tables: &SpectralTables,
    constant: f64,
    range_end: Option<usize>,
) -> Result<SelectionResult> {
    let end = bp_range(trace, tables, range_end)?;
    let factor = bp_factor(tables);
    'candidates: for t in 0..=end {
        for tp in (t + 1)..=end {
            if fitted_distance(trace, t, tp)? > constant * tables.w(tp) * factor {
                continue 'candidates;
            }
        }
        return Ok(SelectionResult::new(Rule::Bp, t, Some(constant), t == end)
            .with("log_factor", factor));
    }
    unreachable!("the last index passes vacuously")
}

/// Per-candidate worst ratio `max_{t'} ||f_{t'} - f_t||_D / (W_{D,t'} log^4(16/delta))`,
/// so that the balancing choice for any constant is the first index whose ratio
/// does not exceed it.
#[derive(Debug, Clone)]
pub struct BalancingProfile {
    ratio: Vec<f64>,
}

impl BalancingProfile {
    pub fn new(trace: &KgdTrace, tables: &SpectralTables, range_end: Option<usize>) -> Result<Self> {
        let end = bp_range(trace, tables, range_end)?;
        let f = trace.fitted_matrix().ok_or_else(|| {
            KgdError::Unsupported("balancing principle needs a trace with retained coefficients".into())
        })?;
        let factor = bp_factor(tables);
        let scale = 1.0 / (f.nrows() as f64).sqrt();
        let mut ratio = vec![0.0; end + 1];
        for (t, slot) in ratio.iter_mut().enumerate() {
            let base = f.column(t);
            let mut worst = 0.0f64;
            for tp in (t + 1)..=end {
                let d = (f.column(tp) - base).norm() * scale;
                worst = worst.max(d / (tables.w(tp) * factor));
            }
            *slot = worst;
        }
        Ok(BalancingProfile { ratio })
    }

    pub fn select(&self, constant: f64) -> usize {
        self.ratio
            .iter()
            .position(|&r| r <= constant)
            .unwrap_or(self.ratio.len() - 1)
    }

    pub fn end(&self) -> usize {
        self.ratio.len() - 1
    }
}

/// Candidate times of the Lepskii comparison: `ceil(q^i / kappa^2)` for `i >= 0`,
/// deduplicated, at most `t_max`, and kept only when
/// `t <= max{n / (100 kappa^2 L^2), n / (3 kappa^2 (N_D(1/t) + 1))}` with
/// `L = 2 log(8 log n / (delta log q))`.
pub fn lepskii_grid(tables: &SpectralTables, q: f64, t_max: usize) -> Result<Vec<usize>> {
    if !(q > 1.0 && q.is_finite()) {
        return Err(invalid(format!("Lepskii ratio q must exceed 1, got {q}")));
    }
    let kappa2 = tables.kappa() * tables.kappa();
    let n = tables.n() as f64;
    let delta = tables.delta();
    let t_cap = t_max.min(tables.t_max());
    let l = 2.0 * (8.0 * n.ln() / (delta * q.ln())).ln();
    let first_cap = if l.is_finite() && l != 0.0 {
        n / (100.0 * kappa2 * l * l)
    } else {
        0.0
    };
    let mut grid: Vec<usize> = Vec::new();
    let mut i = 0i32;
    loop {
        let raw = q.powi(i) / kappa2;
        let t = raw.ceil().max(1.0);
        if t > t_cap as f64 {
            break;
        }
        let t = t as usize;
        if grid.last() != Some(&t) {
            let second_cap = n / (3.0 * kappa2 * (tables.effective_dimension(t) + 1.0));
            if (t as f64) <= first_cap.max(second_cap) {
                grid.push(t);
            }
        }
        i += 1;
        if i > 10_000 {
            break;
        }
    }
    if grid.is_empty() {
        return Err(KgdError::Config(format!(
            "Lepskii grid is empty: no candidate time satisfies t <= max(n/(100 kappa^2 L^2) = {first_cap:.4}, n/(3 kappa^2 (N_D(1/t)+1))) within t_max = {t_cap}"
        )));
    }
    Ok(grid)
}

fn lepskii_proxy(tables: &SpectralTables, t: usize) -> f64 {
    (t as f64).sqrt() * (tables.effective_dimension(t) + 1.0) / (tables.n() as f64).sqrt()
}

fn lepskii_statistic(trace: &KgdTrace, matrix: &KernelMatrix, t: usize, tp: usize) -> Result<f64> {
    let coeffs = trace.coefficient_matrix().ok_or_else(|| {
        KgdError::Unsupported("Lepskii principle needs a trace with retained coefficients".into())
    })?;
    let dc: DVector<f64> = coeffs.column(tp) - coeffs.column(t);
    weighted_rkhs_norm(matrix, &dc, 1.0 / tp as f64)
}

/// Smallest grid time `t` with
/// `||(L_{K,D} + 1/t')^{1/2} (f_{t'} - f_t)||_K <= constant * W*_{D,t'}` for every
/// larger grid time `t'`, where `W*_{D,t} = sqrt(t) (N_D(1/t) + 1) / sqrt(n)`.
pub fn lp_select(
    trace: &KgdTrace,
    tables: &SpectralTables,
    matrix: &KernelMatrix,
    constant: f64,
    q: f64,
) -> Result<SelectionResult> {
    let grid = lepskii_grid(tables, q, trace.t_max())?;
    'candidates: for (i, &t) in grid.iter().enumerate() {
        for &tp in &grid[i + 1..] {
            if lepskii_statistic(trace, matrix, t, tp)? > constant * lepskii_proxy(tables, tp) {
                continue 'candidates;
            }
        }
        return Ok(SelectionResult::new(Rule::Lp, t, Some(constant), i + 1 == grid.len())
            .with("grid_size", grid.len() as f64));
    }
    unreachable!("the last grid time passes vacuously")
}

/// Lepskii analogue of [`BalancingProfile`].
#[derive(Debug, Clone)]
pub struct LepskiiProfile {
    grid: Vec<usize>,
    ratio: Vec<f64>,
}

impl LepskiiProfile {
    pub fn new(trace: &KgdTrace, tables: &SpectralTables, matrix: &KernelMatrix, q: f64) -> Result<Self> {
        let grid = lepskii_grid(tables, q, trace.t_max())?;
        let mut ratio = vec![0.0; grid.len()];
        for (i, &t) in grid.iter().enumerate() {
            let mut worst = 0.0f64;
            for &tp in &grid[i + 1..] {
                worst = worst.max(lepskii_statistic(trace, matrix, t, tp)? / lepskii_proxy(tables, tp));
            }
            ratio[i] = worst;
        }
        Ok(LepskiiProfile { grid, ratio })
    }

    pub fn select(&self, constant: f64) -> usize {
        let i = self
            .ratio
            .iter()
            .position(|&r| r <= constant)
            .unwrap_or(self.grid.len() - 1);
        self.grid[i]
    }

    pub fn grid(&self) -> &[usize] {
        &self.grid
    }
}

/// First `t` in `[1, t_max]` with `R_K(1 / sqrt(t beta)) > constant / (tau t beta)`,
/// where `R_K` is the local empirical Rademacher complexity; `t_max` when none.
pub fn esr_select(
    spectrum: &Spectrum,
    n: usize,
    beta: f64,
    noise_std: f64,
    constant: f64,
    t_max: usize,
) -> Result<SelectionResult> {
    if !(noise_std > 0.0) {
        return Err(invalid(format!("noise level must be positive, got {noise_std}")));
    }
    if !(beta > 0.0) {
        return Err(invalid(format!("step size must be positive, got {beta}")));
    }
    if t_max < 1 {
        return Err(invalid("early stopping needs t_max >= 1"));
    }
    for t in 1..=t_max {
        let eta = t as f64 * beta;
        let complexity = local_rademacher(spectrum, n, 1.0 / eta.sqrt())?;
        if complexity > constant / (noise_std * eta) {
            return Ok(SelectionResult::new(Rule::Esr, t, Some(constant), false)
                .with("noise_std", noise_std)
                .with("complexity", complexity));
        }
    }
    Ok(SelectionResult::new(Rule::Esr, t_max, Some(constant), true).with("noise_std", noise_std))
}

/// Smallest `t` in `[0, t_max]` with `||y - K c_t||_2 <= constant * sigma_hat * sqrt(n)`.
pub fn dp_select(trace: &KgdTrace, noise_std: f64, constant: f64, n: usize) -> Result<SelectionResult> {
    if !(noise_std >= 0.0) {
        return Err(invalid(format!("noise estimate must be non-negative, got {noise_std}")));
    }
    let threshold = constant * noise_std * (n as f64).sqrt();
    let residual = trace.residual_l2();
    match residual.iter().position(|&r| r <= threshold) {
        Some(t) => Ok(SelectionResult::new(Rule::Dp, t, Some(constant), false)
            .with("threshold", threshold)
            .with("noise_std", noise_std)),
        None => Ok(SelectionResult::new(Rule::Dp, trace.t_max(), Some(constant), true)
            .with("threshold", threshold)
            .with("noise_std", noise_std)),
    }
}

fn penalised_argmin(
    rule: Rule,
    trace: &KgdTrace,
    tables: &SpectralTables,
    weight: f64,
    constant: f64,
) -> Result<SelectionResult> {
    let end = trace.t_max().min(tables.t_max());
    if end < 1 {
        return Err(invalid("information criteria need t_max >= 1"));
    }
    let scores: Vec<f64> = (1..=end)
        .map(|t| trace.residual_l2()[t] + weight * tables.w(t))
        .collect();
    let best = argmin_smallest(&scores).ok_or_else(|| KgdError::Numeric("all criterion values are NaN".into()))?;
    Ok(SelectionResult::new(rule, best + 1, Some(constant), false).with("criterion", scores[best]))
}

/// `argmin_{t in [1, t_max]} ||y - K c_t||_2 + constant * W_{D,t}`.
pub fn aic_select(trace: &KgdTrace, tables: &SpectralTables, constant: f64) -> Result<SelectionResult> {
    penalised_argmin(Rule::Aic, trace, tables, constant, constant)
}

/// Same as [`aic_select`] with the penalty multiplied by `log n`.
pub fn bic_select(trace: &KgdTrace, tables: &SpectralTables, constant: f64) -> Result<SelectionResult> {
    let weight = constant * (tables.n() as f64).ln();
    penalised_argmin(Rule::Bic, trace, tables, weight, constant)
}

/// In-sample oracle: `argmin_t ||f_t - f*||_D^2` over `t in [0, t_max]` using the
/// noise-free targets at the training inputs.
pub fn baseline_select(trace: &KgdTrace, clean_targets: Option<&DVector<f64>>) -> Result<SelectionResult> {
    let clean = clean_targets.ok_or_else(|| {
        KgdError::Unsupported("the baseline rule needs noise-free training targets".into())
    })?;
    let fitted = trace
        .fitted_matrix()
        .ok_or_else(|| KgdError::Unsupported("the baseline rule needs retained coefficients".into()))?;
    if fitted.nrows() != clean.len() {
        return Err(invalid(format!(
            "{} clean targets for {} training points",
            clean.len(),
            fitted.nrows()
        )));
    }
    let n = clean.len() as f64;
    let errors: Vec<f64> = (0..fitted.ncols())
        .map(|t| (fitted.column(t) - clean).norm_squared() / n)
        .collect();
    let best = argmin_smallest(&errors).ok_or_else(|| KgdError::Numeric("all errors are NaN".into()))?;
    Ok(SelectionResult::new(Rule::Bs, best, None, false).with("in_sample_mse", errors[best]))
}
