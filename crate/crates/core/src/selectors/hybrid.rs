use nalgebra::{DMatrix, DVector};
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use super::noise::estimate_noise_std;
use super::rules::{
    aic_select, argmin_smallest, bic_select, bp_select, bsp_lhs, bsp_select, bsp_select_strict,
    dp_select, esr_select, lp_select, BalancingProfile, LepskiiProfile, RuleKind,
};
use super::{ConstantSearch, Rule, SelectionResult};
use crate::datagen::{stream_rng, streams, Dataset};
use crate::error::{invalid, KgdError, Result};
use crate::kernel::{build_kernel_matrix, cross_kernel, KernelMatrix, KernelSpec};
use crate::kgd::{run_kgd_with_spectrum, KgdConfig, KgdTrace};
use crate::spectral::{eigenvalues_only, local_rademacher, SpectralTables, Spectrum, DEFAULT_DELTA};

/// Upper end of a selection range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HorizonPolicy {
    /// The sudden-stop horizon `T`, capped at the iteration budget.
    SuddenStop,
    /// The full iteration budget.
    MaxIterations,
}

/// Kernel matrix, spectrum, spectral tables and a full gradient-descent trace for
/// one training sample.
#[derive(Debug, Clone)]
pub struct FitContext {
    spec: KernelSpec,
    inputs: DMatrix<f64>,
    outputs: DVector<f64>,
    matrix: KernelMatrix,
    spectrum: Spectrum,
    tables: SpectralTables,
    trace: KgdTrace,
}

impl FitContext {
    pub fn new(data: &Dataset, spec: &KernelSpec, config: &KgdConfig, delta: f64) -> Result<Self> {
        if config.max_iterations < 1 {
            return Err(invalid("iteration budget must be at least 1"));
        }
        let matrix = build_kernel_matrix(spec, &data.inputs)?;
        let spectrum = eigenvalues_only(&matrix)?;
        let tables = SpectralTables::new(&spectrum, data.n(), config.max_iterations, matrix.kappa(), delta)?;
        let mut cfg = *config;
        cfg.retain_coefficients = true;
        let trace = run_kgd_with_spectrum(&matrix, &data.outputs, &cfg, &spectrum)?;
        Ok(FitContext {
            spec: *spec,
            inputs: data.inputs.clone(),
            outputs: data.outputs.clone(),
            matrix,
            spectrum,
            tables,
            trace,
        })
    }

    pub fn n(&self) -> usize {
        self.outputs.len()
    }

    pub fn matrix(&self) -> &KernelMatrix {
        &self.matrix
    }

    pub fn spectrum(&self) -> &Spectrum {
        &self.spectrum
    }

    pub fn tables(&self) -> &SpectralTables {
        &self.tables
    }

    pub fn trace(&self) -> &KgdTrace {
        &self.trace
    }

    pub fn horizon(&self, policy: HorizonPolicy) -> usize {
        match policy {
            HorizonPolicy::SuddenStop => self.tables.sudden_stop().t.min(self.trace.t_max()),
            HorizonPolicy::MaxIterations => self.trace.t_max(),
        }
    }

    pub fn noise_std(&self) -> Result<f64> {
        estimate_noise_std(&self.inputs, &self.outputs)
    }

    pub fn model(&self, t: usize) -> Result<FittedModel> {
        let coefficients = self
            .trace
            .coefficients(t)
            .ok_or_else(|| invalid(format!("iteration {t} outside the recorded range 0..={}", self.trace.t_max())))?;
        Ok(FittedModel {
            spec: self.spec,
            train_inputs: self.inputs.clone(),
            coefficients,
            t,
        })
    }

    /// Mean squared error on `validation` of every iterate.
    pub fn validation_curve(&self, validation: &Dataset) -> Result<ValidationCurve> {
        let cross = cross_kernel(&self.spec, &validation.inputs, &self.inputs)?;
        let path = self.trace.predict_path(&cross)?;
        let m = validation.n() as f64;
        let mse = (0..path.ncols())
            .map(|t| (path.column(t) - &validation.outputs).norm_squared() / m)
            .collect();
        Ok(ValidationCurve { mse })
    }
}

/// Validation error indexed by iteration count.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationCurve {
    mse: Vec<f64>,
}

impl ValidationCurve {
    pub fn at(&self, t: usize) -> f64 {
        self.mse[t]
    }

    pub fn values(&self) -> &[f64] {
        &self.mse
    }
}

/// Coefficients of a selected iterate together with what is needed to predict.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub spec: KernelSpec,
    pub train_inputs: DMatrix<f64>,
    pub coefficients: DVector<f64>,
    pub t: usize,
}

impl FittedModel {
    pub fn predict(&self, query: &DMatrix<f64>) -> Result<DVector<f64>> {
        Ok(cross_kernel(&self.spec, query, &self.train_inputs)? * &self.coefficients)
    }
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub result: SelectionResult,
    pub model: FittedModel,
}

fn default_split() -> f64 {
    0.7
}

fn default_delta() -> f64 {
    DEFAULT_DELTA
}

fn default_selection_horizon() -> HorizonPolicy {
    // The sudden-stop horizon is a handful of iterations at desk-scale sample
    // sizes, far below the useful range, so tuning runs over the full budget.
    HorizonPolicy::MaxIterations
}

fn default_final_horizon() -> HorizonPolicy {
    HorizonPolicy::MaxIterations
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HssConfig {
    /// Size `L` of the random subsample used for tuning; the whole sample when unset.
    #[serde(default)]
    pub subsample_size: Option<usize>,
    /// Fraction of the subsample used for training during tuning.
    #[serde(default = "default_split")]
    pub split_ratio: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub constants: ConstantSearch,
    /// Range of the backward rule while tuning on the training part.
    #[serde(default = "default_selection_horizon")]
    pub selection_horizon: HorizonPolicy,
    /// Range of the backward rule on the full sample.
    #[serde(default = "default_final_horizon")]
    pub final_horizon: HorizonPolicy,
    /// Scale the threshold by `log^2(16/delta)`.
    #[serde(default)]
    pub strict: bool,
}

impl Default for HssConfig {
    fn default() -> Self {
        HssConfig {
            subsample_size: None,
            split_ratio: default_split(),
            delta: DEFAULT_DELTA,
            constants: ConstantSearch::default(),
            selection_horizon: default_selection_horizon(),
            final_horizon: default_final_horizon(),
            strict: false,
        }
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(invalid(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    Ok(())
}

/// Random split of `0..n` into a training part of size `round(ratio n)` (at least
/// one point on each side) and the rest.
pub(crate) fn split_indices(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    check_ratio(ratio)?;
    if n < 2 {
        return Err(invalid(format!("cannot split {n} points into two non-empty parts")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, streams::SPLIT));
    let n_tr = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let validation = order.split_off(n_tr);
    Ok((order, validation))
}

fn bsp_with(strict: bool, ctx: &FitContext, constant: f64, horizon: usize) -> Result<SelectionResult> {
    if strict {
        bsp_select_strict(ctx.trace(), ctx.tables(), constant, horizon)
    } else {
        bsp_select(ctx.trace(), ctx.tables(), constant, horizon)
    }
}

/// Hybrid selection: tune the backward-rule constant by hold-out validation on a
/// (sub)sample, then apply the backward rule with that constant to the full sample.
pub fn hss_select(
    data: &Dataset,
    spec: &KernelSpec,
    config: &KgdConfig,
    hss: &HssConfig,
    seed: u64,
) -> Result<Selection> {
    let n = data.n();
    let l = hss.subsample_size.unwrap_or(n);
    if l < 2 || l > n {
        return Err(invalid(format!("subsample size must lie in [2, {n}], got {l}")));
    }
    let tuning = if l < n {
        let mut idx = index::sample(&mut stream_rng(seed, streams::SUBSAMPLE), n, l).into_vec();
        idx.sort_unstable();
        data.subset(&idx)
    } else {
        data.clone()
    };
    let (tr_idx, va_idx) = split_indices(l, hss.split_ratio, seed)?;
    let train = tuning.subset(&tr_idx);
    let validation = tuning.subset(&va_idx);

    let full = FitContext::new(data, spec, config, hss.delta)?;
    let tr = FitContext::new(&train, spec, config, hss.delta)?;
    let curve = tr.validation_curve(&validation)?;
    let sudden_stop = full.tables().sudden_stop().t;
    let selection_horizon = match hss.selection_horizon {
        HorizonPolicy::SuddenStop => sudden_stop.min(tr.trace().t_max()),
        HorizonPolicy::MaxIterations => tr.trace().t_max(),
    };

    let outcome = hss.constants.run(|c| {
        let t = bsp_with(hss.strict, &tr, c, selection_horizon)?.t_selected;
        Ok(curve.at(t))
    })?;

    let final_horizon = full.horizon(hss.final_horizon);
    let chosen = bsp_with(hss.strict, &full, outcome.constant, final_horizon)?;
    let model = full.model(chosen.t_selected)?;
    let mut result = SelectionResult::new(Rule::Hss, chosen.t_selected, Some(outcome.constant), chosen.hit_horizon)
        .with("validation_mse", outcome.score)
        .with("sudden_stop_horizon", sudden_stop as f64)
        .with("selection_horizon", selection_horizon as f64)
        .with("final_horizon", final_horizon as f64)
        .with("subsample_size", l as f64)
        .with("evaluations", outcome.evaluations as f64);
    if full.tables().sudden_stop().defaulted {
        result = result.with("sudden_stop_defaulted", 1.0);
    }
    Ok(Selection { result, model })
}

/// Hold-out selection: train on a `ratio` part, choose the iterate with the
/// smallest validation error over `[0, t_max]` and keep the model trained on
/// that part.
pub fn holdout_select(
    data: &Dataset,
    spec: &KernelSpec,
    config: &KgdConfig,
    ratio: f64,
    seed: u64,
) -> Result<Selection> {
    let (tr_idx, va_idx) = split_indices(data.n(), ratio, seed)?;
    let train = data.subset(&tr_idx);
    let validation = data.subset(&va_idx);
    let tr = FitContext::new(&train, spec, config, DEFAULT_DELTA)?;
    let curve = tr.validation_curve(&validation)?;
    let t = argmin_smallest(curve.values()).ok_or_else(|| KgdError::Numeric("validation errors are all NaN".into()))?;
    let result = SelectionResult::new(Rule::Ho, t, None, false).with("validation_mse", curve.at(t));
    Ok(Selection {
        result,
        model: tr.model(t)?,
    })
}

fn default_q() -> f64 {
    2.0
}

/// Settings for hold-out tuning of a comparison rule's constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    #[serde(default = "default_split")]
    pub split_ratio: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub constants: ConstantSearch,
    /// Ratio of the Lepskii grid.
    #[serde(default = "default_q")]
    pub lepskii_q: f64,
    /// Range of the balancing comparisons and of the backward rule.
    #[serde(default = "default_final_horizon")]
    pub horizon: HorizonPolicy,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            split_ratio: default_split(),
            delta: DEFAULT_DELTA,
            constants: ConstantSearch::default(),
            lepskii_q: default_q(),
            horizon: default_final_horizon(),
        }
    }
}

/// Fast constant-to-iteration map of a rule on a fixed context.
enum Chooser {
    Bsp(usize),
    Bp(BalancingProfile),
    Lp(LepskiiProfile),
    /// First `t >= 1` where the stored score exceeds the constant.
    FirstAbove(Vec<f64>),
    /// First `t >= 0` where the stored value is at most the constant.
    FirstAtMost(Vec<f64>),
    Penalised { residual: Vec<f64>, penalty: Vec<f64> },
}

impl Chooser {
    fn new(kind: RuleKind, ctx: &FitContext, tune: &TuneConfig) -> Result<Self> {
        let trace = ctx.trace();
        let tables = ctx.tables();
        let t_max = trace.t_max();
        Ok(match kind {
            RuleKind::Bsp => Chooser::Bsp(ctx.horizon(tune.horizon)),
            RuleKind::Bp => Chooser::Bp(BalancingProfile::new(trace, tables, Some(ctx.horizon(tune.horizon)))?),
            RuleKind::Lp => Chooser::Lp(LepskiiProfile::new(trace, tables, ctx.matrix(), tune.lepskii_q)?),
            RuleKind::Esr => {
                let sigma = positive_noise(ctx)?;
                let beta = esr_beta(ctx)?;
                let n = ctx.n();
                let scores = (1..=t_max)
                    .map(|t| {
                        let eta = t as f64 * beta;
                        Ok(local_rademacher(ctx.spectrum(), n, 1.0 / eta.sqrt())? * sigma * eta)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Chooser::FirstAbove(scores)
            }
            RuleKind::Dp => {
                let scale = ctx.noise_std()? * (ctx.n() as f64).sqrt();
                Chooser::FirstAtMost(
                    trace
                        .residual_l2()
                        .iter()
                        .map(|&r| if scale > 0.0 { r / scale } else if r == 0.0 { 0.0 } else { f64::INFINITY })
                        .collect(),
                )
            }
            RuleKind::Aic | RuleKind::Bic => {
                let weight = if kind == RuleKind::Bic { (ctx.n() as f64).ln() } else { 1.0 };
                Chooser::Penalised {
                    residual: trace.residual_l2()[1..].to_vec(),
                    penalty: tables.w_values().iter().map(|w| w * weight).collect(),
                }
            }
        })
    }

    fn choose(&self, ctx: &FitContext, constant: f64) -> Result<usize> {
        Ok(match self {
            Chooser::Bsp(h) => {
                let tables = ctx.tables();
                (1..=*h)
                    .rev()
                    .find(|&t| bsp_lhs(ctx.trace(), t) >= constant * tables.w(t))
                    .unwrap_or(*h)
            }
            Chooser::Bp(p) => p.select(constant),
            Chooser::Lp(p) => p.select(constant),
            Chooser::FirstAbove(s) => s.iter().position(|&v| v > constant).map(|i| i + 1).unwrap_or(s.len()),
            Chooser::FirstAtMost(s) => s.iter().position(|&v| v <= constant).unwrap_or(s.len() - 1),
            Chooser::Penalised { residual, penalty } => {
                let scores: Vec<f64> = residual.iter().zip(penalty).map(|(r, p)| r + constant * p).collect();
                argmin_smallest(&scores).map(|i| i + 1).unwrap_or(1)
            }
        })
    }
}

fn positive_noise(ctx: &FitContext) -> Result<f64> {
    let sigma = ctx.noise_std()?;
    if sigma > 0.0 {
        Ok(sigma)
    } else {
        Err(KgdError::Numeric("estimated noise level is zero".into()))
    }
}

fn esr_beta(ctx: &FitContext) -> Result<f64> {
    // The step size is not stored in the trace; recover it from the first step,
    // where c_1 = (beta / n) y.
    let c1 = ctx
        .trace()
        .coefficients(1)
        .ok_or_else(|| invalid("early stopping needs at least one recorded step"))?;
    let (i, _) = ctx.outputs.iamax_full();
    let yi = ctx.outputs[i];
    if yi == 0.0 {
        return Err(KgdError::Numeric("all outputs are zero".into()));
    }
    Ok(c1[i] / yi * ctx.n() as f64)
}

fn literal(kind: RuleKind, ctx: &FitContext, tune: &TuneConfig, constant: f64) -> Result<SelectionResult> {
    let trace = ctx.trace();
    let tables = ctx.tables();
    match kind {
        RuleKind::Bsp => bsp_select(trace, tables, constant, ctx.horizon(tune.horizon)),
        RuleKind::Bp => bp_select(trace, tables, constant, Some(ctx.horizon(tune.horizon))),
        RuleKind::Lp => lp_select(trace, tables, ctx.matrix(), constant, tune.lepskii_q),
        RuleKind::Esr => esr_select(ctx.spectrum(), ctx.n(), esr_beta(ctx)?, positive_noise(ctx)?, constant, trace.t_max()),
        RuleKind::Dp => dp_select(trace, ctx.noise_std()?, constant, ctx.n()),
        RuleKind::Aic => aic_select(trace, tables, constant),
        RuleKind::Bic => bic_select(trace, tables, constant),
    }
}

/// Tunes the constant of `kind` on a `split_ratio` hold-out split, then applies
/// the rule with that constant to the full sample.
pub fn tuned_select(
    data: &Dataset,
    spec: &KernelSpec,
    config: &KgdConfig,
    kind: RuleKind,
    tune: &TuneConfig,
    seed: u64,
) -> Result<Selection> {
    let (tr_idx, va_idx) = split_indices(data.n(), tune.split_ratio, seed)?;
    let tr = FitContext::new(&data.subset(&tr_idx), spec, config, tune.delta)?;
    let curve = tr.validation_curve(&data.subset(&va_idx))?;
    let chooser = Chooser::new(kind, &tr, tune)?;
    let outcome = tune.constants.run(|c| Ok(curve.at(chooser.choose(&tr, c)?)))?;
    let full = FitContext::new(data, spec, config, tune.delta)?;
    let result = literal(kind, &full, tune, outcome.constant)?
        .with("validation_mse", outcome.score)
        .with("evaluations", outcome.evaluations as f64);
    let model = full.model(result.t_selected)?;
    Ok(Selection { result, model })
}

/// Selection by a rule with a fixed constant on an existing context.
pub fn select_on(kind: RuleKind, ctx: &FitContext, tune: &TuneConfig, constant: f64) -> Result<SelectionResult> {
    literal(kind, ctx, tune, constant)
}
