//! Iteration-count selection rules.
//!
//! Trace-level rules ([`bsp_select`], [`bp_select`], [`lp_select`],
//! [`esr_select`], [`dp_select`], [`aic_select`], [`bic_select`],
//! [`baseline_select`]) read a recorded run and return a [`SelectionResult`].
//! Data-level strategies ([`hss_select`], [`holdout_select`] and
//! [`tuned_select`]) split the sample, tune the rule constant on a validation
//! part and refit.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, KgdError, Result};

mod hybrid;
mod noise;
mod rules;

pub use hybrid::{
    hss_select, holdout_select, select_on, tuned_select, FitContext, FittedModel, HorizonPolicy, HssConfig,
    Selection, TuneConfig, ValidationCurve,
};
pub use noise::estimate_noise_std;
pub use rules::{
    aic_select, argmin_smallest, baseline_select, bic_select, bp_select, bsp_select,
    bsp_select_strict, dp_select, esr_select, lepskii_grid, lp_select, theoretical_bsp_constant,
    BalancingProfile, LepskiiProfile, RuleKind,
};

/// Identifier of a selection strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Bs,
    Ho,
    Bp,
    Lp,
    Esr,
    Dp,
    Aic,
    Bic,
    Bsp,
    Hss,
}

impl Rule {
    pub const ALL: [Rule; 10] = [
        Rule::Bs,
        Rule::Ho,
        Rule::Bp,
        Rule::Lp,
        Rule::Esr,
        Rule::Dp,
        Rule::Aic,
        Rule::Bic,
        Rule::Bsp,
        Rule::Hss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Rule::Bs => "bs",
            Rule::Ho => "ho",
            Rule::Bp => "bp",
            Rule::Lp => "lp",
            Rule::Esr => "esr",
            Rule::Dp => "dp",
            Rule::Aic => "aic",
            Rule::Bic => "bic",
            Rule::Bsp => "bsp",
            Rule::Hss => "hss",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Rule {
    type Err = crate::KgdError;

    fn from_str(s: &str) -> Result<Self> {
        Rule::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| invalid(format!("unknown selection rule `{s}`")))
    }
}

/// Outcome of a selection rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub rule: Rule,
    #[serde(rename = "t")]
    pub t_selected: usize,
    #[serde(rename = "constant")]
    pub constant_used: Option<f64>,
    /// The rule found no admissible index and fell back to its range end.
    pub hit_horizon: bool,
    pub diagnostics: BTreeMap<String, f64>,
}

impl SelectionResult {
    pub(crate) fn new(rule: Rule, t_selected: usize, constant_used: Option<f64>, hit_horizon: bool) -> Self {
        SelectionResult {
            rule,
            t_selected,
            constant_used,
            hit_horizon,
            diagnostics: BTreeMap::new(),
        }
    }

    pub(crate) fn with(mut self, key: &str, value: f64) -> Self {
        self.diagnostics.insert(key.to_string(), value);
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("selection results always serialize")
    }
}

/// Descending list of positive candidate constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ConstantGrid {
    values: Vec<f64>,
}

impl ConstantGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("constant grid must not be empty"));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(invalid(format!("grid constants must be positive and finite, got {v}")));
        }
        if values.windows(2).any(|w| w[0] <= w[1]) {
            return Err(invalid("grid constants must be strictly descending"));
        }
        Ok(ConstantGrid { values })
    }

    /// `{c0 q^k : k = 0..=u}`.
    pub fn geometric(c0: f64, q: f64, u: usize) -> Result<Self> {
        if !(q > 0.0 && q < 1.0) {
            return Err(invalid(format!("grid ratio must lie in (0, 1), got {q}")));
        }
        Self::new((0..=u).map(|k| c0 * q.powi(k as i32)).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

impl TryFrom<Vec<f64>> for ConstantGrid {
    type Error = KgdError;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<ConstantGrid> for Vec<f64> {
    fn from(grid: ConstantGrid) -> Self {
        grid.values
    }
}

impl Default for ConstantGrid {
    fn default() -> Self {
        ConstantGrid::geometric(100.0, 0.9, 20).expect("valid default grid")
    }
}

/// Two-phase constant search: a coarse scan over `{0} U {2^k}` followed by a
/// uniform scan of the bracket around the coarse winner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogUniformSearch {
    pub min_exponent: i32,
    pub max_exponent: i32,
    pub include_zero: bool,
    /// Spacing of the uniform refinement.
    pub refine_step: f64,
    /// The refinement spacing is widened when the bracket would need more points.
    pub max_refine_points: usize,
    /// And narrowed when the bracket would get fewer.
    pub min_refine_points: usize,
}

impl Default for LogUniformSearch {
    fn default() -> Self {
        LogUniformSearch {
            min_exponent: -20,
            max_exponent: 20,
            include_zero: true,
            refine_step: 2f64.powi(-10),
            max_refine_points: 4096,
            min_refine_points: 64,
        }
    }
}

impl LogUniformSearch {
    pub fn coarse(&self) -> Vec<f64> {
        let mut out: Vec<f64> = (self.min_exponent..=self.max_exponent)
            .rev()
            .map(|k| 2f64.powi(k))
            .collect();
        if self.include_zero {
            out.push(0.0);
        }
        out
    }

    /// Descending refinement points covering the coarse neighbours of `coarse[best]`.
    pub fn refine(&self, coarse: &[f64], best: usize) -> Vec<f64> {
        let hi = coarse[best.saturating_sub(1)];
        let lo = coarse[(best + 1).min(coarse.len() - 1)];
        let width = hi - lo;
        if width <= 0.0 {
            return vec![hi];
        }
        let mut step = self.refine_step;
        let points = (width / step).ceil();
        if points > self.max_refine_points as f64 {
            step = width / self.max_refine_points as f64;
        } else if points < self.min_refine_points as f64 {
            step = width / self.min_refine_points as f64;
        }
        let count = (width / step).round() as usize;
        (0..=count).map(|i| (hi - i as f64 * step).max(lo)).collect()
    }
}

/// How candidate constants are generated for validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ConstantSearch {
    Grid { grid: ConstantGrid },
    LogUniform(LogUniformSearch),
}

impl Default for ConstantSearch {
    fn default() -> Self {
        ConstantSearch::LogUniform(LogUniformSearch::default())
    }
}

/// Winner of a constant search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchOutcome {
    pub constant: f64,
    pub score: f64,
    pub evaluations: usize,
}

fn best_of(candidates: &[f64], scores: &[f64]) -> usize {
    // strict improvement only: earlier (larger) constants win ties
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] < scores[best] {
            best = i;
        }
    }
    debug_assert_eq!(candidates.len(), scores.len());
    best
}

impl ConstantSearch {
    /// Minimises `score` over the candidates; ties go to the larger constant.
    pub fn run(&self, mut score: impl FnMut(f64) -> Result<f64>) -> Result<SearchOutcome> {
        match self {
            ConstantSearch::Grid { grid } => {
                let scores = grid.values().iter().map(|&c| score(c)).collect::<Result<Vec<_>>>()?;
                let best = best_of(grid.values(), &scores);
                Ok(SearchOutcome {
                    constant: grid.values()[best],
                    score: scores[best],
                    evaluations: scores.len(),
                })
            }
            ConstantSearch::LogUniform(cfg) => {
                if cfg.min_exponent > cfg.max_exponent {
                    return Err(invalid("log-uniform search needs min_exponent <= max_exponent"));
                }
                let coarse = cfg.coarse();
                let coarse_scores = coarse.iter().map(|&c| score(c)).collect::<Result<Vec<_>>>()?;
                let best = best_of(&coarse, &coarse_scores);
                let fine = cfg.refine(&coarse, best);
                let fine_scores = fine.iter().map(|&c| score(c)).collect::<Result<Vec<_>>>()?;
                let fine_best = best_of(&fine, &fine_scores);
                let (constant, value) = if fine_scores[fine_best] < coarse_scores[best] {
                    (fine[fine_best], fine_scores[fine_best])
                } else {
                    (coarse[best], coarse_scores[best])
                };
                Ok(SearchOutcome {
                    constant,
                    score: value,
                    evaluations: coarse.len() + fine.len(),
                })
            }
        }
    }
}
