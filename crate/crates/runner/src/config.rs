//! Experiment configuration, read from JSON.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use kgd_core::datagen::GeoColumn;
use kgd_core::selectors::{HssConfig, Rule, TuneConfig};
use serde::{Deserialize, Serialize};

use crate::error::RunnerError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Sim1ConstantSweep,
    Sim2MethodComparison,
    Sim3CovariateShift,
    Realdata,
}

impl ExperimentKind {
    fn default_methods(self) -> Vec<Rule> {
        match self {
            ExperimentKind::Sim1ConstantSweep => vec![Rule::Hss],
            ExperimentKind::Sim2MethodComparison => vec![
                Rule::Bs,
                Rule::Ho,
                Rule::Bp,
                Rule::Lp,
                Rule::Esr,
                Rule::Dp,
                Rule::Aic,
                Rule::Bic,
                Rule::Hss,
            ],
            ExperimentKind::Sim3CovariateShift => vec![Rule::Ho, Rule::Hss],
            ExperimentKind::Realdata => vec![Rule::Bs, Rule::Ho, Rule::Hss],
        }
    }
}

/// Geomagnetic study inputs. Coordinates are normalized with the training file's
/// min-max map; noise is added to the training values only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RealDataConfig {
    pub train_csv: PathBuf,
    pub test_csv: PathBuf,
    pub column: GeoColumn,
    pub noise_std: f64,
    /// Noise draws are rejected beyond this many standard deviations.
    #[serde(default = "default_truncation")]
    pub truncation: f64,
    pub step_size: f64,
}

fn default_truncation() -> f64 {
    3.0
}

fn default_sizes() -> Vec<usize> {
    vec![1000]
}

fn default_dims() -> Vec<usize> {
    vec![1]
}

fn default_trials() -> usize {
    10
}

fn default_noise() -> f64 {
    0.6
}

fn default_step_sizes() -> BTreeMap<usize, f64> {
    BTreeMap::from([(1, 1.0), (3, 3.0)])
}

fn default_test_size() -> usize {
    500
}

fn default_holdout() -> f64 {
    0.5
}

fn default_bsp_constant() -> f64 {
    1.0
}

fn default_sweep() -> Vec<f64> {
    let mut grid: Vec<f64> = (0..=200).map(|i| i as f64 * 0.05).collect();
    grid.push(1e12);
    grid
}

fn default_shifts() -> Vec<f64> {
    vec![1.1, 1.2, 1.3, 1.4, 1.5]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Filled in from the subcommand when absent.
    #[serde(default)]
    pub experiment: Option<ExperimentKind>,
    #[serde(default = "default_sizes")]
    pub sizes: Vec<usize>,
    #[serde(default = "default_dims")]
    pub dims: Vec<usize>,
    /// Defaults depend on the experiment.
    #[serde(default)]
    pub methods: Vec<Rule>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Trial `i` uses seed `seed + i`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    /// Step size per input dimension.
    #[serde(default = "default_step_sizes")]
    pub step_sizes: BTreeMap<usize, f64>,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    /// Iteration budget; the sample size when unset.
    #[serde(default)]
    pub max_iterations: Option<usize>,
    /// HSS subsample size as a fraction of `n`; the whole sample when unset.
    #[serde(default)]
    pub subsample_fraction: Option<f64>,
    #[serde(default)]
    pub hss: HssConfig,
    #[serde(default)]
    pub tune: TuneConfig,
    #[serde(default = "default_holdout")]
    pub holdout_ratio: f64,
    /// Constant of the stand-alone backward rule (`bsp` method).
    #[serde(default = "default_bsp_constant")]
    pub bsp_constant: f64,
    /// Constants scanned by the sweep experiment.
    #[serde(default = "default_sweep")]
    pub sweep_constants: Vec<f64>,
    /// Test-domain upper ends for the covariate-shift experiment.
    #[serde(default = "default_shifts")]
    pub shifts: Vec<f64>,
    #[serde(default)]
    pub realdata: Option<RealDataConfig>,
    #[serde(default)]
    pub workers: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, RunnerError> {
        serde_json::from_str(text).map_err(|e| RunnerError::Config(vec![format!("invalid JSON: {e}")]))
    }

    pub fn load(path: &Path) -> Result<Self, RunnerError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunnerError::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
        Self::from_json(&text)
    }

    pub fn kind(&self) -> ExperimentKind {
        self.experiment.unwrap_or(ExperimentKind::Sim2MethodComparison)
    }

    pub fn methods(&self) -> Vec<Rule> {
        if self.methods.is_empty() {
            self.kind().default_methods()
        } else {
            self.methods.clone()
        }
    }

    pub fn step_size(&self, d: usize) -> Option<f64> {
        match (&self.realdata, self.kind()) {
            (Some(r), ExperimentKind::Realdata) => Some(r.step_size),
            _ => self.step_sizes.get(&d).copied(),
        }
    }

    /// Checks every field and reports all problems at once.
    pub fn validate(&self) -> Result<(), RunnerError> {
        let mut problems = Vec::new();
        let kind = self.kind();
        if self.trials == 0 {
            problems.push("trials: must be at least 1".to_string());
        }
        if kind != ExperimentKind::Realdata {
            if self.sizes.is_empty() {
                problems.push("sizes: must not be empty".into());
            }
            if let Some(n) = self.sizes.iter().find(|&&n| n < 4) {
                problems.push(format!("sizes: sample size {n} is below 4"));
            }
            if self.dims.is_empty() {
                problems.push("dims: must not be empty".into());
            }
            for &d in &self.dims {
                if d != 1 && d != 3 {
                    problems.push(format!("dims: dimension {d} unsupported (1 or 3)"));
                }
                match self.step_sizes.get(&d) {
                    Some(b) if *b > 0.0 && b.is_finite() => {}
                    Some(b) => problems.push(format!("step_sizes.{d}: must be positive, got {b}")),
                    None => problems.push(format!("step_sizes: no step size for dimension {d}")),
                }
            }
            if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
                problems.push(format!("noise_std: must be non-negative, got {}", self.noise_std));
            }
            if self.test_size == 0 {
                problems.push("test_size: must be positive".into());
            }
        }
        if kind == ExperimentKind::Sim3CovariateShift {
            if self.dims.iter().any(|&d| d != 1) {
                problems.push("dims: the covariate-shift experiment is one-dimensional".into());
            }
            if self.shifts.is_empty() {
                problems.push("shifts: must not be empty".into());
            }
            if let Some(b) = self.shifts.iter().find(|b| !(**b >= 1.0 && b.is_finite())) {
                problems.push(format!("shifts: levels must be at least 1, got {b}"));
            }
        }
        if kind == ExperimentKind::Sim1ConstantSweep {
            if self.sweep_constants.is_empty() {
                problems.push("sweep_constants: must not be empty".into());
            }
            if let Some(c) = self.sweep_constants.iter().find(|c| !(**c >= 0.0)) {
                problems.push(format!("sweep_constants: constants must be non-negative, got {c}"));
            }
        }
        if kind == ExperimentKind::Realdata {
            match &self.realdata {
                None => problems.push("realdata: required for the real-data experiment".into()),
                Some(r) => {
                    if !(r.noise_std >= 0.0) {
                        problems.push(format!("realdata.noise_std: must be non-negative, got {}", r.noise_std));
                    }
                    if !(r.truncation > 0.0) {
                        problems.push(format!("realdata.truncation: must be positive, got {}", r.truncation));
                    }
                    if !(r.step_size > 0.0 && r.step_size.is_finite()) {
                        problems.push(format!("realdata.step_size: must be positive, got {}", r.step_size));
                    }
                }
            }
        }
        if self.max_iterations == Some(0) {
            problems.push("max_iterations: must be at least 1".into());
        }
        if let Some(f) = self.subsample_fraction {
            if !(f > 0.0 && f <= 1.0) {
                problems.push(format!("subsample_fraction: must lie in (0, 1], got {f}"));
            }
        }
        if !(self.holdout_ratio > 0.0 && self.holdout_ratio < 1.0) {
            problems.push(format!("holdout_ratio: must lie in (0, 1), got {}", self.holdout_ratio));
        }
        for (name, r) in [("hss.split_ratio", self.hss.split_ratio), ("tune.split_ratio", self.tune.split_ratio)] {
            if !(r > 0.0 && r < 1.0) {
                problems.push(format!("{name}: must lie in (0, 1), got {r}"));
            }
        }
        for (name, d) in [("hss.delta", self.hss.delta), ("tune.delta", self.tune.delta)] {
            if !(d > 0.0 && d < 1.0) {
                problems.push(format!("{name}: must lie in (0, 1), got {d}"));
            }
        }
        if !(self.bsp_constant >= 0.0) {
            problems.push(format!("bsp_constant: must be non-negative, got {}", self.bsp_constant));
        }
        if self.workers == Some(0) {
            problems.push("workers: must be at least 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(RunnerError::Config(problems))
        }
    }
}
