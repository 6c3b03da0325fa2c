//! Kernel gradient descent in coefficient space.
//!
//! The estimator after `t` steps is `f_t = sum_i c_t[i] K(x_i, .)` with
//! `c_{t+1} = c_t - (beta / n) (K c_t - y)` and `c_0 = 0`. The trace keeps every
//! coefficient vector (unless streaming) together with the increment norms
//! `||f_{t+1} - f_t||_D`, `||f_{t+1} - f_t||_K` and the training residuals the
//! selection rules read.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, KgdError, Result};
use crate::kernel::{cross_kernel, KernelMatrix, KernelSpec};
use crate::spectral::Spectrum;

/// Largest admissible `beta * sigma_max / n`. Beyond it the iteration diverges.
pub const STABILITY_LIMIT: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KgdConfig {
    pub step_size: f64,
    pub max_iterations: usize,
    /// Keep every `c_t` and `K c_t`. Without them only the norm sequences survive.
    #[serde(default = "default_true")]
    pub retain_coefficients: bool,
    /// Warn when `beta > 1 / kappa`, the step-size range assumed by the theory.
    #[serde(default)]
    pub strict_step_warning: bool,
}

fn default_true() -> bool {
    true
}

impl KgdConfig {
    pub fn new(step_size: f64, max_iterations: usize) -> Self {
        KgdConfig {
            step_size,
            max_iterations,
            retain_coefficients: true,
            strict_step_warning: false,
        }
    }

    pub fn streaming(mut self) -> Self {
        self.retain_coefficients = false;
        self
    }

    /// Checks `beta * sigma_max / n < 2` for a kernel matrix whose top eigenvalue is
    /// `sigma_max`.
    pub fn check_admissible(&self, sigma_max: f64, n: usize, kappa: f64) -> Result<()> {
        let beta = self.step_size;
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(invalid(format!("step size must be positive, got {beta}")));
        }
        let radius = sigma_max / n as f64;
        if beta * radius >= STABILITY_LIMIT {
            return Err(invalid(format!(
                "step size {beta} is inadmissible: beta * sigma_max / n = {beta} * {radius} = {} must stay below {STABILITY_LIMIT}",
                beta * radius
            )));
        }
        if self.strict_step_warning && beta * kappa > 1.0 {
            log::warn!("step size {beta} exceeds 1/kappa = {}", 1.0 / kappa);
        }
        Ok(())
    }
}

/// Full record of one gradient-descent run for `t = 0..=t_max`.
#[derive(Debug, Clone)]
pub struct KgdTrace {
    t_max: usize,
    n: usize,
    coefficients: Option<DMatrix<f64>>,
    fitted: Option<DMatrix<f64>>,
    inc_empirical: Vec<f64>,
    inc_rkhs: Vec<f64>,
    residual_l2: Vec<f64>,
}

impl KgdTrace {
    /// Builds a trace directly from norm sequences. Used to exercise selectors on
    /// hand-made curves. `inc_*` need `t_max + 1` entries, `residual_l2` as well.
    pub fn from_norms(
        inc_empirical: Vec<f64>,
        inc_rkhs: Vec<f64>,
        residual_l2: Vec<f64>,
    ) -> Result<Self> {
        if inc_empirical.is_empty()
            || inc_empirical.len() != inc_rkhs.len()
            || inc_empirical.len() != residual_l2.len()
        {
            return Err(invalid("norm sequences must be non-empty and equally long"));
        }
        Ok(KgdTrace {
            t_max: inc_empirical.len() - 1,
            n: 0,
            coefficients: None,
            fitted: None,
            inc_empirical,
            inc_rkhs,
            residual_l2,
        })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// `c_t`, when coefficients were retained.
    pub fn coefficients(&self, t: usize) -> Option<DVector<f64>> {
        self.coefficients.as_ref().map(|c| c.column(t).into_owned())
    }

    /// All coefficient vectors as the columns of an `n x (t_max + 1)` matrix.
    pub fn coefficient_matrix(&self) -> Option<&DMatrix<f64>> {
        self.coefficients.as_ref()
    }

    /// Training-input predictions `K c_t` as columns.
    pub fn fitted_matrix(&self) -> Option<&DMatrix<f64>> {
        self.fitted.as_ref()
    }

    /// `||f_{t+1} - f_t||_D` for `t = 0..=t_max`.
    pub fn inc_empirical(&self) -> &[f64] {
        &self.inc_empirical
    }

    /// `||f_{t+1} - f_t||_K` for `t = 0..=t_max`.
    pub fn inc_rkhs(&self) -> &[f64] {
        &self.inc_rkhs
    }

    /// `||y - K c_t||_2` for `t = 0..=t_max`.
    pub fn residual_l2(&self) -> &[f64] {
        &self.residual_l2
    }

    fn require_coefficients(&self) -> Result<&DMatrix<f64>> {
        self.coefficients.as_ref().ok_or_else(|| {
            KgdError::Unsupported("trace was recorded without coefficients".into())
        })
    }

    /// Predictions of every iterate at the rows of a cross-kernel `m x n`;
    /// the result is `m x (t_max + 1)`.
    pub fn predict_path(&self, cross: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let coeffs = self.require_coefficients()?;
        if cross.ncols() != coeffs.nrows() {
            return Err(invalid(format!(
                "cross kernel has {} columns, trace has {} coefficients",
                cross.ncols(),
                coeffs.nrows()
            )));
        }
        Ok(cross * coeffs)
    }

    /// CSV with columns `t,inc_empirical,inc_rkhs,residual_l2`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let io = |e: csv::Error| KgdError::Io(e.to_string());
        wtr.write_record(["t", "inc_empirical", "inc_rkhs", "residual_l2"])
            .map_err(io)?;
        for t in 0..=self.t_max {
            wtr.write_record([
                t.to_string(),
                self.inc_empirical[t].to_string(),
                self.inc_rkhs[t].to_string(),
                self.residual_l2[t].to_string(),
            ])
            .map_err(io)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn check_system(matrix: &KernelMatrix, v: &DVector<f64>, what: &str) -> Result<()> {
    if v.len() != matrix.n() {
        return Err(invalid(format!(
            "{what} has length {} but the kernel matrix is {}x{}",
            v.len(),
            matrix.n(),
            matrix.n()
        )));
    }
    Ok(())
}

/// One step `c - (beta / n) (K c - y)`.
pub fn kgd_step(
    c: &DVector<f64>,
    matrix: &KernelMatrix,
    y: &DVector<f64>,
    beta: f64,
) -> Result<DVector<f64>> {
    check_system(matrix, c, "coefficient vector")?;
    check_system(matrix, y, "output vector")?;
    let n = matrix.n() as f64;
    let residual = y - matrix.entries() * c;
    Ok(c + residual * (beta / n))
}

/// Power iteration estimate of the top eigenvalue of a PSD matrix.
pub fn largest_eigenvalue(matrix: &KernelMatrix) -> f64 {
    let k = matrix.entries();
    let n = k.nrows();
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut estimate = 0.0;
    for _ in 0..500 {
        let w = k * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w);
        v = w / norm;
        if (next - estimate).abs() <= 1e-12 * next.abs() {
            return next;
        }
        estimate = next;
    }
    estimate
}

/// Runs the iteration with admissibility checked against a power-iteration estimate
/// of the top eigenvalue.
pub fn run_kgd(matrix: &KernelMatrix, y: &DVector<f64>, config: &KgdConfig) -> Result<KgdTrace> {
    let sigma_max = largest_eigenvalue(matrix);
    run_kgd_checked(matrix, y, config, sigma_max)
}

/// Same as [`run_kgd`] when the spectrum is already available.
pub fn run_kgd_with_spectrum(
    matrix: &KernelMatrix,
    y: &DVector<f64>,
    config: &KgdConfig,
    spectrum: &Spectrum,
) -> Result<KgdTrace> {
    run_kgd_checked(matrix, y, config, spectrum.max_eigenvalue())
}

fn run_kgd_checked(
    matrix: &KernelMatrix,
    y: &DVector<f64>,
    config: &KgdConfig,
    sigma_max: f64,
) -> Result<KgdTrace> {
    check_system(matrix, y, "output vector")?;
    let n = matrix.n();
    config.check_admissible(sigma_max, n, matrix.kappa())?;
    let k = matrix.entries();
    let t_max = config.max_iterations;
    let scale = config.step_size / n as f64;
    let sqrt_n = (n as f64).sqrt();

    let mut coefficients = config
        .retain_coefficients
        .then(|| DMatrix::zeros(n, t_max + 1));
    let mut fitted = config
        .retain_coefficients
        .then(|| DMatrix::zeros(n, t_max + 1));
    let mut inc_empirical = Vec::with_capacity(t_max + 1);
    let mut inc_rkhs = Vec::with_capacity(t_max + 1);
    let mut residual_l2 = Vec::with_capacity(t_max + 1);

    let mut c = DVector::zeros(n);
    let mut kc = DVector::zeros(n);
    let mut k_delta = DVector::zeros(n);
    // One extra step past t_max supplies the increment at t_max.
    for t in 0..=t_max {
        let residual = y - &kc;
        residual_l2.push(residual.norm());
        let delta = residual * scale;
        k_delta.gemv(1.0, k, &delta, 0.0);
        inc_empirical.push(k_delta.norm() / sqrt_n);
        inc_rkhs.push(delta.dot(&k_delta).max(0.0).sqrt());
        if let (Some(cm), Some(fm)) = (coefficients.as_mut(), fitted.as_mut()) {
            cm.set_column(t, &c);
            fm.set_column(t, &kc);
        }
        c += &delta;
        kc += &k_delta;
    }

    Ok(KgdTrace {
        t_max,
        n,
        coefficients,
        fitted,
        inc_empirical,
        inc_rkhs,
        residual_l2,
    })
}

/// `(1 - (1 - beta u)^t) / u`, continuous at `u = 0` where it equals `t beta`.
pub fn gradient_filter(u: f64, beta: f64, t: usize) -> f64 {
    if t == 0 {
        return 0.0;
    }
    if u == 0.0 {
        return t as f64 * beta;
    }
    let bu = beta * u;
    if bu.abs() < 0.5 {
        -((t as f64) * (-bu).ln_1p()).exp_m1() / u
    } else {
        (1.0 - (1.0 - bu).powi(t as i32)) / u
    }
}

/// Closed form of `t` iterations from zero:
/// `c_t = (1/n) V diag(g_t(sigma_i / n)) V^T y`.
pub fn spectral_solution(
    spectrum: &Spectrum,
    y: &DVector<f64>,
    beta: f64,
    t: usize,
) -> Result<DVector<f64>> {
    let v = spectrum
        .eigenvectors()
        .ok_or_else(|| KgdError::Unsupported("spectrum carries no eigenvectors".into()))?;
    if y.len() != v.nrows() {
        return Err(invalid(format!(
            "output vector has length {}, spectrum has size {}",
            y.len(),
            v.nrows()
        )));
    }
    let n = spectrum.len() as f64;
    let mut projected = v.tr_mul(y);
    for (p, &s) in projected.iter_mut().zip(spectrum.eigenvalues()) {
        *p *= gradient_filter(s / n, beta, t) / n;
    }
    Ok(v * projected)
}

/// `sqrt(dc^T K (K / n + lambda I) dc) = sqrt(||df||_D^2 + lambda ||df||_K^2)`.
pub fn weighted_rkhs_norm(matrix: &KernelMatrix, delta_c: &DVector<f64>, lambda: f64) -> Result<f64> {
    check_system(matrix, delta_c, "coefficient difference")?;
    if !(lambda > 0.0) {
        return Err(invalid(format!("lambda must be positive, got {lambda}")));
    }
    let k_dc = matrix.entries() * delta_c;
    let empirical_sq = k_dc.norm_squared() / matrix.n() as f64;
    let rkhs_sq = delta_c.dot(&k_dc).max(0.0);
    Ok((empirical_sq + lambda * rkhs_sq).sqrt())
}

/// `f(x'_j) = sum_i c_i K(x_i, x'_j)` for every query row.
pub fn predict(
    spec: &KernelSpec,
    train_inputs: &DMatrix<f64>,
    c: &DVector<f64>,
    query_inputs: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    if c.len() != train_inputs.nrows() {
        return Err(invalid(format!(
            "{} coefficients for {} training inputs",
            c.len(),
            train_inputs.nrows()
        )));
    }
    let cross = cross_kernel(spec, query_inputs, train_inputs)?;
    Ok(cross * c)
}
