//! Eigendecomposition of kernel matrices and the spectral scalars consumed by the
//! selection rules: empirical effective dimension, the variance proxy `W`, the
//! concentration term `U`, the sudden-stop horizon and the local Rademacher
//! complexity.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{invalid, KgdError, Result};
use crate::kernel::KernelMatrix;

/// Relative tolerance below which negative eigenvalues are treated as round-off.
pub const PSD_TOLERANCE: f64 = 1e-8;

/// Default confidence level.
pub const DEFAULT_DELTA: f64 = 0.05;

/// Eigenvalues of a kernel matrix in non-increasing order, with the matching
/// orthonormal eigenvectors stored column-wise.
#[derive(Debug, Clone)]
pub struct Spectrum {
    eigenvalues: Vec<f64>,
    eigenvectors: Option<DMatrix<f64>>,
    raw_min_eigenvalue: f64,
}

impl Spectrum {
    /// A spectrum known only through its eigenvalues. Negative entries within
    /// tolerance are clipped; the values are sorted descending.
    pub fn from_eigenvalues(mut eigenvalues: Vec<f64>) -> Result<Self> {
        if eigenvalues.iter().any(|v| !v.is_finite()) {
            return Err(KgdError::Numeric("non-finite eigenvalue".into()));
        }
        eigenvalues.sort_by(|a, b| b.total_cmp(a));
        let raw_min = eigenvalues.last().copied().unwrap_or(0.0);
        clip_negatives(&mut eigenvalues)?;
        Ok(Spectrum {
            eigenvalues,
            eigenvectors: None,
            raw_min_eigenvalue: raw_min,
        })
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> Option<&DMatrix<f64>> {
        self.eigenvectors.as_ref()
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(0.0)
    }

    /// Smallest eigenvalue before clipping.
    pub fn raw_min_eigenvalue(&self) -> f64 {
        self.raw_min_eigenvalue
    }

    /// `V diag(sigma) V^T`.
    pub fn reconstruct(&self) -> Option<DMatrix<f64>> {
        let v = self.eigenvectors.as_ref()?;
        let mut scaled = v.clone();
        for (j, s) in self.eigenvalues.iter().enumerate() {
            scaled.column_mut(j).scale_mut(*s);
        }
        Some(scaled * v.transpose())
    }
}

fn clip_negatives(sorted_desc: &mut [f64]) -> Result<()> {
    let max = sorted_desc.first().copied().unwrap_or(0.0).max(0.0);
    let floor = -PSD_TOLERANCE * max;
    for v in sorted_desc.iter_mut() {
        if *v < 0.0 {
            if *v < floor && max > 0.0 {
                return Err(KgdError::Numeric(format!(
                    "matrix is not positive semi-definite: eigenvalue {v:e} below -{PSD_TOLERANCE:e} * {max:e}"
                )));
            }
            if max == 0.0 && *v < -f64::EPSILON {
                return Err(KgdError::Numeric(format!(
                    "matrix is negative definite: eigenvalue {v:e}"
                )));
            }
            *v = 0.0;
        }
    }
    Ok(())
}

/// Symmetric eigendecomposition with eigenvalues sorted descending.
pub fn eigendecompose(matrix: &KernelMatrix) -> Result<Spectrum> {
    let k = matrix.entries();
    let n = k.nrows();
    let eig = SymmetricEigen::try_new(k.clone(), f64::EPSILON, 0).ok_or_else(|| {
        let fro = k.norm();
        let diag_max = k.diagonal().max();
        KgdError::Numeric(format!(
            "symmetric eigendecomposition did not converge (n = {n}, frobenius norm {fro:e}, max diagonal {diag_max:e})"
        ))
    })?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    let raw_min = eigenvalues.last().copied().unwrap_or(0.0);
    clip_negatives(&mut eigenvalues)?;
    Ok(Spectrum {
        eigenvalues,
        eigenvectors: Some(vectors),
        raw_min_eigenvalue: raw_min,
    })
}

/// Eigenvalues only, sorted descending. Cheaper than [`eigendecompose`] when the
/// eigenvectors are not needed.
pub fn eigenvalues_only(matrix: &KernelMatrix) -> Result<Spectrum> {
    let values = matrix.entries().symmetric_eigenvalues();
    Spectrum::from_eigenvalues(values.iter().copied().collect())
}

fn effective_dimension_unchecked(eigenvalues: &[f64], n: usize, lambda: f64) -> f64 {
    let shift = lambda * n as f64;
    eigenvalues.iter().map(|&s| s / (s + shift)).sum()
}

/// `N_D(lambda) = sum_i sigma_i / (sigma_i + lambda n)`, the eigenvalue form of
/// `Tr[(lambda n I + K)^{-1} K]`.
pub fn empirical_effective_dimension(spectrum: &Spectrum, n: usize, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(invalid(format!("lambda must be positive, got {lambda}")));
    }
    check_n(n)?;
    Ok(effective_dimension_unchecked(spectrum.eigenvalues(), n, lambda))
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        Err(invalid("sample count must be positive"))
    } else {
        Ok(())
    }
}

fn check_t(t: usize) -> Result<()> {
    if t == 0 {
        Err(invalid("iteration index must be at least 1"))
    } else {
        Ok(())
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("delta must lie in (0, 1), got {delta}")))
    }
}

fn w_from_dimension(n: usize, t: usize, eff_dim: f64) -> f64 {
    let nf = n as f64;
    let tf = t as f64;
    tf.sqrt() / nf + eff_dim.max(1.0).sqrt() * (1.0 + (tf / nf).sqrt()) / nf.sqrt()
}

fn u_from_dimension(n: usize, t: usize, delta: f64, eff_dim: f64) -> f64 {
    let nf = n as f64;
    let tf = t as f64;
    let inner = 1.0 + 8.0 * (64.0 / delta).ln() * (tf / nf).sqrt() * eff_dim.max(1.0);
    let a = inner.ln() * tf / nf;
    a + a.sqrt()
}

/// Variance proxy `W_{D,t}`.
pub fn variance_proxy_w(spectrum: &Spectrum, n: usize, t: usize) -> Result<f64> {
    check_n(n)?;
    check_t(t)?;
    let eff = effective_dimension_unchecked(spectrum.eigenvalues(), n, 1.0 / t as f64);
    Ok(w_from_dimension(n, t, eff))
}

/// Concentration term `U_{D,t,delta}`.
pub fn concentration_u(spectrum: &Spectrum, n: usize, t: usize, delta: f64) -> Result<f64> {
    check_n(n)?;
    check_t(t)?;
    check_delta(delta)?;
    let eff = effective_dimension_unchecked(spectrum.eigenvalues(), n, 1.0 / t as f64);
    Ok(u_from_dimension(n, t, delta, eff))
}

/// Scaled variance proxy used by the Lepskii comparison: `sqrt(t) (N_D(1/t) + 1) / sqrt(n)`.
pub fn lepskii_proxy(spectrum: &Spectrum, n: usize, t: usize) -> Result<f64> {
    check_n(n)?;
    check_t(t)?;
    let eff = effective_dimension_unchecked(spectrum.eigenvalues(), n, 1.0 / t as f64);
    Ok((t as f64).sqrt() * (eff + 1.0) / (n as f64).sqrt())
}

/// `max{(kappa^2 + 1) / 3, 2 sqrt(kappa^2 + 1)}`.
pub fn horizon_constant(kappa: f64) -> f64 {
    let k2 = kappa * kappa + 1.0;
    (k2 / 3.0).max(2.0 * k2.sqrt())
}

/// Result of the sudden-stop search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Horizon {
    pub t: usize,
    /// Set when even `t = 1` violates the bound and the horizon defaulted to 1.
    pub defaulted: bool,
}

/// Largest `t` in `[1, n]` with `C1* U_{D,t,delta} <= 1/2`.
pub fn sudden_stop_horizon(
    spectrum: &Spectrum,
    n: usize,
    kappa: f64,
    delta: f64,
) -> Result<Horizon> {
    check_n(n)?;
    check_delta(delta)?;
    let c1 = horizon_constant(kappa);
    let mut last = None;
    for t in 1..=n {
        let eff = effective_dimension_unchecked(spectrum.eigenvalues(), n, 1.0 / t as f64);
        if c1 * u_from_dimension(n, t, delta, eff) <= 0.5 {
            last = Some(t);
        } else {
            // U is non-decreasing in t, so the first violation ends the search.
            break;
        }
    }
    Ok(match last {
        Some(t) => Horizon { t, defaulted: false },
        None => {
            log::warn!("sudden-stop bound fails already at t = 1 (n = {n}, delta = {delta}); using T = 1");
            Horizon { t: 1, defaulted: true }
        }
    })
}

/// Local empirical Rademacher complexity `[(1/n) sum_i min{sigma_i / n, eps^2}]^{1/2}`,
/// with `sigma_i` the eigenvalues of the kernel matrix, so `sigma_i / n` are the
/// eigenvalues of the normalized operator.
pub fn local_rademacher(spectrum: &Spectrum, n: usize, epsilon: f64) -> Result<f64> {
    check_n(n)?;
    if !(epsilon > 0.0) {
        return Err(invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let nf = n as f64;
    let e2 = epsilon * epsilon;
    let s: f64 = spectrum.eigenvalues().iter().map(|&s| (s / nf).min(e2)).sum();
    Ok((s / nf).sqrt())
}

/// Per-iteration spectral quantities for `t = 1..=t_max`, computed in one pass.
#[derive(Debug, Clone)]
pub struct SpectralTables {
    n: usize,
    delta: f64,
    kappa: f64,
    effective_dimension: Vec<f64>,
    w_values: Vec<f64>,
    u_values: Vec<f64>,
    horizon: Horizon,
}

impl SpectralTables {
    pub fn new(spectrum: &Spectrum, n: usize, t_max: usize, kappa: f64, delta: f64) -> Result<Self> {
        check_n(n)?;
        check_delta(delta)?;
        let mut effective_dimension = Vec::with_capacity(t_max);
        let mut w_values = Vec::with_capacity(t_max);
        let mut u_values = Vec::with_capacity(t_max);
        for t in 1..=t_max {
            let eff = effective_dimension_unchecked(spectrum.eigenvalues(), n, 1.0 / t as f64);
            effective_dimension.push(eff);
            w_values.push(w_from_dimension(n, t, eff));
            u_values.push(u_from_dimension(n, t, delta, eff));
        }
        let horizon = sudden_stop_horizon(spectrum, n, kappa, delta)?;
        Ok(SpectralTables {
            n,
            delta,
            kappa,
            effective_dimension,
            w_values,
            u_values,
            horizon,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn t_max(&self) -> usize {
        self.w_values.len()
    }

    /// `N_D(1/t)` for `t >= 1`.
    pub fn effective_dimension(&self, t: usize) -> f64 {
        self.effective_dimension[t - 1]
    }

    /// `W_{D,t}` for `t >= 1`.
    pub fn w(&self, t: usize) -> f64 {
        self.w_values[t - 1]
    }

    /// `U_{D,t,delta}` for `t >= 1`.
    pub fn u(&self, t: usize) -> f64 {
        self.u_values[t - 1]
    }

    pub fn w_values(&self) -> &[f64] {
        &self.w_values
    }

    pub fn u_values(&self) -> &[f64] {
        &self.u_values
    }

    pub fn sudden_stop(&self) -> Horizon {
        self.horizon
    }

    /// CSV with columns `t,N_D,W,U`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["t", "N_D", "W", "U"])
            .map_err(|e| KgdError::Io(e.to_string()))?;
        for t in 1..=self.t_max() {
            wtr.write_record([
                t.to_string(),
                self.effective_dimension(t).to_string(),
                self.w(t).to_string(),
                self.u(t).to_string(),
            ])
            .map_err(|e| KgdError::Io(e.to_string()))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{build_kernel_matrix, KernelSpec};
    use crate::testutil::random_psd;

    fn identity_spectrum(n: usize) -> Spectrum {
        let km = KernelMatrix::from_entries(DMatrix::identity(n, n), 1.0).unwrap();
        eigendecompose(&km).unwrap()
    }

    #[test]
    fn identity_and_diagonal_spectra() {
        assert_eq!(identity_spectrum(4).eigenvalues(), &[1.0; 4]);
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 3.0, 1.0]));
        let s = eigendecompose(&KernelMatrix::from_entries(d, 1.0).unwrap()).unwrap();
        let vals = s.eigenvalues();
        assert!((vals[0] - 3.0).abs() < 1e-14 && (vals[1] - 2.0).abs() < 1e-14);
        assert!((vals[2] - 1.0).abs() < 1e-14);
        // eigenvectors are signed axis vectors
        let v = s.eigenvectors().unwrap();
        assert!((v[(1, 0)].abs() - 1.0).abs() < 1e-14);
        assert!((v[(0, 1)].abs() - 1.0).abs() < 1e-14);
        assert!((v[(2, 2)].abs() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn reconstruction_of_random_psd() {
        let k = random_psd(10, 11);
        let s = eigendecompose(&KernelMatrix::from_entries(k.clone(), 1.0).unwrap()).unwrap();
        let err = (s.reconstruct().unwrap() - &k).norm();
        assert!(err <= 1e-8 * k.norm(), "reconstruction error {err}");
        assert!(s.eigenvalues().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, -0.5]));
        let err = eigendecompose(&KernelMatrix::from_entries(d, 1.0).unwrap()).unwrap_err();
        assert!(matches!(err, KgdError::Numeric(_)));
    }

    #[test]
    fn effective_dimension_examples() {
        let s = identity_spectrum(4);
        assert!((empirical_effective_dimension(&s, 4, 0.25).unwrap() - 2.0).abs() < 1e-15);
        assert!(empirical_effective_dimension(&s, 4, 1e12).unwrap() < 1e-6);
        assert!(empirical_effective_dimension(&s, 4, 0.0).is_err());
        assert!(empirical_effective_dimension(&s, 4, -1.0).is_err());
    }

    #[test]
    fn w_hand_value() {
        let s = identity_spectrum(4);
        assert!((variance_proxy_w(&s, 4, 1).unwrap() - 1.0).abs() < 1e-15);
        assert!(variance_proxy_w(&s, 4, 4).unwrap() >= variance_proxy_w(&s, 4, 1).unwrap());
        assert!(variance_proxy_w(&s, 4, 0).is_err());
    }

    #[test]
    fn u_examples() {
        let s = Spectrum::from_eigenvalues(vec![1.0; 1000]).unwrap();
        assert!(concentration_u(&s, 1_000_000, 1, 0.05).unwrap() < 0.01);
        let s = identity_spectrum(4);
        let loose = concentration_u(&s, 4, 2, 0.5).unwrap();
        let tight = concentration_u(&s, 4, 2, 0.05).unwrap();
        assert!(tight > loose);
        assert!(concentration_u(&s, 4, 2, 1.0).is_err());
        assert!(concentration_u(&s, 4, 2, 0.0).is_err());
    }

    #[test]
    fn horizon_on_zero_operator_and_on_sobolev_data() {
        // With N_D = 0 the bound only depends on t/n: U = a + sqrt(a) with
        // a = log(1 + 8 log(1280) sqrt(t/n)) t/n must stay below 1/(4 sqrt(2)).
        let n0 = 5000;
        let s = Spectrum::from_eigenvalues(vec![0.0; n0]).unwrap();
        let expected = (1..=n0)
            .take_while(|&t| {
                let r = t as f64 / n0 as f64;
                let a = (1.0 + 8.0 * 1280f64.ln() * r.sqrt()).ln() * r;
                2.0 * 2f64.sqrt() * (a + a.sqrt()) <= 0.5
            })
            .count();
        assert!(expected > 1);
        assert_eq!(sudden_stop_horizon(&s, n0, 1.0, 0.05).unwrap().t, expected);

        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let n = 2000;
        let x = DMatrix::from_fn(n, 1, |_, _| rng.random::<f64>());
        let spec = KernelSpec::sobolev_min();
        let km = build_kernel_matrix(&spec, &x).unwrap();
        let s = eigendecompose(&km).unwrap();
        let h = sudden_stop_horizon(&s, n, spec.kappa(), 0.05).unwrap();
        assert!(h.t < n);
        let loose = sudden_stop_horizon(&s, n, spec.kappa(), 0.5).unwrap();
        let tight = sudden_stop_horizon(&s, n, spec.kappa(), 0.01).unwrap();
        assert!(loose.t >= tight.t);
    }

    #[test]
    fn horizon_defaults_to_one_with_warning() {
        // tiny n makes U large already at t = 1
        let s = Spectrum::from_eigenvalues(vec![1.0, 1.0]).unwrap();
        let h = sudden_stop_horizon(&s, 2, 1.0, 0.05).unwrap();
        assert_eq!(h, Horizon { t: 1, defaulted: true });
    }

    #[test]
    fn rademacher_limits() {
        let k = random_psd(10, 2);
        let s = eigendecompose(&KernelMatrix::from_entries(k, 1.0).unwrap()).unwrap();
        let n = 10;
        let big = (s.max_eigenvalue() / n as f64).sqrt() * 2.0;
        let trace: f64 = s.eigenvalues().iter().sum::<f64>() / n as f64;
        assert!((local_rademacher(&s, n, big).unwrap() - (trace / n as f64).sqrt()).abs() < 1e-14);
        assert!(local_rademacher(&s, n, 1e-9).unwrap() <= 1e-9);
        let eps = 0.3;
        let brute: f64 = s
            .eigenvalues()
            .iter()
            .map(|v| if v / 10.0 < eps * eps { v / 10.0 } else { eps * eps })
            .sum();
        assert!((local_rademacher(&s, n, eps).unwrap() - (brute / 10.0).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn tables_are_consistent_with_scalar_functions() {
        let k = random_psd(12, 4);
        let s = eigendecompose(&KernelMatrix::from_entries(k, 1.0).unwrap()).unwrap();
        let tables = SpectralTables::new(&s, 12, 12, 1.0, 0.05).unwrap();
        for t in 1..=12 {
            assert_eq!(tables.w(t), variance_proxy_w(&s, 12, t).unwrap());
            assert_eq!(tables.u(t), concentration_u(&s, 12, t, 0.05).unwrap());
        }
        let mut buf = Vec::new();
        tables.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,N_D,W,U\n"));
        assert_eq!(text.lines().count(), 13);
    }
}
