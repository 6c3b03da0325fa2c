//! Test-set error metrics and bias/variance diagnostics.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{invalid, KgdError, Result};
use crate::kernel::{build_kernel_matrix, cross_kernel, KernelSpec};
use crate::kgd::{run_kgd, KgdConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    /// Root mean squared deviation.
    pub l2: f64,
    /// Maximum absolute deviation.
    pub linf: f64,
    pub n_test: usize,
}

pub fn test_errors(predictions: &DVector<f64>, targets: &DVector<f64>) -> Result<ErrorReport> {
    if predictions.len() != targets.len() {
        return Err(invalid(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(invalid("error metrics need at least one test point"));
    }
    let diff = predictions - targets;
    Ok(ErrorReport {
        l2: (diff.norm_squared() / diff.len() as f64).sqrt(),
        linf: diff.amax(),
        n_test: diff.len(),
    })
}

fn rms(v: DVector<f64>) -> f64 {
    (v.norm_squared() / v.len() as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasVariancePoint {
    pub t: usize,
    pub bias: f64,
    pub variance: f64,
    pub total: f64,
}

/// Runs gradient descent on the noisy outputs and on the clean targets over the
/// same inputs. At each `t`, `bias` is the test RMS error of the clean-data
/// iterate, `variance` the test RMS distance between the two iterates and `total`
/// the test RMS error of the noisy-data iterate.
pub fn bias_variance_curves(
    data: &Dataset,
    spec: &KernelSpec,
    config: &KgdConfig,
    test: &Dataset,
) -> Result<Vec<BiasVariancePoint>> {
    let clean = data.clean_targets.as_ref().ok_or_else(|| {
        KgdError::Unsupported("bias/variance curves need clean training targets".into())
    })?;
    let truth = test.clean_targets.as_ref().unwrap_or(&test.outputs);
    let mut cfg = *config;
    cfg.retain_coefficients = true;
    let km = build_kernel_matrix(spec, &data.inputs)?;
    let noisy = run_kgd(&km, &data.outputs, &cfg)?;
    let noise_free = run_kgd(&km, clean, &cfg)?;
    let cross = cross_kernel(spec, &test.inputs, &data.inputs)?;
    let noisy_pred = noisy.predict_path(&cross)?;
    let clean_pred = noise_free.predict_path(&cross)?;
    Ok(curves_from_paths(&noisy_pred, &clean_pred, truth))
}

fn curves_from_paths(
    noisy: &DMatrix<f64>,
    clean: &DMatrix<f64>,
    truth: &DVector<f64>,
) -> Vec<BiasVariancePoint> {
    (0..noisy.ncols())
        .map(|t| {
            let f = noisy.column(t);
            let g = clean.column(t);
            BiasVariancePoint {
                t,
                bias: rms(g - truth),
                variance: rms(f - g),
                total: rms(f - truth),
            }
        })
        .collect()
}

/// CSV with columns `t,bias,variance,total`.
pub fn write_curves_csv<W: Write>(points: &[BiasVariancePoint], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    for p in points {
        wtr.serialize(p).map_err(|e| KgdError::Io(e.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_dataset, gen_testset, Target};

    #[test]
    fn error_report_examples() {
        let t = DVector::from_vec(vec![1.0, 2.0]);
        let r = test_errors(&t, &t).unwrap();
        assert_eq!((r.l2, r.linf), (0.0, 0.0));
        let p = DVector::from_vec(vec![4.0, 6.0]);
        let r = test_errors(&p, &t).unwrap();
        assert!((r.l2 - 12.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(r.linf, 4.0);
        let p = DVector::from_vec(vec![0.5, 1.5]);
        let r = test_errors(&p, &t).unwrap();
        assert_eq!(r.l2, 0.5);
        assert_eq!(r.linf, 0.5);
        assert!(test_errors(&DVector::zeros(3), &t).is_err());
    }

    #[test]
    fn zero_noise_has_no_variance() {
        let data = gen_dataset(Target::G1, 40, 0.0, 1).unwrap();
        let test = gen_testset(Target::G1, 30, 2).unwrap();
        let curves = bias_variance_curves(&data, &KernelSpec::sobolev_min(), &KgdConfig::new(0.5, 25), &test).unwrap();
        assert_eq!(curves.len(), 26);
        assert!(curves.iter().all(|p| p.variance == 0.0));
        let truth = test.clean_targets.clone().unwrap();
        assert!((curves[0].bias - rms(truth)).abs() < 1e-15);
    }

    #[test]
    fn triangle_inequality_and_missing_targets() {
        let data = gen_dataset(Target::G1, 60, 0.6, 3).unwrap();
        let test = gen_testset(Target::G1, 40, 4).unwrap();
        let spec = KernelSpec::sobolev_min();
        let cfg = KgdConfig::new(0.5, 60);
        let curves = bias_variance_curves(&data, &spec, &cfg, &test).unwrap();
        assert_eq!(curves[0].variance, 0.0);
        for p in &curves {
            assert!(p.total <= p.bias + p.variance + 1e-10);
        }
        let mut stripped = data.clone();
        stripped.clean_targets = None;
        assert!(matches!(
            bias_variance_curves(&stripped, &spec, &cfg, &test),
            Err(KgdError::Unsupported(_))
        ));
        let mut buf = Vec::new();
        write_curves_csv(&curves, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("t,bias,variance,total\n"));
    }
}
