//! Synthetic regression data, covariate-shifted test sets, a KDE-based KL
//! divergence estimate, and geomagnetic CSV ingestion.

use std::io::{Read, Write};
use std::num::NonZeroUsize;
use std::path::Path;

use gauss_quad::GaussLegendre;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, KgdError, Result};

/// Independent random substreams derived from one seed.
pub mod streams {
    pub const INPUTS: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const TEST_INPUTS: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const SUBSAMPLE: u64 = 5;
    pub const REAL_NOISE: u64 = 6;
}

/// A ChaCha generator for `(seed, stream)`; different streams never overlap.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// Tent function on `[0, 1]`.
    G1,
    /// Radial Wendland-type bump on `R^3`.
    G2,
}

impl Target {
    pub fn dimension(self) -> usize {
        match self {
            Target::G1 => 1,
            Target::G2 => 3,
        }
    }

    pub fn for_dimension(d: usize) -> Result<Self> {
        match d {
            1 => Ok(Target::G1),
            3 => Ok(Target::G2),
            _ => Err(invalid(format!("no target function for dimension {d}"))),
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            Target::G1 => "g1",
            Target::G2 => "g2",
        }
    }

    pub fn eval(self, x: &[f64]) -> f64 {
        match self {
            Target::G1 => target_g1(x[0]),
            Target::G2 => target_g2(x),
        }
    }
}

/// `x` on `[0, 0.5]`, `1 - x` beyond.
pub fn target_g1(x: f64) -> f64 {
    if !(0.0..=1.0).contains(&x) {
        log::debug!("g1 evaluated outside [0, 1] at {x}");
    }
    if x <= 0.5 {
        x
    } else {
        1.0 - x
    }
}

/// `(1 - r)^6 (35 r^2 + 18 r + 3)` for `r = ||x||_2 <= 1`, zero beyond.
pub fn target_g2(x: &[f64]) -> f64 {
    let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if r > 1.0 {
        return 0.0;
    }
    let s = 1.0 - r;
    let s3 = s * s * s;
    s3 * s3 * (35.0 * r * r + 18.0 * r + 3.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DatasetMeta {
    pub target_id: String,
    pub noise_std: f64,
    pub seed: u64,
    pub shift_b: Option<f64>,
}

/// Per-column affine map from `[min, max]` onto `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Normalization {
    pub fn fit(raw: &DMatrix<f64>) -> Self {
        let (min, max) = (0..raw.ncols())
            .map(|j| {
                let col = raw.column(j);
                (col.min(), col.max())
            })
            .unzip();
        Normalization { min, max }
    }

    /// Constant columns map to 0.
    pub fn apply(&self, raw: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(raw.nrows(), raw.ncols(), |i, j| {
            let span = self.max[j] - self.min[j];
            if span == 0.0 {
                0.0
            } else {
                2.0 * (raw[(i, j)] - self.min[j]) / span - 1.0
            }
        })
    }

    pub fn invert(&self, normalized: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(normalized.nrows(), normalized.ncols(), |i, j| {
            let span = self.max[j] - self.min[j];
            self.min[j] + (normalized[(i, j)] + 1.0) * 0.5 * span
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: DMatrix<f64>,
    pub outputs: DVector<f64>,
    pub clean_targets: Option<DVector<f64>>,
    pub meta: DatasetMeta,
    pub normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(inputs: DMatrix<f64>, outputs: DVector<f64>) -> Result<Self> {
        if inputs.nrows() != outputs.len() {
            return Err(invalid(format!(
                "{} input rows but {} outputs",
                inputs.nrows(),
                outputs.len()
            )));
        }
        Ok(Dataset {
            inputs,
            outputs,
            clean_targets: None,
            meta: DatasetMeta::default(),
            normalization: None,
        })
    }

    pub fn n(&self) -> usize {
        self.outputs.len()
    }

    pub fn d(&self) -> usize {
        self.inputs.ncols()
    }

    /// Rows picked by `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let inputs = self.inputs.select_rows(indices);
        let outputs = DVector::from_iterator(indices.len(), indices.iter().map(|&i| self.outputs[i]));
        let clean_targets = self
            .clean_targets
            .as_ref()
            .map(|c| DVector::from_iterator(indices.len(), indices.iter().map(|&i| c[i])));
        Dataset {
            inputs,
            outputs,
            clean_targets,
            meta: self.meta.clone(),
            normalization: self.normalization.clone(),
        }
    }

    /// Whether the empirical noise level lies within `3 sqrt(2) sigma / sqrt(n)` of
    /// the declared `noise_std`. `None` without clean targets.
    pub fn noise_within_band(&self) -> Option<bool> {
        let clean = self.clean_targets.as_ref()?;
        let n = self.n() as f64;
        let resid = &self.outputs - clean;
        let mean = resid.mean();
        let var = resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        let sigma = self.meta.noise_std;
        Some((var.sqrt() - sigma).abs() <= 3.0 * sigma / n.sqrt() * std::f64::consts::SQRT_2)
    }

    /// Writes `x1..xd,y,clean_target`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let io = |e: csv::Error| KgdError::Io(e.to_string());
        let mut header: Vec<String> = (1..=self.d()).map(|j| format!("x{j}")).collect();
        header.push("y".into());
        header.push("clean_target".into());
        wtr.write_record(&header).map_err(io)?;
        for i in 0..self.n() {
            let mut row: Vec<String> = (0..self.d()).map(|j| self.inputs[(i, j)].to_string()).collect();
            row.push(self.outputs[i].to_string());
            row.push(
                self.clean_targets
                    .as_ref()
                    .map(|c| c[i].to_string())
                    .unwrap_or_default(),
            );
            wtr.write_record(&row).map_err(io)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn uniform_inputs(rng: &mut ChaCha8Rng, n: usize, d: usize, upper: f64) -> DMatrix<f64> {
    // Row-major fill keeps a point's coordinates adjacent in the stream.
    let mut values = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        values.push(rng.random::<f64>() * upper);
    }
    DMatrix::from_row_slice(n, d, &values)
}

fn clean_values(target: Target, inputs: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(
        inputs.nrows(),
        (0..inputs.nrows()).map(|i| {
            let row: Vec<f64> = inputs.row(i).iter().copied().collect();
            target.eval(&row)
        }),
    )
}

/// `n` uniform inputs on the unit cube with outputs `g(x) + N(0, noise_std^2)`.
pub fn gen_dataset(target: Target, n: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(invalid("dataset size must be positive"));
    }
    if !(noise_std >= 0.0) {
        return Err(invalid(format!("noise level must be non-negative, got {noise_std}")));
    }
    let inputs = uniform_inputs(&mut stream_rng(seed, streams::INPUTS), n, target.dimension(), 1.0);
    let clean = clean_values(target, &inputs);
    let mut outputs = clean.clone();
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).map_err(|e| invalid(e.to_string()))?;
        let mut rng = stream_rng(seed, streams::NOISE);
        for v in outputs.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(Dataset {
        inputs,
        outputs,
        clean_targets: Some(clean),
        meta: DatasetMeta {
            target_id: target.id().into(),
            noise_std,
            seed,
            shift_b: None,
        },
        normalization: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftConfig {
    /// Test inputs are uniform on `[0, b]^d`.
    pub b: f64,
    #[serde(default = "default_bandwidth")]
    pub kde_bandwidth: f64,
    #[serde(default = "default_quadrature_order")]
    pub quadrature_order: usize,
}

fn default_bandwidth() -> f64 {
    0.05
}

fn default_quadrature_order() -> usize {
    64
}

impl ShiftConfig {
    pub fn new(b: f64) -> Result<Self> {
        let cfg = ShiftConfig {
            b,
            kde_bandwidth: default_bandwidth(),
            quadrature_order: default_quadrature_order(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.b >= 1.0 && self.b.is_finite()) {
            return Err(invalid(format!("shift b must be at least 1, got {}", self.b)));
        }
        if !(self.kde_bandwidth > 0.0) {
            return Err(invalid("KDE bandwidth must be positive"));
        }
        if self.quadrature_order == 0 {
            return Err(invalid("quadrature order must be positive"));
        }
        Ok(())
    }
}

/// Noise-free test set with inputs uniform on `[0, b]^d`.
pub fn gen_shifted_testset(target: Target, m: usize, shift: &ShiftConfig, seed: u64) -> Result<Dataset> {
    shift.validate()?;
    if m == 0 {
        return Err(invalid("test set size must be positive"));
    }
    let inputs = uniform_inputs(
        &mut stream_rng(seed, streams::TEST_INPUTS),
        m,
        target.dimension(),
        shift.b,
    );
    let clean = clean_values(target, &inputs);
    Ok(Dataset {
        inputs,
        outputs: clean.clone(),
        clean_targets: Some(clean),
        meta: DatasetMeta {
            target_id: target.id().into(),
            noise_std: 0.0,
            seed,
            shift_b: Some(shift.b),
        },
        normalization: None,
    })
}

/// Unshifted noise-free test set.
pub fn gen_testset(target: Target, m: usize, seed: u64) -> Result<Dataset> {
    gen_shifted_testset(target, m, &ShiftConfig::new(1.0)?, seed)
}

const DENSITY_FLOOR: f64 = 1e-12;

fn gaussian_kde(samples: &[f64], bandwidth: f64, x: f64) -> f64 {
    let norm = 1.0 / (samples.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    let inv = 1.0 / bandwidth;
    samples
        .iter()
        .map(|s| {
            let z = (x - s) * inv;
            (-0.5 * z * z).exp()
        })
        .sum::<f64>()
        * norm
}

/// `KL(P || Q) = int p ln(p / q)` between Gaussian KDEs of two 1-d samples,
/// integrated by Gauss-Legendre over `[min - 3h, max + 3h]` of the pooled samples.
pub fn kl_divergence(p_samples: &[f64], q_samples: &[f64], cfg: &ShiftConfig) -> Result<f64> {
    cfg.validate()?;
    if p_samples.len() < 2 || q_samples.len() < 2 {
        return Err(invalid("KL estimation needs at least two points in each sample"));
    }
    let h = cfg.kde_bandwidth;
    let (lo, hi) = p_samples
        .iter()
        .chain(q_samples)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(invalid("samples must be finite"));
    }
    let order = NonZeroUsize::new(cfg.quadrature_order).ok_or_else(|| invalid("quadrature order must be positive"))?;
    let rule = GaussLegendre::new(order);
    let value = rule.integrate(lo - 3.0 * h, hi + 3.0 * h, |x| {
        let p = gaussian_kde(p_samples, h, x).max(DENSITY_FLOOR);
        let q = gaussian_kde(q_samples, h, x).max(DENSITY_FLOOR);
        p * (p / q).ln()
    });
    Ok(value.max(0.0))
}

/// Value column of a geomagnetic CSV.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeoColumn {
    TotalIntensity,
    Declination,
}

impl GeoColumn {
    pub fn name(self) -> &'static str {
        match self {
            GeoColumn::TotalIntensity => "total_intensity",
            GeoColumn::Declination => "declination",
        }
    }
}

pub const GEO_INPUT_COLUMNS: [&str; 3] = ["phi", "theta", "h"];

/// Reads `phi,theta,h,<value>` rows and maps the coordinates onto `[-1, 1]^3` with a
/// min-max fit on this file. Outputs stay in native units.
pub fn load_geomagnetic_csv(path: impl AsRef<Path>, column: GeoColumn) -> Result<Dataset> {
    load_geomagnetic_with(std::fs::File::open(path)?, column, None)
}

/// Like [`load_geomagnetic_csv`] but reuses an existing normalization (for a test
/// set that must share the training map).
pub fn load_geomagnetic_csv_normalized(
    path: impl AsRef<Path>,
    column: GeoColumn,
    normalization: &Normalization,
) -> Result<Dataset> {
    load_geomagnetic_with(std::fs::File::open(path)?, column, Some(normalization))
}

pub fn load_geomagnetic_with<R: Read>(
    reader: R,
    column: GeoColumn,
    normalization: Option<&Normalization>,
) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| KgdError::Ingestion { row: 0, message: e.to_string() })?
        .clone();
    let find = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| KgdError::Ingestion {
            row: 0,
            message: format!("missing column `{name}`"),
        })
    };
    let mut idx = Vec::with_capacity(4);
    for name in GEO_INPUT_COLUMNS {
        idx.push(find(name)?);
    }
    idx.push(find(column.name())?);

    let mut coords = Vec::new();
    let mut values = Vec::new();
    for (row_no, record) in rdr.records().enumerate() {
        let row = row_no + 1;
        let record = record.map_err(|e| KgdError::Ingestion { row, message: e.to_string() })?;
        let mut parsed = [0.0; 4];
        for (slot, &col) in parsed.iter_mut().zip(&idx) {
            let field = record.get(col).ok_or_else(|| KgdError::Ingestion {
                row,
                message: format!("missing field `{}`", headers.get(col).unwrap_or("?")),
            })?;
            *slot = field.parse::<f64>().map_err(|e| KgdError::Ingestion {
                row,
                message: format!("cannot parse `{field}` in column `{}`: {e}", &headers[col]),
            })?;
            if !slot.is_finite() {
                return Err(KgdError::Ingestion {
                    row,
                    message: format!("non-finite value in column `{}`", &headers[col]),
                });
            }
        }
        coords.extend_from_slice(&parsed[..3]);
        values.push(parsed[3]);
    }
    if values.is_empty() {
        return Err(KgdError::Ingestion { row: 0, message: "no data rows".into() });
    }
    let raw = DMatrix::from_row_slice(values.len(), 3, &coords);
    let norm = normalization.cloned().unwrap_or_else(|| Normalization::fit(&raw));
    let inputs = norm.apply(&raw);
    let outputs = DVector::from_vec(values);
    Ok(Dataset {
        inputs,
        clean_targets: Some(outputs.clone()),
        outputs,
        meta: DatasetMeta {
            target_id: column.name().into(),
            noise_std: 0.0,
            seed: 0,
            shift_b: None,
        },
        normalization: Some(norm),
    })
}

/// Adds `N(0, sigma^2)` draws resampled until they fall inside
/// `[-truncation * sigma, truncation * sigma]`. The previous outputs become the
/// clean targets.
pub fn add_truncated_gaussian_noise(data: &Dataset, sigma: f64, truncation: f64, seed: u64) -> Result<Dataset> {
    if !(sigma >= 0.0) {
        return Err(invalid(format!("noise level must be non-negative, got {sigma}")));
    }
    if !(truncation > 0.0) {
        return Err(invalid(format!("truncation must be positive, got {truncation}")));
    }
    let mut out = data.clone();
    out.clean_targets = Some(data.clean_targets.clone().unwrap_or_else(|| data.outputs.clone()));
    out.meta.noise_std = sigma;
    out.meta.seed = seed;
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| invalid(e.to_string()))?;
    let bound = truncation * sigma;
    let mut rng = stream_rng(seed, streams::REAL_NOISE);
    for v in out.outputs.iter_mut() {
        let noise = loop {
            let draw: f64 = normal.sample(&mut rng);
            if draw.abs() <= bound {
                break draw;
            }
        };
        *v += noise;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g1_branches() {
        assert_eq!(target_g1(0.25), 0.25);
        assert_eq!(target_g1(0.5), 0.5);
        assert_eq!(target_g1(0.75), 0.25);
    }

    #[test]
    fn g2_values() {
        assert_eq!(target_g2(&[0.0, 0.0, 0.0]), 3.0);
        assert_eq!(target_g2(&[1.0, 0.0, 0.0]), 0.0);
        assert_eq!(target_g2(&[0.0, 0.6, 0.8]), 0.0);
        assert!((target_g2(&[0.3, 0.4, 0.0]) - 0.32421875).abs() < 1e-15);
        assert_eq!(target_g2(&[1.0, 1.0, 1.0]), 0.0);
    }

    #[test]
    fn g2_is_flat_at_the_support_boundary() {
        let h = 1e-4;
        let f = |r: f64| target_g2(&[r, 0.0, 0.0]);
        let deriv = (f(1.0) - f(1.0 - h)) / h;
        assert!(deriv.abs() <= 1e-5);
    }

    #[test]
    fn noiseless_and_deterministic_generation() {
        let d = gen_dataset(Target::G1, 50, 0.0, 3).unwrap();
        assert_eq!(&d.outputs, d.clean_targets.as_ref().unwrap());
        let a = gen_dataset(Target::G2, 40, 0.6, 9).unwrap();
        let b = gen_dataset(Target::G2, 40, 0.6, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.d(), 3);
        let c = gen_dataset(Target::G2, 40, 0.6, 10).unwrap();
        assert_ne!(a.outputs, c.outputs);
    }

    #[test]
    fn noise_level_large_sample() {
        let d = gen_dataset(Target::G1, 100_000, 0.6, 1).unwrap();
        let resid = &d.outputs - d.clean_targets.as_ref().unwrap();
        let mean = resid.mean();
        let sd = (resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (resid.len() - 1) as f64).sqrt();
        assert!((0.594..=0.606).contains(&sd), "sd = {sd}");
        assert_eq!(d.noise_within_band(), Some(true));
    }

    #[test]
    fn shifted_testset_properties() {
        let plain = gen_testset(Target::G1, 200, 4).unwrap();
        let b1 = gen_shifted_testset(Target::G1, 200, &ShiftConfig::new(1.0).unwrap(), 4).unwrap();
        assert_eq!(plain, b1);
        let cfg = ShiftConfig::new(1.5).unwrap();
        let t = gen_shifted_testset(Target::G1, 30_000, &cfg, 8).unwrap();
        let frac = t.inputs.iter().filter(|&&x| x > 1.0).count() as f64 / 30_000.0;
        assert!((frac - 1.0 / 3.0).abs() < 0.015, "fraction {frac}");
        assert_eq!(t.outputs, *t.clean_targets.as_ref().unwrap());
        assert_eq!(t, gen_shifted_testset(Target::G1, 30_000, &cfg, 8).unwrap());
        assert!(ShiftConfig::new(0.9).is_err());
    }

    #[test]
    fn kl_rejects_degenerate_samples() {
        let cfg = ShiftConfig::new(1.0).unwrap();
        assert!(kl_divergence(&[0.5], &[0.1, 0.2], &cfg).is_err());
        assert!(kl_divergence(&[0.1, 0.2], &[], &cfg).is_err());
    }

    #[test]
    fn normalization_hits_endpoints_and_inverts() {
        let csv = "phi,theta,h,total_intensity,declination\n\
                   -80,10,0,50000,-3\n\
                   20,-170,5,45000,2\n\
                   60,170,2.5,60000,10\n";
        let d = load_geomagnetic_with(csv.as_bytes(), GeoColumn::TotalIntensity, None).unwrap();
        for j in 0..3 {
            let col = d.inputs.column(j);
            assert_eq!(col.min(), -1.0);
            assert_eq!(col.max(), 1.0);
        }
        assert_eq!(d.outputs.as_slice(), &[50000.0, 45000.0, 60000.0]);
        let norm = d.normalization.as_ref().unwrap();
        let back = norm.invert(&d.inputs);
        let raw = DMatrix::from_row_slice(3, 3, &[-80.0, 10.0, 0.0, 20.0, -170.0, 5.0, 60.0, 170.0, 2.5]);
        assert!((back - raw).abs().max() <= 1e-12);
    }

    #[test]
    fn ingestion_errors_name_the_problem() {
        let missing = "phi,theta,total_intensity\n1,2,3\n";
        match load_geomagnetic_with(missing.as_bytes(), GeoColumn::TotalIntensity, None) {
            Err(KgdError::Ingestion { message, .. }) => assert!(message.contains("`h`")),
            other => panic!("unexpected {other:?}"),
        }
        let no_decl = "phi,theta,h,total_intensity\n1,2,3,4\n";
        match load_geomagnetic_with(no_decl.as_bytes(), GeoColumn::Declination, None) {
            Err(KgdError::Ingestion { message, .. }) => assert!(message.contains("declination")),
            other => panic!("unexpected {other:?}"),
        }
        let bad = "phi,theta,h,declination\n1,2,3,4\n1,x,3,4\n";
        match load_geomagnetic_with(bad.as_bytes(), GeoColumn::Declination, None) {
            Err(KgdError::Ingestion { row, .. }) => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_noise_contract() {
        let base = gen_dataset(Target::G1, 20_000, 0.0, 2).unwrap();
        assert_eq!(add_truncated_gaussian_noise(&base, 0.0, 2.0, 1).unwrap().outputs, base.outputs);
        let noisy = add_truncated_gaussian_noise(&base, 3.0, 2.0, 1).unwrap();
        let noise = &noisy.outputs - &base.outputs;
        assert!(noise.iter().all(|v| v.abs() <= 6.0));
        let sd = (noise.iter().map(|v| v * v).sum::<f64>() / noise.len() as f64).sqrt();
        let ratio = sd / 3.0;
        // truncated-normal variance at +-2 sigma: 1 - 2*2*phi(2)/(2*Phi(2) - 1) = 0.7737 => sd ratio 0.8796
        assert!((0.85..=0.95).contains(&ratio), "ratio {ratio}");
    }
}
