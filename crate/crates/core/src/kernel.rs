//! Mercer kernels and Gram matrix construction.

use nalgebra::{DMatrix, DVectorView};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Kernel family. `SobolevMin` is `1 + min(x, x')` on `[0, 1]`, `Wendland3d` is the
/// compactly supported `(1 - r)^4 (4r + 1)` on `R^3`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "family")]
pub enum KernelFamily {
    SobolevMin,
    Wendland3d,
    Gaussian { width: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub dimension: usize,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, dimension: usize) -> Result<Self> {
        let spec = KernelSpec { family, dimension };
        spec.validate()?;
        Ok(spec)
    }

    pub fn sobolev_min() -> Self {
        KernelSpec {
            family: KernelFamily::SobolevMin,
            dimension: 1,
        }
    }

    pub fn wendland_3d() -> Self {
        KernelSpec {
            family: KernelFamily::Wendland3d,
            dimension: 3,
        }
    }

    pub fn gaussian(width: f64, dimension: usize) -> Result<Self> {
        Self::new(KernelFamily::Gaussian { width }, dimension)
    }

    /// The kernel the benchmark uses for a given input dimension.
    pub fn default_for_dimension(dimension: usize) -> Result<Self> {
        match dimension {
            1 => Ok(Self::sobolev_min()),
            3 => Ok(Self::wendland_3d()),
            d => Err(invalid(format!(
                "no default kernel for dimension {d} (supported: 1, 3)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimension == 0 {
            return Err(invalid("kernel dimension must be positive"));
        }
        match self.family {
            KernelFamily::SobolevMin if self.dimension != 1 => Err(invalid(format!(
                "sobolev_min kernel requires dimension 1, got {}",
                self.dimension
            ))),
            KernelFamily::Wendland3d if self.dimension != 3 => Err(invalid(format!(
                "wendland_3d kernel requires dimension 3, got {}",
                self.dimension
            ))),
            KernelFamily::Gaussian { width } if !(width > 0.0 && width.is_finite()) => {
                Err(invalid(format!("gaussian width must be positive, got {width}")))
            }
            _ => Ok(()),
        }
    }

    /// `sqrt(sup_x K(x, x))` over the family's nominal domain.
    pub fn kappa(&self) -> f64 {
        match self.family {
            KernelFamily::SobolevMin => std::f64::consts::SQRT_2,
            KernelFamily::Wendland3d | KernelFamily::Gaussian { .. } => 1.0,
        }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if x.len() != self.dimension || y.len() != self.dimension {
            return Err(invalid(format!(
                "kernel expects vectors of length {}, got {} and {}",
                self.dimension,
                x.len(),
                y.len()
            )));
        }
        Ok(self.eval_unchecked(x.iter().copied(), y.iter().copied()))
    }

    // Callers guarantee both iterators yield `dimension` items.
    fn eval_unchecked(
        &self,
        x: impl Iterator<Item = f64>,
        y: impl Iterator<Item = f64>,
    ) -> f64 {
        match self.family {
            KernelFamily::SobolevMin => {
                let (mut a, mut b) = (0.0, 0.0);
                for (xi, yi) in x.zip(y) {
                    a = xi;
                    b = yi;
                }
                1.0 + a.min(b)
            }
            KernelFamily::Wendland3d => {
                let r = x.zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                wendland(r)
            }
            KernelFamily::Gaussian { width } => {
                let sq = x.zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                (-sq / (2.0 * width * width)).exp()
            }
        }
    }

    fn eval_rows(&self, a: DVectorView<'_, f64>, b: DVectorView<'_, f64>) -> f64 {
        self.eval_unchecked(a.iter().copied(), b.iter().copied())
    }
}

/// `h(u) = (1 - u)^4 (4u + 1)` on `[0, 1]`, zero beyond.
pub fn wendland(u: f64) -> f64 {
    if u > 1.0 {
        0.0
    } else {
        let s = 1.0 - u;
        let s2 = s * s;
        s2 * s2 * (4.0 * u + 1.0)
    }
}

/// Free-function form of [`KernelSpec::eval`].
pub fn eval_kernel(spec: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    spec.eval(x, y)
}

/// Symmetric Gram matrix over training inputs together with the family's `kappa`.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    entries: DMatrix<f64>,
    kappa: f64,
}

impl KernelMatrix {
    /// Wraps an explicit symmetric matrix. Used for synthetic systems in tests and
    /// by callers that assemble Gram matrices themselves.
    pub fn from_entries(entries: DMatrix<f64>, kappa: f64) -> Result<Self> {
        if entries.nrows() != entries.ncols() {
            return Err(invalid(format!(
                "kernel matrix must be square, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        if entries.nrows() == 0 {
            return Err(invalid("kernel matrix must be non-empty"));
        }
        let n = entries.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                if entries[(i, j)] != entries[(j, i)] {
                    return Err(invalid(format!(
                        "kernel matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(KernelMatrix { entries, kappa })
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }
}

fn check_inputs(spec: &KernelSpec, inputs: &DMatrix<f64>, what: &str) -> Result<()> {
    if inputs.ncols() != spec.dimension {
        return Err(invalid(format!(
            "{what} have {} columns but the kernel has dimension {}",
            inputs.ncols(),
            spec.dimension
        )));
    }
    Ok(())
}

/// Builds `K_ij = K(x_i, x_j)` for the rows of `inputs`. Only the upper triangle is
/// evaluated; the lower triangle is a mirror so the result is exactly symmetric.
pub fn build_kernel_matrix(spec: &KernelSpec, inputs: &DMatrix<f64>) -> Result<KernelMatrix> {
    spec.validate()?;
    check_inputs(spec, inputs, "inputs")?;
    let n = inputs.nrows();
    if n == 0 {
        return Err(invalid("cannot build a kernel matrix from zero inputs"));
    }
    let rows: Vec<_> = (0..n).map(|i| inputs.row(i).transpose()).collect();
    let mut entries = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = spec.eval_rows(rows[i].as_view(), rows[j].as_view());
            entries[(i, j)] = v;
            entries[(j, i)] = v;
        }
    }
    Ok(KernelMatrix {
        entries,
        kappa: spec.kappa(),
    })
}

/// Rectangular cross-kernel `K(query_j, train_i)` with shape `m x n`.
pub fn cross_kernel(
    spec: &KernelSpec,
    query: &DMatrix<f64>,
    train: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    spec.validate()?;
    check_inputs(spec, query, "query inputs")?;
    check_inputs(spec, train, "training inputs")?;
    let train_rows: Vec<_> = (0..train.nrows()).map(|i| train.row(i).transpose()).collect();
    let mut out = DMatrix::zeros(query.nrows(), train.nrows());
    for j in 0..query.nrows() {
        let q = query.row(j).transpose();
        for (i, t) in train_rows.iter().enumerate() {
            out[(j, i)] = spec.eval_rows(q.as_view(), t.as_view());
        }
    }
    Ok(out)
}
