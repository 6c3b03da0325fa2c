//! Independent reference computations shared by the integration tests. Nothing
//! here calls into the library's numerical routines: iterates, norms and the
//! spectral scalars are recomputed from their definitions.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random PSD matrix `A A^T / r` of rank at most `r`, made exactly symmetric.
pub fn random_psd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let r = rng.random_range(1..=n);
    let a = DMatrix::from_fn(n, r, |_, _| rng.random_range(-1.0..1.0));
    let m = &a * a.transpose() / r as f64;
    symmetrize(m)
}

/// Gram matrix of `1 + min(x, x')` on random points of [0, 1].
pub fn random_min_kernel(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    DMatrix::from_fn(n, n, |i, j| 1.0 + x[i].min(x[j]))
}

pub fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    DMatrix::from_fn(n, n, |i, j| if i <= j { m[(i, j)] } else { m[(j, i)] })
}

pub fn random_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
}

pub fn eigenvalues_desc(k: &DMatrix<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = SymmetricEigen::new(k.clone()).eigenvalues.iter().map(|&s| s.max(0.0)).collect();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

/// Everything the selection rules look at, recomputed from scratch.
pub struct Reference {
    pub k: DMatrix<f64>,
    pub y: DVector<f64>,
    pub beta: f64,
    pub delta: f64,
    pub kappa: f64,
    pub t_max: usize,
    pub eig: Vec<f64>,
    /// `c_0 ..= c_{t_max + 1}`.
    pub coeffs: Vec<DVector<f64>>,
}

impl Reference {
    pub fn new(k: DMatrix<f64>, y: DVector<f64>, beta: f64, t_max: usize, kappa: f64) -> Self {
        let n = y.len();
        let mut coeffs = vec![DVector::zeros(n)];
        for _ in 0..=t_max {
            let c = coeffs.last().unwrap();
            let next = c - (&k * c - &y) * (beta / n as f64);
            coeffs.push(next);
        }
        let eig = eigenvalues_desc(&k);
        Reference {
            k,
            y,
            beta,
            delta: 0.05,
            kappa,
            t_max,
            eig,
            coeffs,
        }
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn nf(&self) -> f64 {
        self.n() as f64
    }

    pub fn norm_d(&self, dc: &DVector<f64>) -> f64 {
        (&self.k * dc).norm() / self.nf().sqrt()
    }

    pub fn norm_k(&self, dc: &DVector<f64>) -> f64 {
        dc.dot(&(&self.k * dc)).max(0.0).sqrt()
    }

    pub fn diff(&self, a: usize, b: usize) -> DVector<f64> {
        &self.coeffs[b] - &self.coeffs[a]
    }

    pub fn eff_dim(&self, t: usize) -> f64 {
        let shift = self.nf() / t as f64;
        self.eig.iter().map(|s| s / (s + shift)).sum()
    }

    pub fn w(&self, t: usize) -> f64 {
        let (n, tf) = (self.nf(), t as f64);
        tf.sqrt() / n + self.eff_dim(t).max(1.0).sqrt() * (1.0 + (tf / n).sqrt()) / n.sqrt()
    }

    pub fn residual(&self, t: usize) -> f64 {
        (&self.y - &self.k * &self.coeffs[t]).norm()
    }

    pub fn bsp_lhs(&self, t: usize) -> f64 {
        let dc = self.diff(t, t + 1);
        t as f64 * self.norm_d(&dc) + (t as f64).sqrt() * self.norm_k(&dc)
    }

    pub fn bsp(&self, c: f64, horizon: usize) -> usize {
        (1..=horizon)
            .filter(|&t| self.bsp_lhs(t) >= c * self.w(t))
            .max()
            .unwrap_or(horizon)
    }

    pub fn bp(&self, c: f64, end: usize) -> usize {
        let factor = (16.0 / self.delta).ln().powi(4);
        (0..=end)
            .find(|&t| ((t + 1)..=end).all(|tp| self.norm_d(&self.diff(t, tp)) <= c * self.w(tp) * factor))
            .unwrap()
    }

    pub fn lp_grid(&self, q: f64) -> Vec<usize> {
        let k2 = self.kappa * self.kappa;
        let n = self.nf();
        let l = 2.0 * (8.0 * n.ln() / (self.delta * q.ln())).ln();
        let cap1 = n / (100.0 * k2 * l * l);
        let mut out: Vec<usize> = Vec::new();
        for i in 0..200 {
            let t = (q.powi(i) / k2).ceil().max(1.0) as usize;
            if t > self.t_max {
                break;
            }
            if out.contains(&t) {
                continue;
            }
            let cap2 = n / (3.0 * k2 * (self.eff_dim(t) + 1.0));
            if t as f64 <= cap1.max(cap2) {
                out.push(t);
            }
        }
        out
    }

    pub fn lp(&self, c: f64, q: f64) -> Option<usize> {
        let grid = self.lp_grid(q);
        let stat = |t: usize, tp: usize| {
            let dc = self.diff(t, tp);
            (self.norm_d(&dc).powi(2) + self.norm_k(&dc).powi(2) / tp as f64).sqrt()
        };
        let proxy = |t: usize| (t as f64).sqrt() * (self.eff_dim(t) + 1.0) / self.nf().sqrt();
        grid.iter()
            .copied()
            .find(|&t| grid.iter().filter(|&&tp| tp > t).all(|&tp| stat(t, tp) <= c * proxy(tp)))
    }

    pub fn rademacher(&self, eps: f64) -> f64 {
        let n = self.nf();
        (self.eig.iter().map(|s| (s / n).min(eps * eps)).sum::<f64>() / n).sqrt()
    }

    pub fn esr(&self, c: f64, sigma: f64) -> usize {
        (1..=self.t_max)
            .find(|&t| {
                let eta = t as f64 * self.beta;
                self.rademacher(1.0 / eta.sqrt()) > c / (sigma * eta)
            })
            .unwrap_or(self.t_max)
    }

    pub fn dp(&self, c: f64, sigma: f64) -> usize {
        (0..=self.t_max)
            .find(|&t| self.residual(t) <= c * sigma * self.nf().sqrt())
            .unwrap_or(self.t_max)
    }

    fn penalised(&self, weight: f64) -> usize {
        let mut best = 1;
        let mut best_val = f64::INFINITY;
        for t in 1..=self.t_max {
            let v = self.residual(t) + weight * self.w(t);
            if v < best_val {
                best = t;
                best_val = v;
            }
        }
        best
    }

    pub fn aic(&self, c: f64) -> usize {
        self.penalised(c)
    }

    pub fn bic(&self, c: f64) -> usize {
        self.penalised(c * self.nf().ln())
    }
}

/// Random test system: PSD or min-kernel Gram matrix, outputs in [-1, 1] and an
/// admissible step size.
pub fn random_reference(seed: u64, max_n: usize, max_t: usize) -> Reference {
    let mut r = rng(seed);
    let n = r.random_range(4..=max_n);
    let (k, kappa) = if r.random_bool(0.5) {
        (random_psd(&mut r, n), 1.0)
    } else {
        (random_min_kernel(&mut r, n), 2f64.sqrt())
    };
    let y = random_vector(&mut r, n);
    let top = eigenvalues_desc(&k)[0];
    let beta = r.random_range(0.2..1.9) * n as f64 / top;
    let t_max = r.random_range(2..=max_t);
    Reference::new(k, y, beta, t_max, kappa)
}
