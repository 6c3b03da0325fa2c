use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `A A^T / n` for a random `n x n` matrix `A`, mirrored to exact symmetry.
pub fn random_psd(n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
    let mut k = &a * a.transpose() / n as f64;
    for i in 0..n {
        for j in 0..i {
            k[(i, j)] = k[(j, i)];
        }
    }
    k
}

pub fn random_vector(n: usize, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DVector::from_fn(n, |_, _| rng.random::<f64>() * 2.0 - 1.0)
}
