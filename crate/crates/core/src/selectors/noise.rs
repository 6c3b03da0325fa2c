use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Result};

/// Difference-based noise estimate
/// `sigma^2 = 1/(2(n-1)) sum_i (y_(i+1) - y_(i))^2` with points ordered by input.
/// Multivariate inputs are ordered along a Z-order curve so that neighbours in the
/// ordering are mostly neighbours in space.
pub fn estimate_noise_std(inputs: &DMatrix<f64>, outputs: &DVector<f64>) -> Result<f64> {
    let n = outputs.len();
    if inputs.nrows() != n {
        return Err(invalid(format!("{} input rows but {n} outputs", inputs.nrows())));
    }
    if n < 2 {
        return Err(invalid("noise estimation needs at least two points"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if inputs.ncols() == 1 {
        order.sort_by(|&a, &b| inputs[(a, 0)].total_cmp(&inputs[(b, 0)]));
    } else {
        let keys = morton_keys(inputs);
        order.sort_by_key(|&i| keys[i]);
    }
    let sum: f64 = order
        .windows(2)
        .map(|w| (outputs[w[1]] - outputs[w[0]]).powi(2))
        .sum();
    Ok((sum / (2.0 * (n - 1) as f64)).sqrt())
}

fn morton_keys(inputs: &DMatrix<f64>) -> Vec<u128> {
    let d = inputs.ncols();
    let bits = (128 / d).clamp(1, 20) as u32;
    let levels = ((1u64 << bits) - 1) as f64;
    let ranges: Vec<(f64, f64)> = (0..d)
        .map(|j| {
            let col = inputs.column(j);
            (col.min(), col.max())
        })
        .collect();
    (0..inputs.nrows())
        .map(|i| {
            let cells: Vec<u64> = ranges
                .iter()
                .enumerate()
                .map(|(j, &(lo, hi))| {
                    let span = hi - lo;
                    let u = if span > 0.0 { (inputs[(i, j)] - lo) / span } else { 0.0 };
                    (u * levels).round() as u64
                })
                .collect();
            let mut key = 0u128;
            for b in (0..bits).rev() {
                for &cell in &cells {
                    key = (key << 1) | ((cell >> b) & 1) as u128;
                }
            }
            key
        })
        .collect()
}
