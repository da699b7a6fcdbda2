//! Operator 2-norms by power iteration.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const POWER_TOL: f64 = 1e-6;
pub const POWER_MAX_ITER: usize = 10_000;

/// Largest singular value of a `[rows × cols]` matrix given as raw data.
pub fn spectral_norm_raw(data: &[f64], rows: usize, cols: usize) -> Result<f64> {
    if rows == 0 || cols == 0 || data.iter().all(|v| *v == 0.0) {
        return Ok(0.0);
    }
    // Deterministic start with no symmetry that could be orthogonal to the
    // leading right singular vector of structured matrices.
    let mut v: Vec<f64> = (0..cols).map(|i| 1.0 + 0.37 * ((i as f64) * 1.618).sin()).collect();
    normalize(&mut v);
    let mut u = vec![0.0; rows];
    let mut prev = 0.0;
    for _ in 0..POWER_MAX_ITER {
        for (r, ur) in u.iter_mut().enumerate() {
            *ur = (0..cols).map(|c| data[r * cols + c] * v[c]).sum();
        }
        let mut next = vec![0.0; cols];
        for r in 0..rows {
            let ur = u[r];
            for c in 0..cols {
                next[c] += data[r * cols + c] * ur;
            }
        }
        // ‖WᵀW v‖ with unit v converges to σ_max² from below.
        let norm = normalize(&mut next);
        let est = norm.sqrt();
        if norm == 0.0 {
            // v fell into the null space; restart along a basis vector.
            return Ok(max_column_norm(data, rows, cols).max(prev));
        }
        v = next;
        if (est - prev).abs() <= POWER_TOL * est {
            return Ok(est);
        }
        prev = est;
    }
    Err(Error::Numerical(format!(
        "power iteration did not converge in {POWER_MAX_ITER} steps ({rows}×{cols})"
    )))
}

pub fn spectral_norm(w: &Tensor) -> Result<f64> {
    match w.shape() {
        [_] => Ok(w.data().iter().map(|v| v * v).sum::<f64>().sqrt()),
        [r, c] => spectral_norm_raw(w.data(), *r, *c),
        s => Err(Error::dim(format!("spectral norm of a {s:?} tensor"))),
    }
}

/// Norm of the column block `start..start+len` of a matrix.
pub fn spectral_norm_cols(w: &Tensor, start: usize, len: usize) -> Result<f64> {
    let (rows, cols) = (w.rows(), w.cols());
    if start + len > cols {
        return Err(Error::dim(format!("column block {start}+{len} exceeds {cols}")));
    }
    let mut sub = Vec::with_capacity(rows * len);
    for r in 0..rows {
        sub.extend_from_slice(&w.data()[r * cols + start..r * cols + start + len]);
    }
    spectral_norm_raw(&sub, rows, len)
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn max_column_norm(data: &[f64], rows: usize, cols: usize) -> f64 {
    (0..cols)
        .map(|c| (0..rows).map(|r| data[r * cols + c].powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_and_diagonal() {
        assert_eq!(spectral_norm(&Tensor::zeros(&[3, 4])).unwrap(), 0.0);
        let mut d = Tensor::zeros(&[3, 3]);
        for (i, v) in [0.5, -2.5, 1.0].iter().enumerate() {
            d.data_mut()[i * 3 + i] = *v;
        }
        assert!((spectral_norm(&d).unwrap() - 2.5).abs() < 1e-6 * 2.5);
    }

    #[test]
    fn matches_svd_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let (r, c) = (rng.gen_range(1..20), rng.gen_range(1..20));
            let data: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let m = nalgebra::DMatrix::from_row_slice(r, c, &data);
            let want = m.singular_values().max();
            let got = spectral_norm_raw(&data, r, c).unwrap();
            assert!((got - want).abs() <= 1e-4 * want, "{got} vs {want}");
        }
    }

    #[test]
    fn homogeneous_in_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = Tensor::from_vec(&[5, 7], (0..35).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let a = spectral_norm(&t).unwrap();
        let b = spectral_norm(&t.map(|v| 3.0 * v)).unwrap();
        assert!((b - 3.0 * a).abs() < 1e-9 * b);
    }
}
