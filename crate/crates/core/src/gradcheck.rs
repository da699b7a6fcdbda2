//! Central finite-difference oracle for analytic gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest relative error found in one named parameter block.
#[derive(Clone, Debug)]
pub struct BlockReport {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub blocks: Vec<BlockReport>,
    pub step: f64,
    pub tol: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }
}

/// Errors smaller than this in absolute terms are measured against it
/// instead of the (vanishing) gradient magnitude.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares `analytic` gradients against `(f(θ+h) − f(θ−h)) / 2h` for every
/// scalar of every block in `params`.
///
/// `f` must be deterministic; the base point is evaluated twice and any
/// difference is reported as a contract error.
pub fn finite_diff_check<F>(
    params: &mut [(String, Tensor)],
    analytic: &[Vec<f64>],
    mut f: F,
    h: f64,
    tol: f64,
) -> Result<FdReport>
where
    F: FnMut(&[(String, Tensor)]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    if analytic.len() != params.len() {
        return Err(Error::dim("one analytic gradient per parameter block required"));
    }
    let a = f(params)?;
    let b = f(params)?;
    if a.to_bits() != b.to_bits() {
        return Err(Error::contract(format!(
            "objective is non-deterministic: {a} vs {b}"
        )));
    }
    let mut blocks = Vec::with_capacity(params.len());
    for bi in 0..params.len() {
        if analytic[bi].len() != params[bi].1.len() {
            return Err(Error::dim(format!(
                "gradient for block `{}` has wrong length",
                params[bi].0
            )));
        }
        let mut worst = 0.0;
        let mut worst_index = 0;
        for i in 0..params[bi].1.len() {
            let orig = params[bi].1.data()[i];
            params[bi].1.data_mut()[i] = orig + h;
            let up = f(params)?;
            params[bi].1.data_mut()[i] = orig - h;
            let down = f(params)?;
            params[bi].1.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(analytic[bi][i], numeric);
            if err > worst || err.is_nan() {
                worst = err;
                worst_index = i;
            }
        }
        blocks.push(BlockReport {
            name: params[bi].0.clone(),
            max_rel_err: worst,
            worst_index,
            passed: worst < tol,
        });
    }
    Ok(FdReport {
        blocks,
        step: h,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn quadratic(params: &[(String, Tensor)]) -> Result<f64> {
        // f(x) = Σ_i (i+1) x_i² + x_0 x_1
        let x = params[0].1.data();
        let mut s = x[0] * x[1];
        for (i, v) in x.iter().enumerate() {
            s += (i as f64 + 1.0) * v * v;
        }
        Ok(s)
    }

    #[test]
    fn quadratic_form_is_exact() {
        let mut params = vec![("x".to_string(), Tensor::vector(&[0.3, -1.2, 2.0]))];
        let x = params[0].1.data().to_vec();
        let grad = vec![2.0 * x[0] + x[1], 4.0 * x[1] + x[0], 6.0 * x[2]];
        let rep = finite_diff_check(&mut params, &[grad], quadratic, 1e-5, 1e-8).unwrap();
        assert!(rep.passed(), "{rep:?}");
        assert!(rep.max_rel_err() < 1e-8);
    }

    #[test]
    fn wrong_backward_rule_is_reported() {
        let mut params = vec![("x".to_string(), Tensor::vector(&[0.3, -1.2, 2.0]))];
        // Drops the cross term and the factor 2: a deliberately broken rule.
        let x = params[0].1.data().to_vec();
        let grad = vec![x[0], 2.0 * x[1], 3.0 * x[2]];
        let rep = finite_diff_check(&mut params, &[grad], quadratic, 1e-5, 1e-4).unwrap();
        assert!(!rep.passed());
    }

    #[test]
    fn nondeterminism_is_detected() {
        let mut params = vec![("x".to_string(), Tensor::vector(&[1.0]))];
        let mut calls = 0.0;
        let res = finite_diff_check(
            &mut params,
            &[vec![0.0]],
            |_| {
                calls += 1.0;
                Ok(calls)
            },
            1e-5,
            1e-4,
        );
        assert!(matches!(res, Err(Error::Contract(_))));
    }

    /// Evaluates a random expression over the tape ops and returns loss + grads.
    fn random_dag(params: &[(String, Tensor)], seed: u64) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let vars: Vec<_> = params.iter().map(|(_, t)| tape.param(t)).collect();
        // Every param is a 3×4 matrix; build a chain of random ops over them.
        let mut pool = vars.clone();
        for _ in 0..8 {
            let a = pool[rng.gen_range(0..pool.len())];
            let b = pool[rng.gen_range(0..pool.len())];
            let next = match rng.gen_range(0..9) {
                0 => tape.add(a, b)?,
                1 => tape.sub(a, b)?,
                2 => tape.mul(a, b)?,
                3 => tape.sigmoid(a),
                4 => {
                    let sq = tape.mul(a, a)?;
                    let pos = tape.add_scalar(sq, 0.5);
                    tape.log(pos)?
                }
                5 => tape.softmax_rows(a, rng.gen_bool(0.5)),
                6 => {
                    let bt = tape.matmul_bt(a, b)?;
                    let w = tape.slice_cols(bt, 0, 3)?;
                    let ab = tape.matmul(w, b)?;
                    tape.scale(ab, 0.3)
                }
                7 => {
                    let m = tape.mean_axis(a, 0)?;
                    let sq = tape.mul(m, m)?;
                    let pos = tape.add_scalar(sq, 1.0);
                    let r = tape.recip(pos)?;
                    tape.sub(b, r)?
                }
                _ => {
                    let c = tape.concat(&[a, b])?;
                    let l = tape.slice_cols(c, 2, 4)?;
                    let t = tape.transpose(l)?;
                    tape.transpose(t)?
                }
            };
            pool.push(next);
        }
        let last = *pool.last().unwrap();
        let w = tape.mul(last, vars[0])?;
        let loss = tape.sum(w);
        let value = tape.value(loss).data()[0];
        let grads = tape.backward(loss)?;
        Ok((value, vars.iter().map(|v| grads.wrt(*v)).collect()))
    }

    #[test]
    fn random_dags_match_central_differences() {
        for seed in 0..40u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let mut params: Vec<(String, Tensor)> = (0..3)
                .map(|i| {
                    let data = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    (format!("p{i}"), Tensor::from_vec(&[3, 4], data).unwrap())
                })
                .collect();
            let (_, analytic) = random_dag(&params, seed).unwrap();
            let rep = finite_diff_check(
                &mut params,
                &analytic,
                |p| random_dag(p, seed).map(|(v, _)| v),
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(rep.passed(), "seed {seed}: {rep:?}");
        }
    }

    #[test]
    fn layer_norm_gather_and_stack_gradients() {
        let f = |p: &[(String, Tensor)]| -> Result<(f64, Vec<Vec<f64>>)> {
            let mut tape = Tape::new();
            let x = tape.param(&p[0].1);
            let g = tape.param(&p[1].1);
            let b = tape.param(&p[2].1);
            let ln = tape.layer_norm(x, g, b, 1e-5)?;
            let r0 = tape.slice_rows(ln, 0, 1)?;
            let r2 = tape.slice_rows(ln, 2, 1)?;
            let st = tape.stack_rows(&[r2, r0, r2])?;
            let sm = tape.softmax_rows(st, false);
            let picked = tape.gather(sm, &[1, 0, 3])?;
            let lg = tape.log(picked)?;
            let loss = tape.sum(lg);
            let v = tape.value(loss).data()[0];
            let gr = tape.backward(loss)?;
            Ok((v, vec![gr.wrt(x), gr.wrt(g), gr.wrt(b)]))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = vec![
            (
                "x".to_string(),
                Tensor::from_vec(&[3, 4], (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect())
                    .unwrap(),
            ),
            ("gamma".to_string(), Tensor::vector(&[1.0, 0.5, -0.7, 1.3])),
            ("beta".to_string(), Tensor::vector(&[0.1, 0.0, -0.2, 0.3])),
        ];
        let (_, analytic) = f(&params).unwrap();
        let rep =
            finite_diff_check(&mut params, &analytic, |p| f(p).map(|r| r.0), 1e-5, 1e-4).unwrap();
        assert!(rep.passed(), "{rep:?}");
    }
}
