//! Training objective: per-step cross-entropy plus a temporal KL smoothness
//! term between adjacent predictions.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tfl::ProbabilityVector;

pub const LOG_EPS: f64 = 1e-12;
pub const DEFAULT_LAMBDA: f64 = 0.1;

pub fn cross_entropy(y_hat: &ProbabilityVector, y: usize) -> Result<f64> {
    let p = y_hat
        .as_slice()
        .get(y)
        .ok_or_else(|| Error::contract(format!("label {y} out of range for K = {}", y_hat.len())))?;
    Ok(-(p + LOG_EPS).ln())
}

pub fn kl_divergence(p: &ProbabilityVector, q: &ProbabilityVector) -> f64 {
    p.as_slice()
        .iter()
        .zip(q.as_slice())
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * ((pi + LOG_EPS) / (qi + LOG_EPS)).ln())
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub kl: f64,
    pub lambda: f64,
}

/// The loss as tape nodes plus its decomposition.
#[derive(Clone, Copy, Debug)]
pub struct SequenceLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    /// Treat `ŷ_{t-1}` as a constant inside the KL term.
    pub stop_grad_prev: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: DEFAULT_LAMBDA,
            stop_grad_prev: false,
        }
    }
}

/// `(1/T) Σ CE(ŷ_t, y_t) + λ (1/T) Σ_{t≥2} KL(ŷ_{t-1} ‖ ŷ_t)` over `y_hat [T×K]`.
pub fn sequence_loss_tape(
    tape: &mut Tape,
    y_hat: Var,
    labels: &[usize],
    cfg: LossConfig,
) -> Result<SequenceLoss> {
    let (t_len, k) = match tape.shape(y_hat) {
        [t, k] => (*t, *k),
        s => return Err(Error::dim(format!("predictions must be [T×K], got {s:?}"))),
    };
    if t_len == 0 {
        return Err(Error::contract("sequence loss needs T ≥ 1"));
    }
    if labels.len() != t_len {
        return Err(Error::dim(format!(
            "{} labels for {t_len} predictions",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::contract(format!("label {bad} out of range for K = {k}")));
    }
    let inv_t = 1.0 / t_len as f64;

    let picked = tape.gather(y_hat, labels)?;
    let shifted = tape.add_scalar(picked, LOG_EPS);
    let logp = tape.log(shifted)?;
    let ce_sum = tape.sum(logp);
    let ce = tape.scale(ce_sum, -inv_t);

    let (total, kl_value) = if t_len > 1 {
        let prev = tape.slice_rows(y_hat, 0, t_len - 1)?;
        let prev = if cfg.stop_grad_prev {
            let v = tape.value(prev).clone();
            tape.constant(v)
        } else {
            prev
        };
        let next = tape.slice_rows(y_hat, 1, t_len - 1)?;
        let p_eps = tape.add_scalar(prev, LOG_EPS);
        let q_eps = tape.add_scalar(next, LOG_EPS);
        let lp = tape.log(p_eps)?;
        let lq = tape.log(q_eps)?;
        let diff = tape.sub(lp, lq)?;
        let terms = tape.mul(prev, diff)?;
        let kl_sum = tape.sum(terms);
        let kl = tape.scale(kl_sum, inv_t);
        let weighted = tape.scale(kl, cfg.lambda);
        (tape.add(ce, weighted)?, tape.value(kl).data()[0])
    } else {
        (ce, 0.0)
    };
    let ce_value = tape.value(ce).data()[0];
    Ok(SequenceLoss {
        total,
        breakdown: LossBreakdown {
            total: tape.value(total).data()[0],
            ce: ce_value,
            kl: kl_value,
            lambda: cfg.lambda,
        },
    })
}

/// Value-level loss over already computed predictions.
pub fn sequence_loss(
    y_hat: &[ProbabilityVector],
    labels: &[usize],
    lambda: f64,
) -> Result<LossBreakdown> {
    if y_hat.is_empty() {
        return Err(Error::contract("sequence loss needs T ≥ 1"));
    }
    let k = y_hat[0].len();
    let data: Vec<f64> = y_hat.iter().flat_map(|p| p.as_slice().to_vec()).collect();
    let mut tape = Tape::new();
    let y = tape.constant(Tensor::from_vec(&[y_hat.len(), k], data)?);
    let cfg = LossConfig {
        lambda,
        stop_grad_prev: false,
    };
    Ok(sequence_loss_tape(&mut tape, y, labels, cfg)?.breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pv(v: &[f64]) -> ProbabilityVector {
        ProbabilityVector::new(v.to_vec()).unwrap()
    }

    fn random_simplex(k: usize, rng: &mut ChaCha8Rng) -> ProbabilityVector {
        // occasional exact zeros exercise the 0·log 0 convention
        let raw: Vec<f64> = (0..k)
            .map(|_| if rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(0.0..1.0) })
            .collect();
        let s: f64 = raw.iter().sum();
        if s == 0.0 {
            return ProbabilityVector::uniform(k);
        }
        let mut p: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let head: f64 = p[..k - 1].iter().sum();
        p[k - 1] = (1.0 - head).max(0.0);
        ProbabilityVector::new(p).unwrap()
    }

    #[test]
    fn cross_entropy_cases() {
        assert!(cross_entropy(&ProbabilityVector::one_hot(4, 2), 2).unwrap() < 1e-11);
        let u = cross_entropy(&ProbabilityVector::uniform(4), 1).unwrap();
        assert!((u - 4f64.ln()).abs() < 1e-9);
        let c = cross_entropy(&pv(&[0.7, 0.1, 0.1, 0.1]), 0).unwrap();
        assert!((c - 0.356675).abs() < 1e-6);
        assert!((c + 0.7f64.ln()).abs() < 1e-10);
        assert!(matches!(cross_entropy(&ProbabilityVector::uniform(4), 4), Err(Error::Contract(_))));
    }

    #[test]
    fn kl_cases() {
        let p = pv(&[0.1, 0.2, 0.3, 0.4]);
        assert!(kl_divergence(&p, &p).abs() < 1e-12);
        let a = kl_divergence(&ProbabilityVector::one_hot(4, 0), &ProbabilityVector::uniform(4));
        assert!((a - 4f64.ln()).abs() < 1e-9);
        let b = kl_divergence(&pv(&[0.5, 0.5, 0.0, 0.0]), &ProbabilityVector::uniform(4));
        assert!((b - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn gibbs_inequality_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10_000 {
            let k = rng.gen_range(2..8);
            let p = random_simplex(k, &mut rng);
            let q = random_simplex(k, &mut rng);
            assert!(kl_divergence(&p, &q) >= -1e-12);
        }
    }

    proptest! {
        #[test]
        fn kl_nonnegative(raw in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 2..6)) {
            let norm = |v: Vec<f64>| {
                let s: f64 = v.iter().sum();
                let mut p: Vec<f64> = v.iter().map(|x| x / s).collect();
                let n = p.len();
                let head: f64 = p[..n - 1].iter().sum();
                p[n - 1] = (1.0 - head).max(0.0);
                ProbabilityVector::new(p).unwrap()
            };
            let (a, b): (Vec<f64>, Vec<f64>) = raw.into_iter().map(|(x, y)| (x + 1e-3, y + 1e-3)).unzip();
            prop_assert!(kl_divergence(&norm(a), &norm(b)) >= -1e-12);
        }
    }

    #[test]
    fn sequence_loss_cases() {
        let p = pv(&[0.6, 0.2, 0.1, 0.1]);
        let one = sequence_loss(&[p.clone()], &[0], 0.1).unwrap();
        assert_eq!(one.kl, 0.0);
        assert_eq!(one.total, one.ce);

        let constant = sequence_loss(&[p.clone(), p.clone(), p.clone()], &[0, 1, 2], 0.1).unwrap();
        assert!(constant.kl.abs() < 1e-12);

        let perfect = sequence_loss(
            &[ProbabilityVector::one_hot(4, 1), ProbabilityVector::one_hot(4, 3)],
            &[1, 3],
            0.1,
        )
        .unwrap();
        // a label change between one-hot steps costs ln(1/ε) in the KL term
        assert!(perfect.ce < 1e-11);
        assert!(perfect.kl > 10.0);

        let same = sequence_loss(
            &[ProbabilityVector::one_hot(4, 1), ProbabilityVector::one_hot(4, 1)],
            &[1, 1],
            0.1,
        )
        .unwrap();
        assert!(same.total < 1e-11);
    }

    #[test]
    fn breakdown_matches_value_level_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ys: Vec<_> = (0..6).map(|_| random_simplex(4, &mut rng)).collect();
        let labels = [0, 1, 1, 3, 2, 0];
        let got = sequence_loss(&ys, &labels, 0.3).unwrap();
        let ce: f64 = ys.iter().zip(&labels).map(|(y, &l)| cross_entropy(y, l).unwrap()).sum::<f64>() / 6.0;
        let kl: f64 = ys.windows(2).map(|w| kl_divergence(&w[0], &w[1])).sum::<f64>() / 6.0;
        assert!((got.ce - ce).abs() < 1e-12);
        assert!((got.kl - kl).abs() < 1e-12);
        assert!((got.total - (got.ce + 0.3 * got.kl)).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_rejected() {
        let ys = vec![ProbabilityVector::uniform(4); 3];
        assert!(sequence_loss(&ys, &[0, 1], 0.1).is_err());
    }

    fn loss_and_grad(logits: &Tensor, labels: &[usize], stop: bool) -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let x = tape.param(logits);
        let y = tape.softmax_rows(x, false);
        let cfg = LossConfig { lambda: 0.7, stop_grad_prev: stop };
        let l = sequence_loss_tape(&mut tape, y, labels, cfg).unwrap();
        let g = tape.backward(l.total).unwrap();
        (l.breakdown.total, g.wrt(x))
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let logits = Tensor::from_vec(&[5, 4], (0..20).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let labels = [0, 3, 3, 1, 2];
        let (_, g) = loss_and_grad(&logits, &labels, false);
        let mut params = vec![("logits".to_string(), logits)];
        let rep = finite_diff_check(
            &mut params,
            &[g],
            |p| Ok(loss_and_grad(&p[0].1, &labels, false).0),
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn stop_gradient_changes_only_the_kl_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = Tensor::from_vec(&[3, 4], (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let (a, ga) = loss_and_grad(&logits, &[0, 1, 2], false);
        let (b, gb) = loss_and_grad(&logits, &[0, 1, 2], true);
        assert_eq!(a, b);
        assert!(ga.iter().zip(&gb).any(|(x, y)| (x - y).abs() > 1e-9));
        // the last row never appears as ŷ_{t-1}, so its gradient is unchanged
        for c in 8..12 {
            assert!((ga[c] - gb[c]).abs() < 1e-15);
        }
    }
}
