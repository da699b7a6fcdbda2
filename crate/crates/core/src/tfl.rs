//! Temporal feedback loop and classifier head.
//!
//! At each step the fused feature `z_t` is concatenated with the previous
//! soft prediction and passed through a one-layer feedback map, then a relu
//! classifier and a softmax. The previous prediction enters as a constant
//! pseudo-label: no gradient flows back through the feedback input.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::loss::kl_divergence;
use crate::nn::{linear_forward, mlp_forward, LinearParams};
use crate::params::{bind_const, Leaf};
use crate::spectral::{spectral_norm, spectral_norm_cols};
use crate::tensor::Tensor;

/// Bound on the Lipschitz constant of softmax in the 2-norm.
pub const SOFTMAX_LIPSCHITZ: f64 = 0.5;

/// A point on the probability simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub const TOL: f64 = 1e-9;

    pub fn new(p: Vec<f64>) -> Result<Self> {
        let sum: f64 = p.iter().sum();
        if p.is_empty() || p.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > Self::TOL {
            return Err(Error::contract(format!("not a probability vector: {p:?}")));
        }
        Ok(ProbabilityVector(p))
    }

    pub fn uniform(k: usize) -> Self {
        ProbabilityVector(vec![1.0 / k as f64; k])
    }

    pub fn one_hot(k: usize, c: usize) -> Self {
        let mut v = vec![0.0; k];
        v[c] = 1.0;
        ProbabilityVector(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn max_abs_diff(&self, other: &ProbabilityVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn l2_diff(&self, other: &ProbabilityVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct TflParams<P> {
    /// `[z, ŷ_{t-1}] (d + K) → d`
    pub feedback: LinearParams<P>,
    /// `d → hidden → K`, relu between layers.
    pub classifier: Vec<LinearParams<P>>,
}
crate::param_tree!(TflParams {
    feedback,
    classifier
});

impl TflParams<Tensor> {
    pub fn init(d: usize, k: usize, hidden: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        TflParams {
            feedback: LinearParams::init(d + k, d, gain, rng),
            classifier: vec![
                LinearParams::init(d, hidden, gain, rng),
                LinearParams::init(hidden, k, gain, rng),
            ],
        }
    }

    pub fn width(&self) -> usize {
        self.feedback.output_dim()
    }

    pub fn classes(&self) -> usize {
        self.classifier.last().unwrap().output_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.width();
        let k = self.classes();
        if self.feedback.input_dim() != d + k {
            return Err(Error::dim(format!(
                "feedback input {} != d + K = {}",
                self.feedback.input_dim(),
                d + k
            )));
        }
        Ok(())
    }
}

/// `softmax(MLP_cls(x))` row-wise.
pub fn classify(tape: &mut Tape, x: Var, p: &TflParams<Var>) -> Result<Var> {
    let logits = mlp_forward(tape, x, &p.classifier)?;
    Ok(tape.softmax_rows(logits, false))
}

/// One recurrence step on a tape. `z_t` is `[1×d]`; returns `(ŷ_t, z̃_t)`.
pub fn tfl_step_tape(
    tape: &mut Tape,
    z_t: Var,
    y_prev: &[f64],
    p: &TflParams<Var>,
) -> Result<(Var, Var)> {
    let y = tape.constant(Tensor::from_vec(&[1, y_prev.len()], y_prev.to_vec())?);
    let x = tape.concat(&[z_t, y])?;
    let z_tilde = linear_forward(tape, x, &p.feedback)?;
    let y_t = classify(tape, z_tilde, p)?;
    Ok((y_t, z_tilde))
}

/// Unrolls the recurrence over `Z [T×d]`, giving stacked predictions `[T×K]`.
pub fn run_sequence_tape(tape: &mut Tape, z: Var, p: &TflParams<Var>, y0: &ProbabilityVector) -> Result<Var> {
    Ok(run_sequence_fed(tape, z, p, y0, None)?.0)
}

/// As [`run_sequence_tape`], also returning the feedback vector entering each
/// step. With `fixed`, step `t` reads `fixed[t]` instead of the prediction
/// made at `t − 1`; since feedback is a constant on the tape, this gives the
/// exact objective whose gradient backward computes.
pub fn run_sequence_fed(
    tape: &mut Tape,
    z: Var,
    p: &TflParams<Var>,
    y0: &ProbabilityVector,
    fixed: Option<&[Vec<f64>]>,
) -> Result<(Var, Vec<Vec<f64>>)> {
    let t_len = tape.shape(z)[0];
    if t_len == 0 {
        return Err(Error::contract("run_sequence needs at least one step"));
    }
    if fixed.is_some_and(|f| f.len() != t_len) {
        return Err(Error::dim("one feedback vector per step required"));
    }
    let mut y_prev = y0.as_slice().to_vec();
    let mut rows = Vec::with_capacity(t_len);
    let mut fed = Vec::with_capacity(t_len);
    for t in 0..t_len {
        if let Some(f) = fixed {
            y_prev = f[t].clone();
        }
        let z_t = tape.slice_rows(z, t, 1)?;
        let (y_t, _) = tfl_step_tape(tape, z_t, &y_prev, p)?;
        fed.push(std::mem::replace(&mut y_prev, tape.value(y_t).data().to_vec()));
        rows.push(y_t);
    }
    Ok((tape.stack_rows(&rows)?, fed))
}

/// Value-level step: `(ŷ_t, z̃_t)` from `z_t [d]` and `ŷ_{t-1}`.
pub fn tfl_step(
    z_t: &Tensor,
    y_prev: &ProbabilityVector,
    p: &TflParams<Tensor>,
) -> Result<(ProbabilityVector, Tensor)> {
    if y_prev.len() != p.classes() {
        return Err(Error::dim(format!(
            "previous prediction has {} classes, head has {}",
            y_prev.len(),
            p.classes()
        )));
    }
    let mut tape = Tape::new();
    let pv = bind_const(p, &mut tape);
    let z = tape.constant(z_t.clone().reshape(&[1, z_t.len()])?);
    let (y, zt) = tfl_step_tape(&mut tape, z, y_prev.as_slice(), &pv)?;
    let y = ProbabilityVector::new(tape.value(y).data().to_vec())?;
    Ok((y, tape.value(zt).clone().reshape(&[z_t.len()])?))
}

pub fn run_sequence(
    z: &Tensor,
    p: &TflParams<Tensor>,
    y0: &ProbabilityVector,
) -> Result<Vec<ProbabilityVector>> {
    let mut tape = Tape::new();
    let pv = bind_const(p, &mut tape);
    let zv = tape.constant(z.clone());
    let ys = run_sequence_tape(&mut tape, zv, &pv, y0)?;
    let out = tape.value(ys);
    (0..out.rows())
        .map(|t| ProbabilityVector::new(out.row(t).to_vec()))
        .collect()
}

#[derive(Clone, Debug)]
pub struct FixedPoint {
    pub y_star: ProbabilityVector,
    /// `y_0, y_1, …` up to and including `y_star`.
    pub trajectory: Vec<ProbabilityVector>,
    pub converged: bool,
    pub iterations: usize,
}

impl FixedPoint {
    /// `‖y_{k+1}−y_k‖₂ / ‖y_k−y_{k−1}‖₂` for every k with a denominator above
    /// `floor` (below it the differences are rounding noise).
    pub fn contraction_ratios(&self, floor: f64) -> Vec<f64> {
        let tr = &self.trajectory;
        (2..tr.len())
            .filter_map(|k| {
                let den = tr[k - 1].l2_diff(&tr[k - 2]);
                (den > floor).then(|| tr[k].l2_diff(&tr[k - 1]) / den)
            })
            .collect()
    }
}

/// Iterates `y ← step(z, y).0` until the sup-norm change drops below `tol`.
pub fn iterate_fixed_point(
    z: &Tensor,
    y0: &ProbabilityVector,
    p: &TflParams<Tensor>,
    max_iter: usize,
    tol: f64,
) -> Result<FixedPoint> {
    if !(tol > 0.0) {
        return Err(Error::contract("fixed-point tolerance must be positive"));
    }
    let mut trajectory = vec![y0.clone()];
    let mut y = y0.clone();
    for it in 1..=max_iter {
        let (next, _) = tfl_step(z, &y, p)?;
        let delta = next.max_abs_diff(&y);
        trajectory.push(next.clone());
        y = next;
        if delta < tol {
            return Ok(FixedPoint {
                y_star: y,
                trajectory,
                converged: true,
                iterations: it,
            });
        }
    }
    Ok(FixedPoint {
        y_star: y,
        trajectory,
        converged: false,
        iterations: max_iter,
    })
}

/// `KL(y ‖ step(z, y))`, zero exactly at a fixed point.
pub fn fixed_point_residual_kl(
    z: &Tensor,
    y: &ProbabilityVector,
    p: &TflParams<Tensor>,
) -> Result<f64> {
    let (next, _) = tfl_step(z, y, p)?;
    Ok(kl_divergence(y, &next))
}

/// Upper bound on the Lipschitz constant of `ŷ_{t-1} ↦ ŷ_t` for fixed `z`:
/// ‖W_fb[:, y-block]‖ · Π‖W_cls‖ · ½ (relu contributes 1).
pub fn contraction_bound(p: &TflParams<Tensor>) -> Result<f64> {
    p.validate()?;
    let d = p.width();
    let k = p.classes();
    let mut bound = spectral_norm_cols(&p.feedback.weight.0, d, k)?;
    for layer in &p.classifier {
        bound *= spectral_norm(&layer.weight.0)?;
    }
    Ok(bound * SOFTMAX_LIPSCHITZ)
}

impl TflParams<Tensor> {
    /// Zeroes the feedback columns that read the previous prediction.
    pub fn zero_feedback_block(&mut self) {
        let d = self.width();
        let k = self.classes();
        let w = &mut self.feedback.weight.0;
        let cols = d + k;
        for r in 0..w.rows() {
            w.data_mut()[r * cols + d..(r + 1) * cols].fill(0.0);
        }
    }

    pub fn scale_weights(&mut self, c: f64) {
        for w in std::iter::once(&mut self.feedback).chain(self.classifier.iter_mut()) {
            w.weight = Leaf(w.weight.0.map(|v| v * c));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::softmax_rows;
    use rand::{Rng, SeedableRng};

    fn head(seed: u64, gain: f64) -> TflParams<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = TflParams::init(8, 4, 8, gain, &mut rng);
        for l in std::iter::once(&mut p.feedback).chain(p.classifier.iter_mut()) {
            let n = l.bias.0.len();
            l.bias = Leaf(Tensor::from_vec(&[n], (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap());
        }
        p
    }

    fn rand_vec(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::vector(&(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    fn rand_simplex(k: usize, rng: &mut ChaCha8Rng) -> ProbabilityVector {
        let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let mut p: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let tail: f64 = p[..k - 1].iter().sum();
        p[k - 1] = 1.0 - tail;
        ProbabilityVector::new(p).unwrap()
    }

    #[test]
    fn zero_classifier_gives_uniform() {
        let mut p = head(1, 1.0);
        p.classifier = vec![LinearParams::zeros(8, 8), LinearParams::zeros(8, 4)];
        let (y, _) = tfl_step(&rand_vec(8, 2), &ProbabilityVector::uniform(4), &p).unwrap();
        assert_eq!(y.as_slice(), &[0.25; 4]);
    }

    #[test]
    fn zero_feedback_block_ignores_previous_prediction() {
        let mut p = head(3, 1.0);
        p.zero_feedback_block();
        let z = rand_vec(8, 4);
        let a = tfl_step(&z, &ProbabilityVector::one_hot(4, 0), &p).unwrap().0;
        let b = tfl_step(&z, &ProbabilityVector::one_hot(4, 3), &p).unwrap().0;
        assert_eq!(a, b);

        let zs = Tensor::from_vec(&[5, 8], (0..40).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let ra = run_sequence(&zs, &p, &ProbabilityVector::one_hot(4, 1)).unwrap();
        let rb = run_sequence(&zs, &p, &ProbabilityVector::uniform(4)).unwrap();
        assert_eq!(ra, rb);
    }

    #[test]
    fn step_matches_composed_oracle() {
        let p = head(5, 1.0);
        let z = rand_vec(8, 6);
        let y_prev = ProbabilityVector::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let (y, zt) = tfl_step(&z, &y_prev, &p).unwrap();
        let x: Vec<f64> = z.data().iter().chain(y_prev.as_slice()).copied().collect();
        let lin = |l: &LinearParams<Tensor>, x: &[f64]| -> Vec<f64> {
            (0..l.output_dim())
                .map(|o| {
                    (0..l.input_dim()).map(|i| l.weight.0.at(o, i) * x[i]).sum::<f64>()
                        + l.bias.0.data()[o]
                })
                .collect()
        };
        let zt_want = lin(&p.feedback, &x);
        let h: Vec<f64> = lin(&p.classifier[0], &zt_want).iter().map(|v| v.max(0.0)).collect();
        let logits = lin(&p.classifier[1], &h);
        let want = softmax_rows(&Tensor::vector(&logits), false);
        for (a, b) in y.as_slice().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in zt.data().iter().zip(&zt_want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_previous_prediction_rejected() {
        assert!(ProbabilityVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbabilityVector::new(vec![1.2, -0.2]).is_err());
    }

    #[test]
    fn single_step_sequence_equals_step() {
        let p = head(7, 1.0);
        let z = rand_vec(8, 8);
        let y0 = ProbabilityVector::uniform(4);
        let seq = run_sequence(&z.clone().reshape(&[1, 8]).unwrap(), &p, &y0).unwrap();
        assert_eq!(seq.len(), 1);
        assert_eq!(seq[0], tfl_step(&z, &y0, &p).unwrap().0);
    }

    #[test]
    fn constant_inputs_contract_monotonically() {
        let p = head(9, 0.3);
        assert!(contraction_bound(&p).unwrap() < 1.0);
        let z = rand_vec(8, 10);
        let zs = Tensor::from_vec(&[12, 8], z.data().repeat(12)).unwrap();
        let ys = run_sequence(&zs, &p, &ProbabilityVector::one_hot(4, 2)).unwrap();
        let first = ys[1].l2_diff(&ys[0]);
        let last = ys[11].l2_diff(&ys[10]);
        assert!(last <= first);
    }

    #[test]
    fn y_independent_map_converges_in_one_iteration() {
        let mut p = head(11, 1.0);
        p.zero_feedback_block();
        let z = rand_vec(8, 12);
        let fp = iterate_fixed_point(&z, &ProbabilityVector::uniform(4), &p, 50, 1e-9).unwrap();
        let direct = tfl_step(&z, &ProbabilityVector::one_hot(4, 0), &p).unwrap().0;
        // first application lands on the answer; the second confirms it
        assert!(fp.converged);
        assert!(fp.iterations <= 2);
        assert_eq!(fp.y_star, direct);
    }

    #[test]
    fn contractive_map_converges_to_unique_point() {
        let p = head(13, 0.05);
        let bound = contraction_bound(&p).unwrap();
        assert!(bound < 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let z = rand_vec(8, 15);
        let a = iterate_fixed_point(&z, &rand_simplex(4, &mut rng), &p, 500, 1e-9).unwrap();
        let b = iterate_fixed_point(&z, &ProbabilityVector::one_hot(4, 1), &p, 500, 1e-9).unwrap();
        assert!(a.converged && b.converged);
        assert!(a.y_star.max_abs_diff(&b.y_star) < 1e-8);
        assert!(fixed_point_residual_kl(&z, &a.y_star, &p).unwrap() < 1e-8);
        for r in a.contraction_ratios(1e-12) {
            assert!(r <= bound + 1e-6);
        }
    }

    #[test]
    fn bound_cases() {
        let mut p = head(1, 1.0);
        let base = contraction_bound(&p).unwrap();
        p.scale_weights(2.0);
        let scaled = contraction_bound(&p).unwrap();
        assert!((scaled - 8.0 * base).abs() < 1e-5 * scaled);
        p.scale_weights(0.0);
        assert_eq!(contraction_bound(&p).unwrap(), 0.0);
    }

    #[test]
    fn bound_for_diagonal_weights() {
        // d = 2, K = 2: y-block [[0.5, 0], [0, -0.3]], classifier diag(2, 1) and diag(0.25, 3)
        let diag = |a: f64, b: f64| Tensor::matrix(&[&[a, 0.0], &[0.0, b]]).unwrap();
        let p = TflParams {
            feedback: LinearParams {
                weight: Leaf(Tensor::matrix(&[&[1.0, 0.0, 0.5, 0.0], &[0.0, 1.0, 0.0, -0.3]]).unwrap()),
                bias: Leaf(Tensor::zeros(&[2])),
            },
            classifier: vec![
                LinearParams { weight: Leaf(diag(2.0, 1.0)), bias: Leaf(Tensor::zeros(&[2])) },
                LinearParams { weight: Leaf(diag(0.25, 3.0)), bias: Leaf(Tensor::zeros(&[2])) },
            ],
        };
        let want = 0.5 * 2.0 * 3.0 * 0.5;
        assert!((contraction_bound(&p).unwrap() - want).abs() < 1e-5);
    }
}
