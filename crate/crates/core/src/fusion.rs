//! Cross-modality attention alignment (CMAA), modality importance estimation
//! (MIE) and confidence-weighted fusion.
//!
//! CMAA runs single-head scaled dot-product attention for every ordered pair
//! `(i, j)` of distinct modalities: queries come from modality `i`, keys and
//! values from modality `j`, and row `t` attends over `j`'s causal prefix
//! `0..=t`. Each modality's aligned feature is the mean over its two pairs.
//!
//! MIE scores each modality per step with a two-layer MLP on `[h, g]`,
//! squashes with a sigmoid and normalizes the three scores to sum to one.

use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::nn::{linear_forward, mlp_forward, LinearParams};
use crate::tensor::Tensor;

/// Floor added to each sigmoid score before sum-normalization.
pub const MIE_EPS: f64 = 1e-8;

/// Ordered modality pairs `(query, key/value)` in storage order.
pub const PAIRS: [(Modality, Modality); 6] = [
    (Modality::Audio, Modality::Visual),
    (Modality::Audio, Modality::Text),
    (Modality::Visual, Modality::Audio),
    (Modality::Visual, Modality::Text),
    (Modality::Text, Modality::Audio),
    (Modality::Text, Modality::Visual),
];

pub fn pair_index(i: Modality, j: Modality) -> usize {
    PAIRS
        .iter()
        .position(|&p| p == (i, j))
        .expect("pair of distinct modalities")
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairParams<P> {
    /// `d → d_k`
    pub query: LinearParams<P>,
    /// `d → d_k`
    pub key: LinearParams<P>,
    /// `d → d`
    pub value: LinearParams<P>,
}
crate::param_tree!(PairParams { query, key, value });

#[derive(Clone, Debug, PartialEq)]
pub struct CmaaParams<P> {
    pub pairs: Vec<PairParams<P>>,
}
crate::param_tree!(CmaaParams { pairs });

impl CmaaParams<Tensor> {
    pub fn init(d: usize, d_k: usize, rng: &mut ChaCha8Rng) -> Self {
        let pairs = PAIRS
            .iter()
            .map(|_| PairParams {
                query: LinearParams::init(d, d_k, 1.0, rng),
                key: LinearParams::init(d, d_k, 1.0, rng),
                value: LinearParams::init(d, d, 1.0, rng),
            })
            .collect();
        CmaaParams { pairs }
    }
}

/// How MIE turns raw scores into a convex combination.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MieNorm {
    /// `w_i = (σ(s_i) + ε) / Σ_k (σ(s_k) + ε)`
    SigmoidSum,
    /// `w = softmax(s)`
    Softmax,
}

impl FromStr for MieNorm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid_sum" => Ok(MieNorm::SigmoidSum),
            "softmax" => Ok(MieNorm::Softmax),
            other => Err(Error::config("model.mie_norm", format!("unknown `{other}`"))),
        }
    }
}

impl MieNorm {
    pub fn as_str(self) -> &'static str {
        match self {
            MieNorm::SigmoidSum => "sigmoid_sum",
            MieNorm::Softmax => "softmax",
        }
    }
}

/// One two-layer MLP (`2d → hidden → 1`) shared by all modalities, or one
/// per modality in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct MieParams<P> {
    pub scorers: Vec<Vec<LinearParams<P>>>,
}
crate::param_tree!(MieParams { scorers });

impl MieParams<Tensor> {
    pub fn init(d: usize, hidden: usize, shared: bool, rng: &mut ChaCha8Rng) -> Self {
        let n = if shared { 1 } else { 3 };
        let scorers = (0..n)
            .map(|_| {
                vec![
                    LinearParams::init(2 * d, hidden, 1.0, rng),
                    LinearParams::init(hidden, 1, 1.0, rng),
                ]
            })
            .collect();
        MieParams { scorers }
    }
}

impl<P> MieParams<P> {
    pub fn scorer(&self, m: Modality) -> &[LinearParams<P>] {
        if self.scorers.len() == 1 {
            &self.scorers[0]
        } else {
            &self.scorers[m.index()]
        }
    }
}

pub struct CrossAttention {
    pub out: Var,
    /// `[T×T]`, row-stochastic over the causal prefix.
    pub weights: Var,
}

/// `g^{i↔j} = softmax(Q^i (K^j)ᵀ / √d_k) V^j` with a causal mask.
pub fn cmaa_pairwise(
    tape: &mut Tape,
    h_i: Var,
    h_j: Var,
    p: &PairParams<Var>,
) -> Result<CrossAttention> {
    if tape.shape(h_i) != tape.shape(h_j) {
        return Err(Error::dim(format!(
            "cross-attention streams differ: {:?} vs {:?}",
            tape.shape(h_i),
            tape.shape(h_j)
        )));
    }
    let d_k = tape.shape(p.query.weight.0)[0];
    let q = linear_forward(tape, h_i, &p.query)?;
    let k = linear_forward(tape, h_j, &p.key)?;
    let v = linear_forward(tape, h_j, &p.value)?;
    let logits = tape.matmul_bt(q, k)?;
    let logits = tape.scale(logits, 1.0 / (d_k as f64).sqrt());
    let weights = tape.softmax_rows(logits, true);
    let out = tape.matmul(weights, v)?;
    Ok(CrossAttention { out, weights })
}

/// `g^i = ½ (g^{i↔j} + g^{i↔k})`
pub fn cmaa_aggregate(tape: &mut Tape, g_ij: Var, g_ik: Var) -> Result<Var> {
    if tape.shape(g_ij) != tape.shape(g_ik) {
        return Err(Error::dim("aggregated alignments differ in shape"));
    }
    let s = tape.add(g_ij, g_ik)?;
    Ok(tape.scale(s, 0.5))
}

/// Aligned features `g^i` for all three modalities.
pub fn cmaa(tape: &mut Tape, h: &[Var; 3], p: &CmaaParams<Var>) -> Result<[Var; 3]> {
    let mut out = Vec::with_capacity(3);
    for m in Modality::ALL {
        let [j, k] = m.others();
        let gj = cmaa_pairwise(tape, h[m.index()], h[j.index()], &p.pairs[pair_index(m, j)])?;
        let gk = cmaa_pairwise(tape, h[m.index()], h[k.index()], &p.pairs[pair_index(m, k)])?;
        out.push(cmaa_aggregate(tape, gj.out, gk.out)?);
    }
    Ok([out[0], out[1], out[2]])
}

/// Per-step confidence weights `[T×3]` in canonical modality order.
pub fn mie_weights(
    tape: &mut Tape,
    h: &[Var; 3],
    g: &[Var; 3],
    p: &MieParams<Var>,
    norm: MieNorm,
) -> Result<Var> {
    let mut scores = Vec::with_capacity(3);
    for m in Modality::ALL {
        let i = m.index();
        if tape.shape(h[i]) != tape.shape(g[i]) {
            return Err(Error::dim("MIE inputs h and g differ in shape"));
        }
        let x = tape.concat(&[h[i], g[i]])?;
        scores.push(mlp_forward(tape, x, p.scorer(m))?);
    }
    let logits = tape.concat(&scores)?;
    match norm {
        MieNorm::Softmax => Ok(tape.softmax_rows(logits, false)),
        MieNorm::SigmoidSum => {
            let s = tape.sigmoid(logits);
            let s = tape.add_scalar(s, MIE_EPS);
            let mean = tape.mean_axis(s, 1)?;
            let total = tape.scale(mean, 3.0);
            let inv = tape.recip(total)?;
            tape.mul(s, inv)
        }
    }
}

/// `z_t = Σ_i w^i_t g^i_t`
pub fn fuse(tape: &mut Tape, g: &[Var; 3], w: Var) -> Result<Var> {
    let t = tape.shape(g[0])[0];
    if tape.shape(w) != [t, 3] {
        return Err(Error::dim(format!(
            "weights {:?} do not match {t} steps × 3 modalities",
            tape.shape(w)
        )));
    }
    let mut acc: Option<Var> = None;
    for (i, gi) in g.iter().enumerate() {
        let wi = tape.slice_cols(w, i, 1)?;
        let term = tape.mul(*gi, wi)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc.unwrap())
}

/// Validated `[T×3]` convex weights, in canonical modality order.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceWeights(Tensor);

impl ConfidenceWeights {
    pub fn new(w: Tensor) -> Result<Self> {
        if w.shape().len() != 2 || w.cols() != 3 {
            return Err(Error::dim(format!("confidence weights must be [T×3], got {:?}", w.shape())));
        }
        for t in 0..w.rows() {
            let row = w.row(t);
            let sum: f64 = row.iter().sum();
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::contract(format!("row {t} is not a convex combination: {row:?}")));
            }
        }
        Ok(ConfidenceWeights(w))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn steps(&self) -> usize {
        self.0.rows()
    }

    pub fn get(&self, t: usize, m: Modality) -> f64 {
        self.0.at(t, m.index())
    }
}
