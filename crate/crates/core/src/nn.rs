//! Linear layers, layer norm, dropout, causal multi-head self-attention,
//! pre-norm transformer blocks and relu MLPs, all evaluated on a [`Tape`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::Leaf;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams<P> {
    /// `[out × in]`
    pub weight: Leaf<P>,
    /// `[out]`
    pub bias: Leaf<P>,
}
crate::param_tree!(LinearParams { weight, bias });

impl LinearParams<Tensor> {
    /// Glorot-uniform weights scaled by `gain`, zero bias.
    pub fn init(input: usize, output: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let limit = gain * (6.0 / (input + output) as f64).sqrt();
        let w = (0..input * output)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        LinearParams {
            weight: Leaf(Tensor::from_vec(&[output, input], w).unwrap()),
            bias: Leaf(Tensor::zeros(&[output])),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        LinearParams {
            weight: Leaf(Tensor::zeros(&[output, input])),
            bias: Leaf(Tensor::zeros(&[output])),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.0.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.0.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<P> {
    pub gamma: Leaf<P>,
    pub beta: Leaf<P>,
}
crate::param_tree!(LayerNormParams { gamma, beta });

impl LayerNormParams<Tensor> {
    pub fn new(d: usize) -> Self {
        LayerNormParams {
            gamma: Leaf(Tensor::filled(&[d], 1.0)),
            beta: Leaf(Tensor::zeros(&[d])),
        }
    }
}

/// Query/key/value projections of one attention head (`d → head_dim`).
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<P> {
    pub query: LinearParams<P>,
    pub key: LinearParams<P>,
    pub value: LinearParams<P>,
}
crate::param_tree!(HeadParams { query, key, value });

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlockParams<P> {
    pub norm_attn: LayerNormParams<P>,
    pub heads: Vec<HeadParams<P>>,
    pub attn_out: LinearParams<P>,
    pub norm_ffn: LayerNormParams<P>,
    pub ffn_in: LinearParams<P>,
    pub ffn_out: LinearParams<P>,
}
crate::param_tree!(TransformerBlockParams {
    norm_attn,
    heads,
    attn_out,
    norm_ffn,
    ffn_in,
    ffn_out
});

impl TransformerBlockParams<Tensor> {
    pub fn init(d: usize, heads: usize, ffn_hidden: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(
                "model.heads",
                format!("width {d} is not divisible into {heads} heads"),
            ));
        }
        let hd = d / heads;
        let heads = (0..heads)
            .map(|_| HeadParams {
                query: LinearParams::init(d, hd, 1.0, rng),
                key: LinearParams::init(d, hd, 1.0, rng),
                value: LinearParams::init(d, hd, 1.0, rng),
            })
            .collect();
        Ok(TransformerBlockParams {
            norm_attn: LayerNormParams::new(d),
            heads,
            attn_out: LinearParams::init(d, d, 1.0, rng),
            norm_ffn: LayerNormParams::new(d),
            ffn_in: LinearParams::init(d, ffn_hidden, 1.0, rng),
            ffn_out: LinearParams::init(ffn_hidden, d, 1.0, rng),
        })
    }

    pub fn width(&self) -> usize {
        self.attn_out.output_dim()
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn head_dim(&self) -> usize {
        self.heads[0].query.output_dim()
    }
}

/// Evaluation mode plus the dropout stream used in training mode.
pub struct Ctx<'r> {
    pub train: bool,
    pub dropout: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Ctx<'r> {
    pub fn eval() -> Self {
        Ctx {
            train: false,
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn train(dropout: f64, rng: &'r mut ChaCha8Rng) -> Self {
        Ctx {
            train: true,
            dropout,
            rng: Some(rng),
        }
    }
}

/// Inverted dropout; identity outside training mode.
pub fn dropout(tape: &mut Tape, x: Var, ctx: &mut Ctx) -> Result<Var> {
    let rate = ctx.dropout;
    if !ctx.train || rate <= 0.0 {
        return Ok(x);
    }
    let rng = ctx
        .rng
        .as_deref_mut()
        .ok_or_else(|| Error::contract("training mode requires a dropout stream"))?;
    let keep = 1.0 / (1.0 - rate);
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask = (0..n)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let m = tape.constant(Tensor::from_vec(&shape, mask)?);
    tape.mul(x, m)
}

/// `x Wᵀ + b` over the last axis.
pub fn linear_forward(tape: &mut Tape, x: Var, p: &LinearParams<Var>) -> Result<Var> {
    let xw = tape.matmul_bt(x, p.weight.0)?;
    tape.add(xw, p.bias.0)
}

pub fn layer_norm(tape: &mut Tape, x: Var, p: &LayerNormParams<Var>, eps: f64) -> Result<Var> {
    if tape.shape(x).last().copied().unwrap_or(0) < 2 || !(eps > 0.0) {
        return Err(Error::contract("layer norm needs width ≥ 2 and eps > 0"));
    }
    tape.layer_norm(x, p.gamma.0, p.beta.0, eps)
}

/// Linear layers with relu between them and no activation after the last.
pub fn mlp_forward(tape: &mut Tape, x: Var, layers: &[LinearParams<Var>]) -> Result<Var> {
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        h = linear_forward(tape, h, layer)?;
        if i + 1 < layers.len() {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

pub struct AttentionOutput {
    pub out: Var,
    /// Per-head `[T×T]` attention matrices (before dropout).
    pub weights: Vec<Var>,
}

/// Multi-head scaled dot-product self-attention with a causal mask: row `t`
/// only attends to rows `0..=t`.
pub fn causal_self_attention(
    tape: &mut Tape,
    h: Var,
    p: &TransformerBlockParams<Var>,
    ctx: &mut Ctx,
) -> Result<AttentionOutput> {
    let head_dim = tape.shape(p.heads[0].query.weight.0)[0];
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(p.heads.len());
    let mut weights = Vec::with_capacity(p.heads.len());
    for head in &p.heads {
        let q = linear_forward(tape, h, &head.query)?;
        let k = linear_forward(tape, h, &head.key)?;
        let v = linear_forward(tape, h, &head.value)?;
        let logits = tape.matmul_bt(q, k)?;
        let logits = tape.scale(logits, scale);
        let attn = tape.softmax_rows(logits, true);
        weights.push(attn);
        let attn = dropout(tape, attn, ctx)?;
        outs.push(tape.matmul(attn, v)?);
    }
    let joined = tape.concat(&outs)?;
    let out = linear_forward(tape, joined, &p.attn_out)?;
    Ok(AttentionOutput { out, weights })
}

/// Pre-norm residual block: `H + Attn(LN(H))`, then `+ FFN(LN(·))`.
pub fn transformer_block(
    tape: &mut Tape,
    h: Var,
    p: &TransformerBlockParams<Var>,
    ctx: &mut Ctx,
) -> Result<Var> {
    let normed = layer_norm(tape, h, &p.norm_attn, LAYER_NORM_EPS)?;
    let attn = causal_self_attention(tape, normed, p, ctx)?;
    let h = tape.add(h, attn.out)?;
    let normed = layer_norm(tape, h, &p.norm_ffn, LAYER_NORM_EPS)?;
    let hidden = linear_forward(tape, normed, &p.ffn_in)?;
    let hidden = tape.relu(hidden);
    let ffn = linear_forward(tape, hidden, &p.ffn_out)?;
    let ffn = dropout(tape, ffn, ctx)?;
    tape.add(h, ffn)
}
