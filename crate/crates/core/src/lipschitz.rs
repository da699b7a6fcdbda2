//! Upper bound on how far the predicted sequence can move per unit change of
//! one modality's raw input, and the matching empirical probe.
//!
//! All norms are Frobenius over a `[T × ·]` sequence. Attention and the
//! normalized fusion weights are only Lipschitz on bounded inputs, so the
//! bound takes a radius for the raw feature rows and propagates row-norm
//! bounds through the network:
//!
//! * layer norm: Lipschitz `‖γ‖∞/√eps`, output rows at most `‖γ‖∞√d + ‖β‖`
//! * attention head on rows bounded by `R`: `√T‖W_v‖ + ½T·R_v(R_k‖W_q‖ + R_q‖W_k‖)/√d_k`
//!   (the second term is the softmax Jacobian, at most ½, against `‖V‖₂ ≤ √T R_v`)
//! * residual blocks compose as `(1 + attention branch)(1 + feed-forward branch)`
//! * sum-normalized sigmoid weights: the sigmoid contributes ¼, the
//!   normalization `(1 + √3)/S` with `S` bounded below through the score bound
//! * feedback recurrence: `a Σ_{k<T} ρ^k`, `a = ½‖C‖‖W_z‖`, `ρ = ½‖C‖‖W_y‖`

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::Result;
use crate::fusion::{pair_index, MieNorm, PairParams, MIE_EPS};
use crate::modality::Modality;
use crate::model::{Model, Variant};
use crate::nn::{LayerNormParams, LinearParams, TransformerBlockParams, LAYER_NORM_EPS};
use crate::rng::stream;
use crate::spectral::{spectral_norm, spectral_norm_cols};
use crate::tensor::{sigmoid, Tensor};

/// Input domain over which the bound holds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainBounds {
    /// Largest row norm of each modality's raw input.
    pub raw_row_norm: [f64; 3],
    /// Sequence length.
    pub steps: usize,
}

impl DomainBounds {
    /// Covers the given raw inputs with `margin` to spare on every row.
    pub fn covering(raw: &[&Tensor; 3], margin: f64) -> Self {
        let mut r = [0.0; 3];
        for (i, t) in raw.iter().enumerate() {
            r[i] = (0..t.rows()).map(|k| l2(t.row(k))).fold(0.0, f64::max) + margin;
        }
        DomainBounds {
            raw_row_norm: r,
            steps: raw[0].rows(),
        }
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn lin(p: &LinearParams<Tensor>) -> Result<(f64, f64)> {
    Ok((spectral_norm(&p.weight.0)?, l2(p.bias.0.data())))
}

/// `(Lipschitz constant, output row-norm bound)`
fn layer_norm_bound(p: &LayerNormParams<Tensor>) -> (f64, f64) {
    let g = p.gamma.0.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let d = p.gamma.0.len() as f64;
    (g / LAYER_NORM_EPS.sqrt(), g * d.sqrt() + l2(p.beta.0.data()))
}

/// `(Lipschitz constant, output row-norm bound)` of one pre-norm block whose
/// input rows have norm at most `r_in`.
fn block_bound(p: &TransformerBlockParams<Tensor>, r_in: f64, t: f64) -> Result<(f64, f64)> {
    let (l_ln1, r_y) = layer_norm_bound(&p.norm_attn);
    let mut sum_l2 = 0.0;
    let mut sum_rv2 = 0.0;
    for h in &p.heads {
        let (wq, bq) = lin(&h.query)?;
        let (wk, bk) = lin(&h.key)?;
        let (wv, bv) = lin(&h.value)?;
        let dk = h.query.output_dim() as f64;
        let (rq, rk, rv) = (wq * r_y + bq, wk * r_y + bk, wv * r_y + bv);
        let lh = t.sqrt() * wv + 0.5 * t * rv * (rk * wq + rq * wk) / dk.sqrt();
        sum_l2 += lh * lh;
        sum_rv2 += rv * rv;
    }
    let (wo, bo) = lin(&p.attn_out)?;
    let l_attn = wo * sum_l2.sqrt() * l_ln1;
    let r_mid = r_in + wo * sum_rv2.sqrt() + bo;

    let (l_ln2, r_y2) = layer_norm_bound(&p.norm_ffn);
    let (w1, b1) = lin(&p.ffn_in)?;
    let (w2, b2) = lin(&p.ffn_out)?;
    let l_ffn = w2 * w1 * l_ln2;
    let r_out = r_mid + w2 * (w1 * r_y2 + b1) + b2;
    Ok(((1.0 + l_attn) * (1.0 + l_ffn), r_out))
}

/// `(Lipschitz constant, output row-norm bound)` of one encoder.
fn encoder_bound(model: &Model, m: Modality, dom: &DomainBounds) -> Result<(f64, f64)> {
    let p = &model.params.encoders[m.index()];
    let (wp, bp) = lin(&p.projection)?;
    let pos = &p.positional.0;
    let pos_max = (0..dom.steps.min(pos.rows())).map(|k| l2(pos.row(k))).fold(0.0, f64::max);
    let mut lip = wp;
    let mut r = wp * dom.raw_row_norm[m.index()] + bp + pos_max;
    for b in &p.blocks {
        let (l, r_next) = block_bound(b, r, dom.steps as f64)?;
        lip *= l;
        r = r_next;
    }
    Ok((lip, r))
}

struct PairBound {
    /// Per unit change of the querying stream.
    query: f64,
    /// Per unit change of the attended stream.
    key_value: f64,
    r_out: f64,
}

fn pair_bound(p: &PairParams<Tensor>, r_query: f64, r_kv: f64, t: f64) -> Result<PairBound> {
    let (wq, bq) = lin(&p.query)?;
    let (wk, bk) = lin(&p.key)?;
    let (wv, bv) = lin(&p.value)?;
    let dk = p.query.output_dim() as f64;
    let (rq, rk, rv) = (wq * r_query + bq, wk * r_kv + bk, wv * r_kv + bv);
    Ok(PairBound {
        query: 0.5 * t * rv * rk * wq / dk.sqrt(),
        key_value: t.sqrt() * wv + 0.5 * t * rv * rq * wk / dk.sqrt(),
        r_out: rv,
    })
}

/// Bound on `‖Δŷ‖ / ‖Δx^m‖` for every modality, over inputs inside `dom`.
pub fn lipschitz_bound(model: &Model, dom: &DomainBounds) -> Result<[f64; 3]> {
    let cfg = &model.config;
    let t = dom.steps as f64;
    let mut l_enc = [0.0; 3];
    let mut r_h = [0.0; 3];
    for m in Modality::ALL {
        let (l, r) = encoder_bound(model, m, dom)?;
        l_enc[m.index()] = l;
        r_h[m.index()] = r;
    }

    // pair[i][j]: modality i querying modality j
    let mut pairs: Vec<Vec<Option<PairBound>>> = (0..3).map(|_| vec![None, None, None]).collect();
    for i in Modality::ALL {
        for j in i.others() {
            let p = &model.params.cmaa.pairs[pair_index(i, j)];
            pairs[i.index()][j.index()] = Some(pair_bound(p, r_h[i.index()], r_h[j.index()], t)?);
        }
    }
    let r_g: [f64; 3] = if cfg.variant == Variant::NoCmaa {
        r_h
    } else {
        Modality::ALL.map(|i| {
            let [j, k] = i.others();
            let pi = &pairs[i.index()];
            0.5 * (pi[j.index()].as_ref().unwrap().r_out + pi[k.index()].as_ref().unwrap().r_out)
        })
    };

    let (w_z, w_y, c) = {
        let tfl = &model.params.tfl;
        let d = tfl.width();
        let k = tfl.classes();
        let mut c = 1.0;
        for layer in &tfl.classifier {
            c *= spectral_norm(&layer.weight.0)?;
        }
        (
            spectral_norm_cols(&tfl.feedback.weight.0, 0, d)?,
            spectral_norm_cols(&tfl.feedback.weight.0, d, k)?,
            c,
        )
    };
    let l_head = match cfg.variant {
        Variant::NoTfl => 0.5 * c,
        _ => {
            let a = 0.5 * c * w_z;
            let rho = 0.5 * c * w_y;
            a * (0..dom.steps).map(|k| rho.powi(k as i32)).sum::<f64>()
        }
    };

    let mut mlp = [0.0; 3];
    let mut s_min = 0.0;
    for i in Modality::ALL {
        let layers = model.params.mie.scorer(i);
        let mut lip = 1.0;
        let r_in = (r_h[i.index()].powi(2) + r_g[i.index()].powi(2)).sqrt();
        let mut r = r_in;
        for layer in layers {
            let (w, b) = lin(layer)?;
            lip *= w;
            r = w * r + b;
        }
        mlp[i.index()] = lip;
        s_min += sigmoid(-r) + MIE_EPS;
    }

    let mut out = [0.0; 3];
    for m in Modality::ALL {
        // sensitivities of each g^i per unit change of h^m
        let mut l_g = [0.0; 3];
        if cfg.variant == Variant::NoCmaa {
            l_g[m.index()] = 1.0;
        } else {
            let [j, k] = m.others();
            let pm = &pairs[m.index()];
            l_g[m.index()] = 0.5
                * (pm[j.index()].as_ref().unwrap().query + pm[k.index()].as_ref().unwrap().query);
            for i in [j, k] {
                l_g[i.index()] = 0.5 * pairs[i.index()][m.index()].as_ref().unwrap().key_value;
            }
        }
        let score_sens = Modality::ALL
            .iter()
            .map(|i| {
                let l_h = if *i == m { 1.0 } else { 0.0 };
                mlp[i.index()].powi(2) * (l_h * l_h + l_g[i.index()].powi(2))
            })
            .sum::<f64>()
            .sqrt();
        let l_w = match (cfg.variant, cfg.mie_norm) {
            (Variant::NoMie, _) => 0.0,
            (_, MieNorm::SigmoidSum) => (1.0 + 3f64.sqrt()) / s_min * 0.25 * score_sens,
            (_, MieNorm::Softmax) => 0.5 * score_sens,
        };
        let r_gs = r_g.iter().map(|r| r * r).sum::<f64>().sqrt();
        let l_z = l_g.iter().map(|l| l * l).sum::<f64>().sqrt() + l_w * r_gs;
        out[m.index()] = l_head * l_z * l_enc[m.index()];
    }
    Ok(out)
}

/// Largest `‖Δŷ‖_F / ‖δ‖` over `n` perturbations `δ` of norm `eps` added to
/// one random row of modality `m`, the other inputs held fixed.
pub fn lipschitz_empirical(
    model: &Model,
    raw: &[&Tensor; 3],
    m: Modality,
    n: usize,
    eps: f64,
    seed: u64,
) -> Result<f64> {
    let base = model.predict_raw(raw)?;
    let base: Vec<f64> = base.y_hat.iter().flat_map(|p| p.as_slice().to_vec()).collect();
    let x = raw[m.index()];
    let (steps, dim) = (x.rows(), x.cols());
    let mut rng = stream(seed, &format!("lipschitz/{m}"));
    let perturbations: Vec<(usize, Vec<f64>)> = (0..n)
        .map(|_| {
            let t = rng.gen_range(0..steps);
            let mut u: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = l2(&u);
            u.iter_mut().for_each(|v| *v *= eps / norm);
            (t, u)
        })
        .collect();
    let ratios: Vec<Result<f64>> = perturbations
        .par_iter()
        .map(|(t, u)| {
            let mut moved = x.clone();
            for (j, v) in u.iter().enumerate() {
                moved.data_mut()[t * dim + j] += v;
            }
            let mut inputs = *raw;
            inputs[m.index()] = &moved;
            let y = model.predict_raw(&inputs)?;
            let dy = y
                .y_hat
                .iter()
                .flat_map(|p| p.as_slice().to_vec())
                .zip(&base)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            Ok(dy / eps)
        })
        .collect();
    ratios.into_iter().try_fold(0.0, |acc, r| Ok(f64::max(acc, r?)))
}
