//! Per-modality encoders: a learned projection from raw features to the model
//! width, learned positional embeddings, then a stack of causal transformer
//! blocks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{linear_forward, transformer_block, Ctx, LinearParams, TransformerBlockParams};
use crate::params::{bind_const, Leaf};
use crate::tensor::Tensor;
use crate::modality::ModalityStream;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<P> {
    pub projection: LinearParams<P>,
    /// `[T_max × d]`
    pub positional: Leaf<P>,
    pub blocks: Vec<TransformerBlockParams<P>>,
}
crate::param_tree!(EncoderParams {
    projection,
    positional,
    blocks
});

impl EncoderParams<Tensor> {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        raw_dim: usize,
        d: usize,
        t_max: usize,
        layers: usize,
        heads: usize,
        ffn_hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let projection = LinearParams::init(raw_dim, d, 1.0, rng);
        let pos = (0..t_max * d).map(|_| rng.gen_range(-0.02..0.02)).collect();
        let blocks = (0..layers)
            .map(|_| TransformerBlockParams::init(d, heads, ffn_hidden, rng))
            .collect::<Result<_>>()?;
        Ok(EncoderParams {
            projection,
            positional: Leaf(Tensor::from_vec(&[t_max, d], pos)?),
            blocks,
        })
    }

    pub fn t_max(&self) -> usize {
        self.positional.0.shape()[0]
    }
}

/// Encodes raw `[T × D_m]` features into `[T × d]`; row `t` of the output
/// depends only on raw rows `0..=t`.
pub fn encode_modality(
    tape: &mut Tape,
    raw: Var,
    p: &EncoderParams<Var>,
    ctx: &mut Ctx,
) -> Result<Var> {
    let t = tape.shape(raw)[0];
    let t_max = tape.shape(p.positional.0)[0];
    if t > t_max {
        return Err(Error::Capacity { len: t, max: t_max });
    }
    let projected = linear_forward(tape, raw, &p.projection)?;
    let pos = tape.slice_rows(p.positional.0, 0, t)?;
    let mut h = tape.add(projected, pos)?;
    for block in &p.blocks {
        h = transformer_block(tape, h, block, ctx)?;
    }
    Ok(h)
}

/// Evaluation-mode encoding of a whole stream.
pub fn encode_stream(stream: &ModalityStream, p: &EncoderParams<Tensor>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let pv = bind_const(p, &mut tape);
    let raw = tape.constant(stream.raw.clone());
    let h = encode_modality(&mut tape, raw, &pv, &mut Ctx::eval())?;
    Ok(tape.value(h).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modality::Modality;
    use crate::tensor::matmul;
    use rand::SeedableRng;

    fn stream(t: usize, dim: usize, seed: u64) -> ModalityStream {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Tensor::from_vec(&[t, dim], (0..t * dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        ModalityStream::new(Modality::Audio, raw).unwrap()
    }

    #[test]
    fn zero_blocks_is_projection_plus_positional() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = EncoderParams::init(5, 8, 6, 0, 2, 16, &mut rng).unwrap();
        let s = stream(4, 5, 2);
        let h = encode_stream(&s, &p).unwrap();
        let w = &p.projection.weight.0;
        let mut wt = vec![0.0; 40];
        for o in 0..8 {
            for i in 0..5 {
                wt[i * 8 + o] = w.at(o, i);
            }
        }
        let proj = matmul(&s.raw, &Tensor::from_vec(&[5, 8], wt).unwrap()).unwrap();
        for t in 0..4 {
            for c in 0..8 {
                let want = proj.at(t, c) + p.positional.0.at(t, c);
                assert!((h.at(t, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn capacity_error_when_too_long() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = EncoderParams::init(5, 8, 3, 1, 2, 16, &mut rng).unwrap();
        let err = encode_stream(&stream(4, 5, 2), &p).unwrap_err();
        assert!(matches!(err, Error::Capacity { len: 4, max: 3 }));
    }

    #[test]
    fn encoder_is_causal_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = EncoderParams::init(5, 8, 8, 2, 2, 16, &mut rng).unwrap();
        let s = stream(4, 5, 3);
        let a = encode_stream(&s, &p).unwrap();
        assert_eq!(a, encode_stream(&s, &p).unwrap());
        let mut s2 = s.clone();
        s2.raw.data_mut()[3 * 5] += 4.0;
        let b = encode_stream(&s2, &p).unwrap();
        for t in 0..3 {
            assert_eq!(a.row(t), b.row(t));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn fully_missing_stream_is_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = EncoderParams::init(5, 8, 8, 2, 2, 16, &mut rng).unwrap();
        let s = stream(4, 5, 3).apply_missing_mask(&[false; 4]).unwrap();
        assert!(encode_stream(&s, &p).unwrap().is_finite());
    }
}
