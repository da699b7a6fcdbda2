//! Full model: three encoders, cross-modal alignment, confidence-weighted
//! fusion and the feedback head, plus the ablation variants.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::encoder::{encode_modality, EncoderParams};
use crate::error::{Error, Result};
use crate::fusion::{cmaa, fuse, mie_weights, CmaaParams, ConfidenceWeights, MieNorm, MieParams};
use crate::modality::{Modality, ModalityStream};
use crate::nn::Ctx;
use crate::params::bind_const;
use crate::tensor::Tensor;
use crate::tfl::{classify, run_sequence_fed, ProbabilityVector, TflParams};

pub const NUM_CLASSES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Full,
    /// `g^i = h^i`
    NoCmaa,
    /// `w^i_t = ⅓`
    NoMie,
    /// `z_t` goes straight to the classifier and the KL weight is zero.
    NoTfl,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoCmaa, Variant::NoMie, Variant::NoTfl];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCmaa => "no_cmaa",
            Variant::NoMie => "no_mie",
            Variant::NoTfl => "no_tfl",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Variant::Full => "complete model",
            Variant::NoCmaa => "aligned features replaced by encoder outputs",
            Variant::NoMie => "fixed equal fusion weights",
            Variant::NoTfl => "no prediction feedback and no KL term",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::config("model.variant", format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Raw feature widths in canonical modality order.
    pub raw_dims: [usize; 3],
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub t_max: usize,
    /// Query/key width of the cross-modal attention.
    pub d_k: usize,
    pub mie_hidden: usize,
    pub mie_shared: bool,
    pub mie_norm: MieNorm,
    pub cls_hidden: usize,
    pub classes: usize,
    /// Glorot gain for the feedback and classifier layers.
    pub head_gain: f64,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            raw_dims: [40, 64, 32],
            d: 32,
            layers: 2,
            heads: 4,
            ffn_hidden: 64,
            t_max: 32,
            d_k: 8,
            mie_hidden: 32,
            mie_shared: false,
            mie_norm: MieNorm::SigmoidSum,
            cls_hidden: 32,
            classes: NUM_CLASSES,
            head_gain: 1.0,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    /// Reference sizes of the full-scale model.
    pub fn full_scale() -> Self {
        ModelConfig {
            d: 256,
            layers: 4,
            heads: 4,
            ffn_hidden: 1024,
            t_max: 128,
            d_k: 64,
            mie_hidden: 256,
            cls_hidden: 256,
            ..ModelConfig::default()
        }
    }

    /// Small sizes for gradient checks.
    pub fn toy() -> Self {
        ModelConfig {
            raw_dims: [5, 6, 4],
            d: 8,
            layers: 1,
            heads: 2,
            ffn_hidden: 12,
            t_max: 4,
            d_k: 4,
            mie_hidden: 6,
            cls_hidden: 8,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.d", self.d),
            ("model.heads", self.heads),
            ("model.ffn_hidden", self.ffn_hidden),
            ("model.t_max", self.t_max),
            ("model.d_k", self.d_k),
            ("model.mie_hidden", self.mie_hidden),
            ("model.cls_hidden", self.cls_hidden),
            ("model.raw_dim_audio", self.raw_dims[0]),
            ("model.raw_dim_visual", self.raw_dims[1]),
            ("model.raw_dim_text", self.raw_dims[2]),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.d % self.heads != 0 {
            return Err(Error::config("model.heads", format!("must divide d = {}", self.d)));
        }
        if self.d < 2 {
            return Err(Error::config("model.d", "layer norm needs d ≥ 2"));
        }
        if self.classes < 2 {
            return Err(Error::config("model.classes", "need at least two classes"));
        }
        if !(self.head_gain >= 0.0 && self.head_gain.is_finite()) {
            return Err(Error::config("model.head_gain", "must be finite and nonnegative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P> {
    pub encoders: Vec<EncoderParams<P>>,
    pub cmaa: CmaaParams<P>,
    pub mie: MieParams<P>,
    pub tfl: TflParams<P>,
}
crate::param_tree!(ModelParams {
    encoders,
    cmaa,
    mie,
    tfl
});

impl ModelParams<Tensor> {
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let encoders = Modality::ALL
            .iter()
            .map(|m| {
                EncoderParams::init(
                    cfg.raw_dims[m.index()],
                    cfg.d,
                    cfg.t_max,
                    cfg.layers,
                    cfg.heads,
                    cfg.ffn_hidden,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(ModelParams {
            encoders,
            cmaa: CmaaParams::init(cfg.d, cfg.d_k, rng),
            mie: MieParams::init(cfg.d, cfg.mie_hidden, cfg.mie_shared, rng),
            tfl: TflParams::init(cfg.d, cfg.classes, cfg.cls_hidden, cfg.head_gain, rng),
        })
    }

    /// Copies the audio encoder to every modality and the first alignment
    /// pair to every pair, so identical inputs give identical features.
    pub fn symmetrize(&mut self) -> Result<()> {
        let dims: Vec<usize> = self.encoders.iter().map(|e| e.projection.input_dim()).collect();
        if dims.iter().any(|&d| d != dims[0]) {
            return Err(Error::contract(format!(
                "symmetric init needs equal raw widths, got {dims:?}"
            )));
        }
        let e = self.encoders[0].clone();
        self.encoders = vec![e.clone(), e.clone(), e];
        let p = self.cmaa.pairs[0].clone();
        self.cmaa.pairs = vec![p; self.cmaa.pairs.len()];
        let s = self.mie.scorers[0].clone();
        self.mie.scorers = vec![s];
        Ok(())
    }

    /// Applies `f` to every scalar parameter.
    pub fn map_all(&self, f: impl Fn(f64) -> f64) -> Self {
        use crate::params::ParamTree;
        self.map_leaves(&mut |t: &Tensor| t.map(&f))
    }
}

pub struct ForwardOutput {
    /// `[T×K]`
    pub y_hat: Var,
    /// `[T×3]`
    pub weights: Var,
    pub h: [Var; 3],
    pub g: [Var; 3],
    /// `[T×d]`
    pub z: Var,
    /// Previous-prediction vector fed into each step; empty without feedback.
    pub feedback: Vec<Vec<f64>>,
}

/// Runs the model over one session whose raw streams are already on the tape.
pub fn forward(
    tape: &mut Tape,
    raw: &[Var; 3],
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
    ctx: &mut Ctx,
) -> Result<ForwardOutput> {
    forward_fed(tape, raw, p, cfg, ctx, None)
}

/// As [`forward`], with the feedback vectors optionally pinned to `fixed`.
pub fn forward_fed(
    tape: &mut Tape,
    raw: &[Var; 3],
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
    ctx: &mut Ctx,
    fixed: Option<&[Vec<f64>]>,
) -> Result<ForwardOutput> {
    let t_len = tape.shape(raw[0])[0];
    if raw.iter().any(|r| tape.shape(*r)[0] != t_len) {
        return Err(Error::dim("modality streams have different lengths"));
    }
    let mut h = [raw[0]; 3];
    for m in Modality::ALL {
        let i = m.index();
        let want = cfg.raw_dims[i];
        let got = tape.shape(raw[i])[1];
        if got != want {
            return Err(Error::dim(format!("{m} features have width {got}, model expects {want}")));
        }
        h[i] = encode_modality(tape, raw[i], &p.encoders[i], ctx)?;
    }
    let g = match cfg.variant {
        Variant::NoCmaa => h,
        _ => cmaa(tape, &h, &p.cmaa)?,
    };
    let weights = match cfg.variant {
        Variant::NoMie => tape.constant(Tensor::filled(&[t_len, 3], 1.0 / 3.0)),
        _ => mie_weights(tape, &h, &g, &p.mie, cfg.mie_norm)?,
    };
    let z = fuse(tape, &g, weights)?;
    let (y_hat, feedback) = match cfg.variant {
        Variant::NoTfl => (classify(tape, z, &p.tfl)?, Vec::new()),
        _ => run_sequence_fed(tape, z, &p.tfl, &ProbabilityVector::uniform(cfg.classes), fixed)?,
    };
    Ok(ForwardOutput {
        y_hat,
        weights,
        h,
        g,
        z,
        feedback,
    })
}

/// Session inputs as the model sees them: three raw `[T×D_m]` tensors.
pub fn session_inputs(tape: &mut Tape, streams: &[ModalityStream; 3]) -> [Var; 3] {
    [
        tape.constant(streams[0].raw.clone()),
        tape.constant(streams[1].raw.clone()),
        tape.constant(streams[2].raw.clone()),
    ]
}

/// Evaluation-mode outputs for one session.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub y_hat: Vec<ProbabilityVector>,
    pub weights: ConfidenceWeights,
}

impl Prediction {
    pub fn classes(&self) -> Vec<usize> {
        self.y_hat.iter().map(|p| p.argmax()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor>,
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let params = ModelParams::init(&config, rng)?;
        Ok(Model { config, params })
    }

    pub fn predict(&self, streams: &[ModalityStream; 3]) -> Result<Prediction> {
        self.predict_raw(&[&streams[0].raw, &streams[1].raw, &streams[2].raw])
    }

    pub fn predict_raw(&self, raw: &[&Tensor; 3]) -> Result<Prediction> {
        let mut tape = Tape::new();
        let p = bind_const(&self.params, &mut tape);
        let inputs = [
            tape.constant(raw[0].clone()),
            tape.constant(raw[1].clone()),
            tape.constant(raw[2].clone()),
        ];
        let out = forward(&mut tape, &inputs, &p, &self.config, &mut Ctx::eval())?;
        let y = tape.value(out.y_hat);
        let y_hat = (0..y.rows())
            .map(|t| ProbabilityVector::new(y.row(t).to_vec()))
            .collect::<Result<_>>()?;
        Ok(Prediction {
            y_hat,
            weights: ConfidenceWeights::new(tape.value(out.weights).clone())?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::gradcheck::finite_diff_check;
    use crate::loss::{sequence_loss_tape, LossConfig};
    use crate::params::{bind, collect_grads, ParamTree};
    use rand::{Rng, SeedableRng};

    fn streams(cfg: &ModelConfig, t: usize, seed: u64) -> [ModalityStream; 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mk = |m: Modality, rng: &mut ChaCha8Rng| {
            let dim = cfg.raw_dims[m.index()];
            let data = (0..t * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            ModalityStream::new(m, Tensor::from_vec(&[t, dim], data).unwrap()).unwrap()
        };
        [mk(Modality::Audio, &mut rng), mk(Modality::Visual, &mut rng), mk(Modality::Text, &mut rng)]
    }

    #[test]
    fn predictions_are_on_the_simplex() {
        let cfg = ModelConfig::toy();
        let model = Model::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let pred = model.predict(&streams(&cfg, 4, 2)).unwrap();
        assert_eq!(pred.y_hat.len(), 4);
        assert_eq!(pred.weights.steps(), 4);
    }

    #[test]
    fn variants_run_and_differ() {
        let s = streams(&ModelConfig::toy(), 3, 4);
        let mut outs = Vec::new();
        for v in Variant::ALL {
            let cfg = ModelConfig { variant: v, ..ModelConfig::toy() };
            let model = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            let pred = model.predict(&s).unwrap();
            if v == Variant::NoMie {
                for t in 0..3 {
                    for m in Modality::ALL {
                        assert_eq!(pred.weights.get(t, m), 1.0 / 3.0);
                    }
                }
            }
            outs.push(pred.y_hat);
        }
        for i in 1..4 {
            assert_ne!(outs[0], outs[i]);
        }
    }

    #[test]
    fn swapping_encoders_changes_output() {
        let cfg = ModelConfig { raw_dims: [6, 6, 6], ..ModelConfig::toy() };
        let mut model = Model::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let s = streams(&cfg, 4, 6);
        let before = model.predict(&s).unwrap().y_hat;
        model.params.encoders.swap(0, 1);
        assert_ne!(before, model.predict(&s).unwrap().y_hat);
    }

    #[test]
    fn symmetric_model_on_identical_inputs_weights_equally() {
        let cfg = ModelConfig { raw_dims: [6, 6, 6], mie_shared: true, ..ModelConfig::toy() };
        let mut model = Model::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        model.params.symmetrize().unwrap();
        let s = streams(&cfg, 4, 8);
        let same = [s[0].raw.clone(), s[0].raw.clone(), s[0].raw.clone()];
        let pred = model.predict_raw(&[&same[0], &same[1], &same[2]]).unwrap();
        for t in 0..4 {
            for m in Modality::ALL {
                assert!((pred.weights.get(t, m) - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_wrong_feature_width_and_long_sessions() {
        let cfg = ModelConfig::toy();
        let model = Model::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let wrong = ModelConfig { raw_dims: [7, 6, 4], ..cfg.clone() };
        assert!(matches!(model.predict(&streams(&wrong, 2, 1)), Err(Error::Dimension(_))));
        assert!(matches!(model.predict(&streams(&cfg, 5, 1)), Err(Error::Capacity { .. })));
    }

    #[test]
    fn config_validation_names_field() {
        let cfg = ModelConfig { heads: 3, ..ModelConfig::default() };
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "model.heads"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn loss_gradient_through_full_model() {
        let cfg = ModelConfig::toy();
        let model = Model::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let s = streams(&cfg, 3, 12);
        let labels = [0, 2, 1];
        // feedback is a tape constant, so the objective that backward
        // differentiates keeps it at its base-point values
        let base = {
            let mut tape = Tape::new();
            let p = bind(&model.params, &mut tape);
            let x = session_inputs(&mut tape, &s);
            forward(&mut tape, &x, &p, &cfg, &mut Ctx::eval()).unwrap().feedback
        };
        let loss_and_grads = |params: &ModelParams<Tensor>| {
            let mut tape = Tape::new();
            let p = bind(params, &mut tape);
            let x = session_inputs(&mut tape, &s);
            let out = forward_fed(&mut tape, &x, &p, &cfg, &mut Ctx::eval(), Some(&base)).unwrap();
            let l = sequence_loss_tape(&mut tape, out.y_hat, &labels, LossConfig::default()).unwrap();
            let g = tape.backward(l.total).unwrap();
            (l.breakdown.total, collect_grads(&p, &g))
        };
        let (_, grads) = loss_and_grads(&model.params);
        let analytic: Vec<Vec<f64>> = grads.leaves().into_iter().cloned().collect();
        let mut flat: Vec<(String, Tensor)> = model
            .params
            .named_leaves()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let rebuild = |flat: &[(String, Tensor)]| {
            model.params.from_flat(flat.iter().map(|(_, t)| t.clone()).collect())
        };
        let rep = finite_diff_check(&mut flat, &analytic, |f| Ok(loss_and_grads(&rebuild(f)).0), 1e-5, 1e-4)
            .unwrap();
        assert!(rep.passed(), "{:?}", rep.blocks.iter().filter(|b| !b.passed).collect::<Vec<_>>());
    }
}
