//! Training loop, evaluation and checkpoints.
//!
//! Per-session gradients inside a batch are computed in parallel and summed
//! in session order, so results do not depend on the worker count.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::config::{canonical, parse_section};
use crate::container::{write_atomic, Header, Kind, Reader, Writer};
use crate::data::ModalitySession;
use crate::error::{Error, Result};
use crate::loss::{sequence_loss_tape, LossBreakdown, LossConfig, DEFAULT_LAMBDA};
use crate::metrics::ConfusionMatrix;
use crate::model::{forward, session_inputs, Model, ModelConfig, Variant};
use crate::nn::Ctx;
use crate::optim::{adamw_step, lr_schedule, AdamState};
use crate::params::{bind, ParamTree};
use crate::rng::stream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub dropout: f64,
    pub lambda: f64,
    pub stop_grad_prev: bool,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale preset.
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 1e-5,
            warmup_epochs: 3,
            decay_epochs: vec![20, 25],
            decay_factor: 0.1,
            dropout: 0.2,
            lambda: DEFAULT_LAMBDA,
            stop_grad_prev: false,
            patience: 5,
            seed: 42,
        }
    }
}

impl TrainConfig {
    /// Full-scale reference recipe.
    pub fn full_scale() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 128,
            lr: 1e-4,
            warmup_epochs: 5,
            decay_epochs: vec![30, 40],
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::config("train.patience", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be nonnegative"));
        }
        if !(self.decay_factor > 0.0) {
            return Err(Error::config("train.decay_factor", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("train.dropout", "must lie in [0, 1)"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::config("train.lambda", "must be nonnegative"));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("train.decay_epochs", "must be strictly increasing"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_schedule(epoch, self.lr, self.warmup_epochs, &self.decay_epochs, self.decay_factor)
    }

    /// The KL weight actually used for `variant`.
    pub fn loss_config(&self, variant: Variant) -> LossConfig {
        LossConfig {
            lambda: if variant == Variant::NoTfl { 0.0 } else { self.lambda },
            stop_grad_prev: self.stop_grad_prev,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops once the monitored metric has failed to improve for `patience`
/// consecutive epochs.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, metric: f64) -> StopDecision {
        if metric > self.best {
            self.best = metric;
            self.best_epoch = epoch;
            self.stale = 0;
            return StopDecision::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_ce: f64,
    pub train_kl: f64,
    pub train_total: f64,
    pub val_total: f64,
    pub val_acc: f64,
    pub val_macro_f1: f64,
}

pub const HISTORY_HEADER: [&str; 10] = [
    "epoch",
    "lr",
    "train_ce",
    "train_kl",
    "train_total",
    "val_total",
    "val_acc",
    "val_macro_f1",
    "config_hash",
    "seed",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self, config_hash: &str, seed: u64) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(HISTORY_HEADER).map_err(csv_err)?;
        for r in &self.epochs {
            w.write_record([
                r.epoch.to_string(),
                r.lr.to_string(),
                r.train_ce.to_string(),
                r.train_kl.to_string(),
                r.train_total.to_string(),
                r.val_total.to_string(),
                r.val_acc.to_string(),
                r.val_macro_f1.to_string(),
                config_hash.to_string(),
                seed.to_string(),
            ])
            .map_err(csv_err)?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| csv_err(e.into_error()))?).unwrap())
    }
}

pub(crate) fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation macro-F1.
    pub model: Model,
    pub history: TrainHistory,
    pub best_epoch: usize,
    pub best_val_macro_f1: f64,
}

/// Mean loss and summed gradients over `sessions`, in session order.
fn batch_gradients(
    model: &Model,
    sessions: &[&ModalitySession],
    loss_cfg: LossConfig,
    dropout: f64,
    dropout_label: &(dyn Fn(u64) -> String + Sync),
    seed: u64,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    let per_session: Vec<Result<(LossBreakdown, Vec<Vec<f64>>)>> = sessions
        .par_iter()
        .map(|s| {
            let mut rng = stream(seed, &dropout_label(s.id));
            let mut ctx = if dropout > 0.0 { Ctx::train(dropout, &mut rng) } else { Ctx::eval() };
            let mut tape = Tape::new();
            let p = bind(&model.params, &mut tape);
            let x = session_inputs(&mut tape, &s.streams);
            let out = forward(&mut tape, &x, &p, &model.config, &mut ctx)?;
            let loss = sequence_loss_tape(&mut tape, out.y_hat, &s.labels, loss_cfg)?;
            let g = tape.backward(loss.total)?;
            Ok((loss.breakdown, p.leaves().iter().map(|v| g.wrt(**v)).collect()))
        })
        .collect();
    let mut total = LossBreakdown { total: 0.0, ce: 0.0, kl: 0.0, lambda: loss_cfg.lambda };
    let mut acc: Option<Vec<Vec<f64>>> = None;
    let n = sessions.len() as f64;
    for r in per_session {
        let (b, g) = r?;
        total.total += b.total / n;
        total.ce += b.ce / n;
        total.kl += b.kl / n;
        match acc.as_mut() {
            None => acc = Some(g),
            Some(a) => {
                for (dst, src) in a.iter_mut().zip(&g) {
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
    let mut grads = acc.ok_or_else(|| Error::contract("empty batch"))?;
    for g in grads.iter_mut() {
        for v in g.iter_mut() {
            *v /= n;
        }
    }
    Ok((total, grads))
}

/// Fisher-Yates with a per-epoch stream.
fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, &format!("shuffle/{epoch}")));
    idx
}

pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &[ModalitySession],
    val_set: &[ModalitySession],
) -> Result<TrainOutcome> {
    train_with(model_cfg, cfg, train_set, val_set, &mut |_| {})
}

/// As [`train`], calling `observer` after every epoch.
pub fn train_with(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &[ModalitySession],
    val_set: &[ModalitySession],
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::contract("training needs nonempty train and validation splits"));
    }
    let mut model = Model::new(model_cfg.clone(), &mut stream(cfg.seed, "init"))?;
    let loss_cfg = cfg.loss_config(model_cfg.variant);
    let mut adam = AdamState::new(&model.params);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = TrainHistory::default();
    let mut best = model.clone();

    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let order = shuffled(train_set.len(), cfg.seed, epoch);
        let mut sum = LossBreakdown { total: 0.0, ce: 0.0, kl: 0.0, lambda: loss_cfg.lambda };
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&ModalitySession> = chunk.iter().map(|&i| &train_set[i]).collect();
            let label = |id: u64| format!("dropout/{epoch}/{id}");
            let (loss, grads) =
                batch_gradients(&model, &batch, loss_cfg, cfg.dropout, &label, cfg.seed)?;
            if !loss.total.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Training {
                    epoch,
                    batch: b + 1,
                    reason: format!("non-finite loss or gradient (loss = {})", loss.total),
                });
            }
            adamw_step(&mut model.params, &grads, &mut adam, lr, cfg.weight_decay)?;
            let w = batch.len() as f64 / train_set.len() as f64;
            sum.total += loss.total * w;
            sum.ce += loss.ce * w;
            sum.kl += loss.kl * w;
        }
        let val = evaluate(&model, val_set, loss_cfg)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_ce: sum.ce,
            train_kl: sum.kl,
            train_total: sum.total,
            val_total: val.loss_total,
            val_acc: val.accuracy,
            val_macro_f1: val.macro_f1,
        };
        observer(&record);
        history.epochs.push(record);
        match stopper.update(epoch, val.macro_f1) {
            StopDecision::Improved => best = model.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    Ok(TrainOutcome {
        model: best,
        history,
        best_epoch: stopper.best_epoch,
        best_val_macro_f1: stopper.best,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_kl: f64,
    pub steps: usize,
    pub confusion: Vec<Vec<u64>>,
}

/// Eval-mode metrics pooled over every step of every session.
pub fn evaluate(model: &Model, sessions: &[ModalitySession], loss_cfg: LossConfig) -> Result<MetricsRecord> {
    evaluate_with(sessions, model.config.classes, loss_cfg, |s| {
        let pred = model.predict(&s.streams)?;
        Ok(pred.y_hat.iter().map(|p| p.as_slice().to_vec()).collect())
    })
}

/// Metrics for any per-step predictor returning one distribution per step.
pub fn evaluate_with<F>(
    sessions: &[ModalitySession],
    classes: usize,
    loss_cfg: LossConfig,
    predict: F,
) -> Result<MetricsRecord>
where
    F: Fn(&ModalitySession) -> Result<Vec<Vec<f64>>> + Sync,
{
    if sessions.is_empty() {
        return Err(Error::contract("cannot evaluate an empty split"));
    }
    let per: Vec<Result<(Vec<usize>, LossBreakdown)>> = sessions
        .par_iter()
        .map(|s| {
            let y = predict(s)?;
            let t = y.len();
            let flat: Vec<f64> = y.iter().flatten().copied().collect();
            let mut tape = Tape::new();
            let v = tape.constant(Tensor::from_vec(&[t, classes], flat)?);
            let loss = sequence_loss_tape(&mut tape, v, &s.labels, loss_cfg)?;
            Ok((y.iter().map(|p| crate::tfl::argmax(p)).collect(), loss.breakdown))
        })
        .collect();
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    let (mut total, mut ce, mut kl) = (0.0, 0.0, 0.0);
    let n = sessions.len() as f64;
    for (r, s) in per.into_iter().zip(sessions) {
        let (p, b) = r?;
        preds.extend(p);
        labels.extend_from_slice(&s.labels);
        total += b.total / n;
        ce += b.ce / n;
        kl += b.kl / n;
    }
    let cm = ConfusionMatrix::new(&preds, &labels, classes)?;
    Ok(MetricsRecord {
        accuracy: cm.accuracy(),
        macro_f1: cm.macro_f1(),
        per_class_f1: cm.per_class_f1(),
        loss_total: total,
        loss_ce: ce,
        loss_kl: kl,
        steps: preds.len(),
        confusion: cm.rows(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub seed: u64,
    pub config_hash: String,
    /// Dataset the model was trained on.
    pub data_fingerprint: String,
    pub best_epoch: usize,
    pub best_val_macro_f1: f64,
}

pub fn serialize_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::new(&Header {
        kind: Kind::Checkpoint,
        seed: c.seed,
        config_hash: c.config_hash.clone(),
    });
    w.str(&canonical(&c.model.config));
    w.str(&c.data_fingerprint);
    w.u32(c.best_epoch as u32);
    w.f64(c.best_val_macro_f1);
    let leaves = c.model.params.named_leaves();
    w.u32(leaves.len() as u32);
    for (name, t) in leaves {
        w.str(&name);
        w.tensor(t);
    }
    w.finish()
}

pub fn deserialize_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, mut r) = Reader::open(bytes, Kind::Checkpoint)?;
    let at = r.offset();
    let config: ModelConfig = parse_section(&r.str()?)
        .map_err(|e| Error::format(at, format!("embedded model config: {e}")))?;
    config.validate().map_err(|e| Error::format(at, e.to_string()))?;
    let data_fingerprint = r.str()?;
    let best_epoch = r.u32()? as usize;
    let best_val_macro_f1 = r.f64()?;
    // a freshly initialized model fixes the expected names and shapes
    let template = Model::new(config.clone(), &mut stream(0, "template"))?;
    let expected = template.params.named_leaves();
    let count_at = r.offset();
    let n = r.u32()? as usize;
    if n != expected.len() {
        return Err(Error::format(
            count_at,
            format!("{n} parameter tensors, config implies {}", expected.len()),
        ));
    }
    let mut flat = Vec::with_capacity(n);
    for (want_name, want) in expected {
        let at = r.offset();
        let name = r.str()?;
        let t = r.tensor()?;
        if name != want_name || t.shape() != want.shape() {
            return Err(Error::format(
                at,
                format!("parameter `{name}` {:?}, expected `{want_name}` {:?}", t.shape(), want.shape()),
            ));
        }
        flat.push(t);
    }
    r.finish()?;
    Ok(Checkpoint {
        model: Model {
            params: template.params.from_flat(flat),
            config,
        },
        seed: header.seed,
        config_hash: header.config_hash,
        data_fingerprint,
        best_epoch,
        best_val_macro_f1,
    })
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &serialize_checkpoint(c))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    deserialize_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, GeneratorConfig};

    #[test]
    fn patience_one_stops_after_first_plateau() {
        let mut s = EarlyStopping::new(1);
        assert_eq!(s.update(1, 0.5), StopDecision::Improved);
        assert_eq!(s.update(2, 0.5), StopDecision::Stop);
        assert_eq!(s.best_epoch, 1);
    }

    #[test]
    fn never_runs_more_than_patience_past_best() {
        let metrics = [0.1, 0.3, 0.2, 0.35, 0.3, 0.3, 0.3, 0.9];
        let mut s = EarlyStopping::new(3);
        let mut stopped = None;
        for (i, m) in metrics.iter().enumerate() {
            if s.update(i + 1, *m) == StopDecision::Stop {
                stopped = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped, Some(7));
        assert_eq!(s.best_epoch, 4);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig { decay_epochs: vec![5, 5], ..TrainConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "train.decay_epochs"));
        assert_eq!(TrainConfig::default().loss_config(Variant::NoTfl).lambda, 0.0);
    }

    fn tiny() -> (ModelConfig, TrainConfig, crate::data::EmotionDataset) {
        let gen = GeneratorConfig {
            raw_dims: [5, 6, 4],
            steps: 4,
            train_sessions: 8,
            val_sessions: 4,
            test_sessions: 4,
            ..GeneratorConfig::default()
        };
        let tc = TrainConfig { epochs: 2, batch_size: 4, warmup_epochs: 1, ..TrainConfig::default() };
        (ModelConfig::toy(), tc, generate_dataset(&gen).unwrap())
    }

    #[test]
    fn training_is_deterministic_and_checkpoint_round_trips() {
        let (mc, tc, ds) = tiny();
        let a = train(&mc, &tc, &ds.train, &ds.val).unwrap();
        let b = train(&mc, &tc, &ds.train, &ds.val).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
        let ck = Checkpoint {
            model: a.model.clone(),
            seed: tc.seed,
            config_hash: "h".into(),
            data_fingerprint: ds.fingerprint.clone(),
            best_epoch: a.best_epoch,
            best_val_macro_f1: a.best_val_macro_f1,
        };
        let bytes = serialize_checkpoint(&ck);
        let back = deserialize_checkpoint(&bytes).unwrap();
        assert_eq!(back, ck);
        let again = evaluate(&back.model, &ds.val, tc.loss_config(mc.variant)).unwrap();
        assert_eq!(again.macro_f1, a.best_val_macro_f1);
        let mut corrupt = bytes.clone();
        let mid = corrupt.len() / 2;
        corrupt[mid] ^= 1;
        assert!(matches!(deserialize_checkpoint(&corrupt), Err(Error::Format { .. })));
    }

    #[test]
    fn empty_split_is_rejected() {
        let (mc, tc, ds) = tiny();
        assert!(matches!(train(&mc, &tc, &[], &ds.val), Err(Error::Contract(_))));
    }

    #[test]
    fn stub_predictors() {
        let (_, _, ds) = tiny();
        let oracle = evaluate_with(&ds.val, 4, LossConfig::default(), |s| {
            Ok(s.labels.iter().map(|&y| {
                let mut p = vec![0.0; 4];
                p[y] = 1.0;
                p
            }).collect())
        })
        .unwrap();
        assert_eq!(oracle.accuracy, 1.0);
        assert_eq!(oracle.steps, 16);
        let a = evaluate_with(&ds.val, 4, LossConfig::default(), |s| Ok(vec![vec![0.25; 4]; s.len()])).unwrap();
        let b = evaluate_with(&ds.val, 4, LossConfig::default(), |s| Ok(vec![vec![0.25; 4]; s.len()])).unwrap();
        assert_eq!(a, b);
    }
}
