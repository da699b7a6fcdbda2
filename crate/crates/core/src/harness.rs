//! Experiment protocols at desk scale: paired missing-modality sweeps,
//! confidence traces, variant ablations, and the numerical theory checks.
//!
//! Every tabular output carries the config hash and seed in its rows, and
//! files are named `<experiment>_<confighash>_<seed>.csv`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::autodiff::Tape;
use crate::data::{inject_missing, EmotionDataset, MissingMode, ModalitySession};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_check, FdReport};
use crate::lipschitz::{lipschitz_bound, lipschitz_empirical, DomainBounds};
use crate::loss::{kl_divergence, sequence_loss_tape, LossConfig};
use crate::metrics::ConfusionMatrix;
use crate::modality::{Modality, ModalityStream};
use crate::model::{forward_fed, session_inputs, Model, ModelConfig, ModelParams, Variant};
use crate::nn::Ctx;
use crate::params::{bind, collect_grads, ParamTree};
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::tfl::{contraction_bound, iterate_fixed_point, tfl_step, ProbabilityVector, TflParams};
use crate::train::{evaluate, train, Checkpoint, MetricsRecord, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct HarnessConfig {
    pub rates: Vec<f64>,
    pub mode: MissingMode,
    pub seeds: Vec<u64>,
    pub lipschitz_samples: usize,
    pub lipschitz_eps: f64,
    /// Contraction bound the fixed-point check rescales its head to.
    pub fixed_point_bound: f64,
    pub fixed_point_trials: usize,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            rates: vec![0.0, 0.2, 0.4, 0.6],
            mode: MissingMode::AtMostOne,
            seeds: vec![1, 2, 3],
            lipschitz_samples: 1000,
            lipschitz_eps: 1e-3,
            fixed_point_bound: 0.9,
            fixed_point_trials: 100,
        }
    }
}

impl HarnessConfig {
    pub fn validate(&self) -> Result<()> {
        validate_rates(&self.rates).map_err(|e| Error::config("harness.rates", e.to_string()))?;
        if self.seeds.is_empty() {
            return Err(Error::config("harness.seeds", "at least one seed required"));
        }
        if self.lipschitz_samples == 0 {
            return Err(Error::config("harness.lipschitz_samples", "must be positive"));
        }
        if !(self.lipschitz_eps > 0.0) {
            return Err(Error::config("harness.lipschitz_eps", "must be positive"));
        }
        if !(self.fixed_point_bound > 0.0 && self.fixed_point_bound < 1.0) {
            return Err(Error::config("harness.fixed_point_bound", "must lie in (0, 1)"));
        }
        if self.fixed_point_trials == 0 {
            return Err(Error::config("harness.fixed_point_trials", "must be positive"));
        }
        Ok(())
    }
}

fn validate_rates(rates: &[f64]) -> Result<()> {
    if rates.is_empty() {
        return Err(Error::contract("no missing rates given"));
    }
    if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::contract("missing rates must lie in [0, 1]"));
    }
    if rates.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::contract("missing rates must be strictly increasing"));
    }
    Ok(())
}

/// `<experiment>_<confighash>_<seed>.csv`
pub fn output_name(experiment: &str, config_hash: &str, seed: u64) -> String {
    format!("{experiment}_{config_hash}_{seed}.csv")
}

fn csv_string(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(crate::train::csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(crate::train::csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

// missing-modality sweep

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepCell {
    pub model: String,
    pub rate: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepResult {
    pub rates: Vec<f64>,
    pub models: Vec<String>,
    /// Config hash of each model, in `models` order.
    pub config_hashes: Vec<String>,
    pub seed: u64,
    pub mode: String,
    pub data_fingerprint: String,
    /// Model-major, rate-minor.
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    pub fn cell(&self, model: &str, rate: f64) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.model == model && c.rate == rate)
    }

    /// Accuracy at the first rate minus accuracy at the last.
    pub fn accuracy_drop(&self, model: &str) -> Option<f64> {
        let first = self.cell(model, *self.rates.first()?)?;
        let last = self.cell(model, *self.rates.last()?)?;
        Some(first.accuracy - last.accuracy)
    }

    pub fn to_csv(&self) -> Result<String> {
        csv_string(
            &["model", "rate", "accuracy", "macro_f1", "mode", "config_hash", "seed"],
            self.cells.iter().map(|c| {
                let i = self.models.iter().position(|m| *m == c.model).unwrap();
                vec![
                    c.model.clone(),
                    c.rate.to_string(),
                    c.accuracy.to_string(),
                    c.macro_f1.to_string(),
                    self.mode.clone(),
                    self.config_hashes[i].clone(),
                    self.seed.to_string(),
                ]
            }),
        )
    }
}

/// The test split with modalities dropped at `rate`. Masks depend only on
/// `(seed, rate, session id)`, so every model in a sweep sees the same ones.
pub fn masked_split(
    sessions: &[ModalitySession],
    rate: f64,
    mode: MissingMode,
    seed: u64,
) -> Result<Vec<ModalitySession>> {
    sessions
        .iter()
        .map(|s| inject_missing(s, rate, mode, &mut stream(seed, &format!("sweep/{rate}/{}", s.id))))
        .collect()
}

/// Evaluates every named checkpoint on the masked test split at each rate.
pub fn missing_rate_sweep(
    models: &[(String, Checkpoint)],
    test: &[ModalitySession],
    data_fingerprint: &str,
    rates: &[f64],
    mode: MissingMode,
    seed: u64,
) -> Result<SweepResult> {
    validate_rates(rates)?;
    for (name, c) in models {
        if c.data_fingerprint != data_fingerprint {
            return Err(Error::Protocol(format!(
                "model `{name}` was trained on data {}, sweep uses {data_fingerprint}",
                c.data_fingerprint
            )));
        }
    }
    let mut per_rate = Vec::with_capacity(rates.len());
    for &rate in rates {
        let split = masked_split(test, rate, mode, seed)?;
        let mut row = Vec::with_capacity(models.len());
        for (_, c) in models {
            row.push(evaluate(&c.model, &split, LossConfig::default())?);
        }
        per_rate.push(row);
    }
    let mut cells = Vec::new();
    for (mi, (name, _)) in models.iter().enumerate() {
        for (ri, &rate) in rates.iter().enumerate() {
            let m = &per_rate[ri][mi];
            cells.push(SweepCell {
                model: name.clone(),
                rate,
                accuracy: m.accuracy,
                macro_f1: m.macro_f1,
            });
        }
    }
    Ok(SweepResult {
        rates: rates.to_vec(),
        models: models.iter().map(|(n, _)| n.clone()).collect(),
        config_hashes: models.iter().map(|(_, c)| c.config_hash.clone()).collect(),
        seed,
        mode: mode.as_str().to_string(),
        data_fingerprint: data_fingerprint.to_string(),
        cells,
    })
}

// confidence trace

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    /// Fusion weight per modality in audio, visual, text order.
    pub weights: [f64; 3],
    pub present: [bool; 3],
    pub sigma: [f64; 3],
    pub label: usize,
    pub pred: usize,
}

pub const TRACE_HEADER: [&str; 16] = [
    "session", "step", "w_audio", "w_visual", "w_text", "present_audio", "present_visual",
    "present_text", "sigma_audio", "sigma_visual", "sigma_text", "label", "pred", "variant",
    "config_hash", "seed",
];

/// Per-step fusion weights joined with the session's presence and noise
/// metadata.
pub fn confidence_trace(model: &Model, session: &ModalitySession) -> Result<Vec<TraceRow>> {
    let pred = model.predict(&session.streams)?;
    let classes = pred.classes();
    Ok((0..session.len())
        .map(|t| TraceRow {
            step: t,
            weights: Modality::ALL.map(|m| pred.weights.get(t, m)),
            present: Modality::ALL.map(|m| session.streams[m.index()].present[t]),
            sigma: Modality::ALL.map(|m| session.noise_sigma.at(t, m.index())),
            label: session.labels[t],
            pred: classes[t],
        })
        .collect())
}

pub fn trace_to_csv(
    session_id: u64,
    rows: &[TraceRow],
    variant: Variant,
    config_hash: &str,
    seed: u64,
) -> Result<String> {
    csv_string(
        &TRACE_HEADER,
        rows.iter().map(|r| {
            let mut v = vec![session_id.to_string(), r.step.to_string()];
            v.extend(r.weights.iter().map(|x| x.to_string()));
            v.extend(r.present.iter().map(|x| (*x as u8).to_string()));
            v.extend(r.sigma.iter().map(|x| x.to_string()));
            v.extend([
                r.label.to_string(),
                r.pred.to_string(),
                variant.to_string(),
                config_hash.to_string(),
                seed.to_string(),
            ]);
            v
        }),
    )
}

/// Mean weight of modality `m` on the steps in `inside` and on the rest.
pub fn mean_weight_split(rows: &[TraceRow], m: Modality, inside: impl Fn(usize) -> bool) -> (f64, f64) {
    let (mut a, mut na, mut b, mut nb) = (0.0, 0, 0.0, 0);
    for r in rows {
        if inside(r.step) {
            a += r.weights[m.index()];
            na += 1;
        } else {
            b += r.weights[m.index()];
            nb += 1;
        }
    }
    (a / na.max(1) as f64, b / nb.max(1) as f64)
}

// ablation

#[derive(Clone, Debug)]
pub struct AblationCell {
    pub variant: Variant,
    pub seed: u64,
    pub test: MetricsRecord,
    pub best_epoch: usize,
    pub best_val_macro_f1: f64,
    pub checkpoint: Checkpoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        MeanStd { mean, std }
    }
}

impl std::fmt::Display for MeanStd {
    /// Two decimals for the mean, three for the spread: `0.88 ± 0.009`.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {:.3}", self.mean, self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub description: &'static str,
    pub accuracy: MeanStd,
    pub macro_f1: MeanStd,
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// Variant-major, seed-minor.
    pub cells: Vec<AblationCell>,
    pub rows: Vec<AblationRow>,
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

fn table_label(v: Variant) -> &'static str {
    match v {
        Variant::Full => "Full Model",
        Variant::NoCmaa => "– CMAA",
        Variant::NoMie => "– MIE",
        Variant::NoTfl => "– TFL",
    }
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn cell(&self, v: Variant, seed: u64) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.variant == v && c.seed == seed)
    }

    /// Ablations first, full model last.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Setting | Accuracy | Macro-F1 |\n|---|---|---|\n");
        let mut rows: Vec<&AblationRow> = self.rows.iter().filter(|r| r.variant != Variant::Full).collect();
        rows.extend(self.row(Variant::Full));
        for r in rows {
            s.push_str(&format!("| {} | {} | {} |\n", table_label(r.variant), r.accuracy, r.macro_f1));
        }
        s
    }

    pub fn to_csv(&self) -> Result<String> {
        csv_string(
            &["variant", "seed", "accuracy", "macro_f1", "best_epoch", "best_val_macro_f1", "config_hash"],
            self.cells.iter().map(|c| {
                vec![
                    c.variant.to_string(),
                    c.seed.to_string(),
                    c.test.accuracy.to_string(),
                    c.test.macro_f1.to_string(),
                    c.best_epoch.to_string(),
                    c.best_val_macro_f1.to_string(),
                    self.config_hash.clone(),
                ]
            }),
        )
    }

    pub fn summary_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Summary<'a> {
            config_hash: &'a str,
            seeds: &'a [u64],
            rows: &'a [AblationRow],
            table: String,
        }
        serde_json::to_string_pretty(&Summary {
            config_hash: &self.config_hash,
            seeds: &self.seeds,
            rows: &self.rows,
            table: self.to_markdown(),
        })
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }
}

/// Trains each variant once per seed on the same data and reports test
/// metrics with mean ± std across seeds.
pub fn run_ablation(
    variants: &[Variant],
    ds: &EmotionDataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seeds: &[u64],
    config_hash: &str,
) -> Result<AblationTable> {
    run_ablation_with(variants, ds, model_cfg, train_cfg, seeds, config_hash, &mut |_| {})
}

/// As [`run_ablation`], calling `progress` after each finished cell.
pub fn run_ablation_with(
    variants: &[Variant],
    ds: &EmotionDataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seeds: &[u64],
    config_hash: &str,
    progress: &mut dyn FnMut(&AblationCell),
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::config("harness.seeds", "at least one seed required"));
    }
    if variants.is_empty() {
        return Err(Error::config("model.variant", "no variants requested"));
    }
    let mut cells = Vec::new();
    for &variant in variants {
        let mcfg = ModelConfig { variant, ..model_cfg.clone() };
        for &seed in seeds {
            let tcfg = TrainConfig { seed, ..train_cfg.clone() };
            let out = train(&mcfg, &tcfg, &ds.train, &ds.val)?;
            let test = evaluate(&out.model, &ds.test, tcfg.loss_config(variant))?;
            let cell = AblationCell {
                variant,
                seed,
                test,
                best_epoch: out.best_epoch,
                best_val_macro_f1: out.best_val_macro_f1,
                checkpoint: Checkpoint {
                    model: out.model,
                    seed,
                    config_hash: config_hash.to_string(),
                    data_fingerprint: ds.fingerprint.clone(),
                    best_epoch: out.best_epoch,
                    best_val_macro_f1: out.best_val_macro_f1,
                },
            };
            progress(&cell);
            cells.push(cell);
        }
    }
    let rows = variants
        .iter()
        .map(|&v| {
            let of = |f: fn(&MetricsRecord) -> f64| {
                MeanStd::of(&cells.iter().filter(|c| c.variant == v).map(|c| f(&c.test)).collect::<Vec<_>>())
            };
            AblationRow {
                variant: v,
                description: v.description(),
                accuracy: of(|m| m.accuracy),
                macro_f1: of(|m| m.macro_f1),
            }
        })
        .collect();
    Ok(AblationTable {
        config_hash: config_hash.to_string(),
        seeds: seeds.to_vec(),
        cells,
        rows,
    })
}

// theory checks

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// Random sessions for the gradient check.
fn grad_sessions(cfg: &ModelConfig, steps: usize, n: usize, seed: u64) -> Result<Vec<GradSession>> {
    let mut rng = stream(seed, "grad-check");
    (0..n)
        .map(|_| {
            let mut mk = |m: Modality| {
                let d = cfg.raw_dims[m.index()];
                let data = (0..steps * d).map(|_| StandardNormal.sample(&mut rng)).collect();
                ModalityStream::new(m, Tensor::from_vec(&[steps, d], data)?)
            };
            let streams = [mk(Modality::Audio)?, mk(Modality::Visual)?, mk(Modality::Text)?];
            let labels = (0..steps).map(|_| rng.gen_range(0..cfg.classes)).collect();
            Ok((streams, labels))
        })
        .collect()
}

type GradSession = ([ModalityStream; 3], Vec<usize>);

/// Mean sequence loss over `sessions` and its analytic gradient, with each
/// session's feedback vectors pinned to `feedback` when given. Returns the
/// feedback actually used.
fn loss_and_grads(
    params: &ModelParams<Tensor>,
    cfg: &ModelConfig,
    sessions: &[GradSession],
    feedback: Option<&[Vec<Vec<f64>>]>,
) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>)> {
    let mut tape = Tape::new();
    let p = bind(params, &mut tape);
    let mut total = None;
    let mut used = Vec::with_capacity(sessions.len());
    for (i, (streams, labels)) in sessions.iter().enumerate() {
        let x = session_inputs(&mut tape, streams);
        let fixed = feedback.map(|f| f[i].as_slice());
        let out = forward_fed(&mut tape, &x, &p, cfg, &mut Ctx::eval(), fixed)?;
        used.push(out.feedback);
        let l = sequence_loss_tape(&mut tape, out.y_hat, labels, LossConfig::default())?;
        total = Some(match total {
            None => l.total,
            Some(t) => tape.add(t, l.total)?,
        });
    }
    let total = total.ok_or_else(|| Error::contract("no sessions"))?;
    let mean = tape.scale(total, 1.0 / sessions.len() as f64);
    let value = tape.value(mean).data()[0];
    let g = tape.backward(mean)?;
    Ok((value, collect_grads(&p, &g).leaves().into_iter().cloned().collect(), used))
}

/// Central finite differences against the analytic gradient of the full
/// model's loss, block by block.
///
/// The previous prediction enters each feedback step as a constant, so the
/// differenced objective holds those vectors at their base-point values; the
/// loss's own dependence on every prediction stays live.
pub fn check_gradients(cfg: &ModelConfig, steps: usize, sessions: usize, seed: u64) -> Result<FdReport> {
    let model = Model::new(cfg.clone(), &mut stream(seed, "init"))?;
    let data = grad_sessions(cfg, steps, sessions, seed)?;
    let (_, analytic, feedback) = loss_and_grads(&model.params, cfg, &data, None)?;
    let mut flat: Vec<(String, Tensor)> =
        model.params.named_leaves().into_iter().map(|(n, t)| (n, t.clone())).collect();
    finite_diff_check(
        &mut flat,
        &analytic,
        |f| {
            let p = model.params.from_flat(f.iter().map(|(_, t)| t.clone()).collect());
            Ok(loss_and_grads(&p, cfg, &data, Some(&feedback))?.0)
        },
        GRAD_STEP,
        GRAD_TOL,
    )
}

/// The toy model size used by the gradient check: width 8.
pub fn grad_check_config() -> ModelConfig {
    ModelConfig::toy()
}

#[derive(Clone, Debug, Serialize)]
pub struct FixedPointReport {
    pub contraction_bound: f64,
    pub trials: usize,
    pub converged: usize,
    pub max_iterations: usize,
    /// Largest move of one further map application at a reported fixed point.
    pub max_residual_step: f64,
    pub max_residual_kl: f64,
    /// Largest gap between fixed points reached from two different starts.
    pub max_uniqueness_gap: f64,
    pub max_contraction_ratio: f64,
    pub passed: bool,
}

pub const FIXED_POINT_MAX_ITER: usize = 500;
pub const FIXED_POINT_TOL: f64 = 1e-9;

fn random_simplex(k: usize, rng: &mut impl Rng) -> ProbabilityVector {
    let e: Vec<f64> = (0..k).map(|_| -rng.gen::<f64>().max(1e-300).ln()).collect();
    let s: f64 = e.iter().sum();
    ProbabilityVector::new(e.iter().map(|v| v / s).collect()).expect("normalized")
}

/// Iterates the feedback map `y ↦ step(z, y)` for a head small enough to be
/// a contraction and checks convergence, stationarity, uniqueness and the
/// per-step contraction ratio against the computed bound.
pub fn check_fixed_point(cfg: &ModelConfig, h: &HarnessConfig, seed: u64) -> Result<FixedPointReport> {
    let mut rng = stream(seed, "fixed-point");
    let mut p = TflParams::init(cfg.d, cfg.classes, cfg.cls_hidden, 1.0, &mut rng);
    // the bound is a product of three weight norms, so it scales as c³
    let c = (h.fixed_point_bound / contraction_bound(&p)?).cbrt();
    p.scale_weights(c);
    let bound = contraction_bound(&p)?;
    let mut rep = FixedPointReport {
        contraction_bound: bound,
        trials: h.fixed_point_trials,
        converged: 0,
        max_iterations: 0,
        max_residual_step: 0.0,
        max_residual_kl: 0.0,
        max_uniqueness_gap: 0.0,
        max_contraction_ratio: 0.0,
        passed: false,
    };
    for _ in 0..h.fixed_point_trials {
        let z_data: Vec<f64> = (0..cfg.d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let z = Tensor::vector(&z_data);
        let y0 = random_simplex(cfg.classes, &mut rng);
        let y1 = random_simplex(cfg.classes, &mut rng);
        let a = iterate_fixed_point(&z, &y0, &p, FIXED_POINT_MAX_ITER, FIXED_POINT_TOL)?;
        let b = iterate_fixed_point(&z, &y1, &p, FIXED_POINT_MAX_ITER, FIXED_POINT_TOL)?;
        if a.converged && b.converged {
            rep.converged += 1;
        }
        rep.max_iterations = rep.max_iterations.max(a.iterations).max(b.iterations);
        let (next, _) = tfl_step(&z, &a.y_star, &p)?;
        rep.max_residual_step = rep.max_residual_step.max(next.max_abs_diff(&a.y_star));
        rep.max_residual_kl = rep.max_residual_kl.max(kl_divergence(&a.y_star, &next));
        rep.max_uniqueness_gap = rep.max_uniqueness_gap.max(a.y_star.max_abs_diff(&b.y_star));
        for r in a.contraction_ratios(1e-12).into_iter().chain(b.contraction_ratios(1e-12)) {
            rep.max_contraction_ratio = rep.max_contraction_ratio.max(r);
        }
    }
    rep.passed = bound < 1.0
        && rep.converged == rep.trials
        && rep.max_residual_step < 1e-8
        && rep.max_residual_kl < 1e-8
        && rep.max_uniqueness_gap < 1e-8
        && rep.max_contraction_ratio <= bound + 1e-6;
    Ok(rep)
}

#[derive(Clone, Debug, Serialize)]
pub struct LipschitzRow {
    pub modality: Modality,
    /// `None` with all inputs present, otherwise the modality zeroed out.
    pub zeroed: Option<Modality>,
    pub empirical: f64,
    pub bound: f64,
}

impl Serialize for Modality {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LipschitzReport {
    pub samples: usize,
    pub eps: f64,
    pub rows: Vec<LipschitzRow>,
    pub passed: bool,
}

/// Perturbation probe against the analytic bound for each modality, once
/// with every input present and once with another modality zeroed.
pub fn check_lipschitz(
    model: &Model,
    session: &ModalitySession,
    samples: usize,
    eps: f64,
    seed: u64,
) -> Result<LipschitzReport> {
    let mut rows = Vec::new();
    for m in Modality::ALL {
        for zeroed in [None, Some(m.others()[0])] {
            let mut raw: Vec<Tensor> = session.streams.iter().map(|s| s.raw.clone()).collect();
            if let Some(z) = zeroed {
                raw[z.index()] = Tensor::zeros(raw[z.index()].shape());
            }
            let refs = [&raw[0], &raw[1], &raw[2]];
            let bound = lipschitz_bound(model, &DomainBounds::covering(&refs, eps))?[m.index()];
            let empirical = lipschitz_empirical(model, &refs, m, samples, eps, seed)?;
            rows.push(LipschitzRow { modality: m, zeroed, empirical, bound });
        }
    }
    let passed = rows.iter().all(|r| r.empirical.is_finite() && r.empirical <= r.bound);
    Ok(LipschitzReport { samples, eps, rows, passed })
}

/// Chance-level reference: accuracy of always predicting the uniform
/// distribution (argmax breaks ties towards class 0) is the class-0 share.
pub fn uniform_predictor_accuracy(sessions: &[ModalitySession], classes: usize) -> Result<f64> {
    let labels: Vec<usize> = sessions.iter().flat_map(|s| s.labels.iter().copied()).collect();
    Ok(ConfusionMatrix::new(&vec![0; labels.len()], &labels, classes)?.accuracy())
}
