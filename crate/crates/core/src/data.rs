//! Synthetic multimodal sessions.
//!
//! Labels follow a sticky first-order Markov chain over the classes. Each
//! modality emits `μ_{m,c} + N(0, σ_m(t)² I)` where the class means are
//! random unit vectors fixed by the dataset seed.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{canonical, parse_section, short_hash};
use crate::container::{write_atomic, Header, Kind, Reader, Writer};
use crate::error::{Error, Result};
use crate::modality::{Modality, ModalityStream};
use crate::rng::stream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MissingMode {
    /// Per step, with probability `rate`, exactly one modality is zeroed.
    AtMostOne,
    /// Each (step, modality) cell is zeroed independently.
    Independent,
}

impl MissingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MissingMode::AtMostOne => "at_most_one",
            MissingMode::Independent => "independent",
        }
    }
}

impl FromStr for MissingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "at_most_one" => Ok(MissingMode::AtMostOne),
            "independent" => Ok(MissingMode::Independent),
            _ => Err(Error::config("missing_mode", format!("unknown mode `{s}`"))),
        }
    }
}

impl fmt::Display for MissingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseSchedule {
    Constant,
    /// Audio noise raised by `burst_factor` on steps 3 to 5 (1-based).
    AudioBurst,
}

/// Zero-based steps covered by the audio burst.
pub const BURST_STEPS: std::ops::Range<usize> = 2..5;

impl NoiseSchedule {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseSchedule::Constant => "constant",
            NoiseSchedule::AudioBurst => "audio_burst",
        }
    }
}

impl FromStr for NoiseSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(NoiseSchedule::Constant),
            "audio_burst" => Ok(NoiseSchedule::AudioBurst),
            _ => Err(Error::config("generator.noise_schedule", format!("unknown schedule `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub classes: usize,
    pub steps: usize,
    pub self_transition: f64,
    pub raw_dims: [usize; 3],
    pub noise_sigma: [f64; 3],
    pub noise_schedule: NoiseSchedule,
    pub burst_factor: f64,
    pub missing_rate: f64,
    pub missing_mode: MissingMode,
    pub train_sessions: usize,
    pub val_sessions: usize,
    pub test_sessions: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            classes: 4,
            steps: 20,
            self_transition: 0.85,
            raw_dims: [40, 64, 32],
            noise_sigma: [0.6, 0.5, 0.7],
            noise_schedule: NoiseSchedule::Constant,
            burst_factor: 4.0,
            missing_rate: 0.0,
            missing_mode: MissingMode::AtMostOne,
            train_sessions: 600,
            val_sessions: 100,
            test_sessions: 200,
            seed: 42,
        }
    }
}

impl GeneratorConfig {
    /// Harder variant used for the robustness and ablation protocols: an
    /// audio burst in every session, noisier streams, and a share of steps
    /// with one modality already dropped.
    pub fn noisy() -> Self {
        GeneratorConfig {
            noise_sigma: [0.8, 0.8, 0.9],
            noise_schedule: NoiseSchedule::AudioBurst,
            missing_rate: 0.2,
            ..GeneratorConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("generator.classes", self.classes),
            ("generator.steps", self.steps),
            ("generator.train_sessions", self.train_sessions),
            ("generator.val_sessions", self.val_sessions),
            ("generator.test_sessions", self.test_sessions),
            ("generator.raw_dims", self.raw_dims.iter().copied().min().unwrap()),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.classes < 2 {
            return Err(Error::config("generator.classes", "need at least two classes"));
        }
        if !(0.0..=1.0).contains(&self.self_transition) {
            return Err(Error::config("generator.self_transition", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.missing_rate) {
            return Err(Error::config("generator.missing_rate", "must lie in [0, 1]"));
        }
        if self.noise_sigma.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::config("generator.noise_sigma", "must be finite and nonnegative"));
        }
        if !(self.burst_factor >= 0.0 && self.burst_factor.is_finite()) {
            return Err(Error::config("generator.burst_factor", "must be finite and nonnegative"));
        }
        Ok(())
    }

    /// Row-stochastic `[K×K]` matrix with `self_transition` on the diagonal
    /// and the rest spread evenly.
    pub fn transition_matrix(&self) -> Tensor {
        let k = self.classes;
        let off = (1.0 - self.self_transition) / (k - 1) as f64;
        let mut p = Tensor::filled(&[k, k], off);
        for c in 0..k {
            p.data_mut()[c * k + c] = self.self_transition;
        }
        p
    }

    /// Noise scale of modality `m` at zero-based step `t`.
    pub fn sigma(&self, m: Modality, t: usize) -> f64 {
        let base = self.noise_sigma[m.index()];
        match self.noise_schedule {
            NoiseSchedule::AudioBurst if m == Modality::Audio && BURST_STEPS.contains(&t) => {
                base * self.burst_factor
            }
            _ => base,
        }
    }

    pub fn hash(&self) -> String {
        short_hash(&canonical(self))
    }

    pub fn fingerprint(&self) -> String {
        format!("{}-{}", self.hash(), self.seed)
    }
}

/// Draws a state sequence with a uniform initial state.
pub fn sample_markov_chain(steps: usize, p: &Tensor, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let k = p.rows();
    if p.shape() != [k, k] || k == 0 {
        return Err(Error::contract(format!("transition matrix must be square, got {:?}", p.shape())));
    }
    for r in 0..k {
        let row = p.row(r);
        if row.iter().any(|v| !(*v >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!("transition row {r} is not a distribution")));
        }
    }
    let mut states = Vec::with_capacity(steps);
    let mut s = rng.gen_range(0..k);
    for t in 0..steps {
        if t > 0 {
            s = sample_categorical(p.row(s), rng);
        }
        states.push(s);
    }
    Ok(states)
}

fn sample_categorical(p: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // u fell in the rounding gap above the cumulative sum
    p.iter().rposition(|v| *v > 0.0).unwrap_or(p.len() - 1)
}

/// Random unit-norm class means, one `[K × D_m]` table per modality.
pub fn emission_means(cfg: &GeneratorConfig) -> [Tensor; 3] {
    let mut rng = stream(cfg.seed, "emission-means");
    Modality::ALL.map(|m| {
        let dim = cfg.raw_dims[m.index()];
        let mut data = Vec::with_capacity(cfg.classes * dim);
        for _ in 0..cfg.classes {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            data.extend(v.iter().map(|x| x / n));
        }
        Tensor::from_vec(&[cfg.classes, dim], data).unwrap()
    })
}

/// `x^m_t = μ_{m,c_t} + σ_m(t) ε`, with `sigma(m, t)` giving the scale.
pub fn emit_observations(
    states: &[usize],
    means: &[Tensor; 3],
    sigma: impl Fn(Modality, usize) -> f64,
    rng: &mut ChaCha8Rng,
) -> Result<[ModalityStream; 3]> {
    let mut out = Vec::with_capacity(3);
    for m in Modality::ALL {
        let mu = &means[m.index()];
        let dim = mu.cols();
        let mut data = Vec::with_capacity(states.len() * dim);
        for (t, &c) in states.iter().enumerate() {
            if c >= mu.rows() {
                return Err(Error::contract(format!("state {c} has no emission mean")));
            }
            let s = sigma(m, t);
            for &v in mu.row(c) {
                let e: f64 = StandardNormal.sample(rng);
                data.push(v + s * e);
            }
        }
        out.push(ModalityStream::new(m, Tensor::from_vec(&[states.len(), dim], data)?)?);
    }
    Ok(out.try_into().unwrap())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalitySession {
    pub id: u64,
    pub streams: [ModalityStream; 3],
    pub labels: Vec<usize>,
    /// `[T×3]` noise scale used for each step and modality.
    pub noise_sigma: Tensor,
}

impl ModalitySession {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of steps with exactly `n` modalities absent.
    pub fn steps_missing(&self, n: usize) -> usize {
        (0..self.len())
            .filter(|&t| self.streams.iter().filter(|s| !s.present[t]).count() == n)
            .count()
    }
}

/// Zeroes modality rows according to `mode`; `rate = 0` leaves the session
/// untouched.
pub fn inject_missing(
    session: &ModalitySession,
    rate: f64,
    mode: MissingMode,
    rng: &mut ChaCha8Rng,
) -> Result<ModalitySession> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::contract(format!("missing rate {rate} outside [0, 1]")));
    }
    let t_len = session.len();
    let mut masks = [vec![true; t_len], vec![true; t_len], vec![true; t_len]];
    for t in 0..t_len {
        match mode {
            MissingMode::AtMostOne => {
                if rng.gen::<f64>() < rate {
                    masks[rng.gen_range(0..3)][t] = false;
                }
            }
            MissingMode::Independent => {
                for mask in masks.iter_mut() {
                    if rng.gen::<f64>() < rate {
                        mask[t] = false;
                    }
                }
            }
        }
    }
    let mut out = session.clone();
    for (s, mask) in out.streams.iter_mut().zip(&masks) {
        *s = s.apply_missing_mask(mask)?;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::config("split", format!("unknown split `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmotionDataset {
    pub config: GeneratorConfig,
    pub means: [Tensor; 3],
    pub train: Vec<ModalitySession>,
    pub val: Vec<ModalitySession>,
    pub test: Vec<ModalitySession>,
    /// As recorded when the dataset was produced.
    pub fingerprint: String,
}

impl EmotionDataset {
    pub fn split(&self, s: Split) -> &[ModalitySession] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Differences between the recorded fingerprint and the one implied by
    /// the stored generator config.
    pub fn integrity_warnings(&self) -> Vec<String> {
        let expected = self.config.fingerprint();
        if expected == self.fingerprint {
            Vec::new()
        } else {
            vec![format!(
                "dataset fingerprint {} does not match its generator config ({expected})",
                self.fingerprint
            )]
        }
    }

    /// Share of each class among all labels of a split.
    pub fn class_shares(&self, s: Split) -> Vec<f64> {
        let mut counts = vec![0usize; self.config.classes];
        let mut total = 0;
        for sess in self.split(s) {
            for &y in &sess.labels {
                counts[y] += 1;
                total += 1;
            }
        }
        counts.iter().map(|&c| c as f64 / total as f64).collect()
    }
}

/// Relabels `labels` so the classes it visits most land on the classes that
/// are rarest in `totals` so far, then adds its counts to `totals`.
///
/// Transition matrices with a fixed self-transition and uniform switching are
/// invariant under class permutations, so the relabeled chain has the same law.
fn balance_labels(labels: &mut [usize], totals: &mut [usize]) {
    let k = totals.len();
    let mut counts = vec![0usize; k];
    for &y in labels.iter() {
        counts[y] += 1;
    }
    let mut by_count: Vec<usize> = (0..k).collect();
    by_count.sort_by_key(|&c| (std::cmp::Reverse(counts[c]), c));
    let mut by_total: Vec<usize> = (0..k).collect();
    by_total.sort_by_key(|&c| (totals[c], c));
    let mut perm = vec![0usize; k];
    for (from, to) in by_count.into_iter().zip(by_total) {
        perm[from] = to;
    }
    for y in labels.iter_mut() {
        *y = perm[*y];
        totals[*y] += 1;
    }
}

fn generate_session(
    cfg: &GeneratorConfig,
    means: &[Tensor; 3],
    id: u64,
    labels: Vec<usize>,
    mut rng: ChaCha8Rng,
) -> Result<ModalitySession> {
    let streams = emit_observations(&labels, means, |m, t| cfg.sigma(m, t), &mut rng)?;
    let sigma: Vec<f64> = (0..cfg.steps)
        .flat_map(|t| Modality::ALL.map(|m| cfg.sigma(m, t)))
        .collect();
    let session = ModalitySession {
        id,
        streams,
        labels,
        noise_sigma: Tensor::from_vec(&[cfg.steps, 3], sigma)?,
    };
    if cfg.missing_rate > 0.0 {
        let mut mrng = stream(cfg.seed, &format!("session/{id}/missing"));
        inject_missing(&session, cfg.missing_rate, cfg.missing_mode, &mut mrng)
    } else {
        Ok(session)
    }
}

/// Session ids run consecutively through train, val and test, so splits are
/// disjoint by construction. Within a split, label chains are relabeled in id
/// order to keep the class shares close to uniform.
pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<EmotionDataset> {
    use rayon::prelude::*;
    cfg.validate()?;
    let means = emission_means(cfg);
    let p = cfg.transition_matrix();
    let counts = [cfg.train_sessions, cfg.val_sessions, cfg.test_sessions];
    let mut splits: Vec<Vec<ModalitySession>> = Vec::with_capacity(3);
    let mut next_id = 0u64;
    for n in counts {
        let ids: Vec<u64> = (next_id..next_id + n as u64).collect();
        next_id += n as u64;
        let mut chains = ids
            .iter()
            .map(|&id| {
                let mut rng = stream(cfg.seed, &format!("session/{id}"));
                let labels = sample_markov_chain(cfg.steps, &p, &mut rng)?;
                Ok((id, labels, rng))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut totals = vec![0usize; cfg.classes];
        for (_, labels, _) in chains.iter_mut() {
            balance_labels(labels, &mut totals);
        }
        let sessions = chains
            .into_par_iter()
            .map(|(id, labels, rng)| generate_session(cfg, &means, id, labels, rng))
            .collect::<Result<Vec<_>>>()?;
        splits.push(sessions);
    }
    let test = splits.pop().unwrap();
    let val = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok(EmotionDataset {
        config: cfg.clone(),
        means,
        train,
        val,
        test,
        fingerprint: cfg.fingerprint(),
    })
}

/// Accuracy of assigning each present step of one modality to the nearest
/// class mean; a learnability sanity check independent of the model.
pub fn nearest_mean_accuracy(ds: &EmotionDataset, s: Split, m: Modality) -> f64 {
    let mu = &ds.means[m.index()];
    let mut hits = 0usize;
    let mut total = 0usize;
    for sess in ds.split(s) {
        let raw = &sess.streams[m.index()].raw;
        for t in 0..sess.len() {
            if !sess.streams[m.index()].present[t] {
                continue;
            }
            let x = raw.row(t);
            let best = (0..mu.rows())
                .min_by(|&a, &b| {
                    let da: f64 = x.iter().zip(mu.row(a)).map(|(p, q)| (p - q).powi(2)).sum();
                    let db: f64 = x.iter().zip(mu.row(b)).map(|(p, q)| (p - q).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            hits += (best == sess.labels[t]) as usize;
            total += 1;
        }
    }
    hits as f64 / total as f64
}

fn write_session(w: &mut Writer, s: &ModalitySession) {
    w.u64(s.id);
    w.u32(s.labels.len() as u32);
    for &y in &s.labels {
        w.u32(y as u32);
    }
    for st in &s.streams {
        w.tensor(&st.raw);
        w.bools(&st.present);
    }
    w.tensor(&s.noise_sigma);
}

fn read_session(r: &mut Reader, cfg: &GeneratorConfig) -> Result<ModalitySession> {
    let at = r.offset();
    let id = r.u64()?;
    let t_len = r.u32()? as usize;
    let mut labels = Vec::with_capacity(t_len.min(1 << 16));
    for _ in 0..t_len {
        let y = r.u32()? as usize;
        if y >= cfg.classes {
            return Err(Error::format(r.offset() - 4, format!("label {y} out of range")));
        }
        labels.push(y);
    }
    let mut streams = Vec::with_capacity(3);
    for m in Modality::ALL {
        let t_at = r.offset();
        let raw = r.tensor()?;
        let present = r.bools()?;
        if raw.shape() != [t_len, cfg.raw_dims[m.index()]] || present.len() != t_len {
            return Err(Error::format(
                t_at,
                format!("session {id}: {m} stream has shape {:?}", raw.shape()),
            ));
        }
        streams.push(ModalityStream { modality: m, raw, present });
    }
    let s_at = r.offset();
    let noise_sigma = r.tensor()?;
    if noise_sigma.shape() != [t_len, 3] {
        return Err(Error::format(s_at, "noise table has wrong shape"));
    }
    if t_len == 0 {
        return Err(Error::format(at, "empty session"));
    }
    Ok(ModalitySession {
        id,
        streams: streams.try_into().unwrap(),
        labels,
        noise_sigma,
    })
}

pub fn serialize_dataset(ds: &EmotionDataset) -> Vec<u8> {
    let mut w = Writer::new(&Header {
        kind: Kind::Dataset,
        seed: ds.config.seed,
        config_hash: ds.config.hash(),
    });
    w.str(&canonical(&ds.config));
    w.str(&ds.fingerprint);
    for m in &ds.means {
        w.tensor(m);
    }
    for split in Split::ALL {
        let sessions = ds.split(split);
        w.u32(sessions.len() as u32);
        for s in sessions {
            write_session(&mut w, s);
        }
    }
    w.finish()
}

pub fn deserialize_dataset(bytes: &[u8]) -> Result<EmotionDataset> {
    let (header, mut r) = Reader::open(bytes, Kind::Dataset)?;
    let cfg_at = r.offset();
    let config: GeneratorConfig = parse_section(&r.str()?)
        .map_err(|e| Error::format(cfg_at, format!("embedded generator config: {e}")))?;
    if config.seed != header.seed {
        return Err(Error::format(8, "header seed disagrees with embedded config"));
    }
    let fingerprint = r.str()?;
    let mut means = Vec::with_capacity(3);
    for m in Modality::ALL {
        let at = r.offset();
        let t = r.tensor()?;
        if t.shape() != [config.classes, config.raw_dims[m.index()]] {
            return Err(Error::format(at, format!("{m} mean table has shape {:?}", t.shape())));
        }
        means.push(t);
    }
    let mut splits = Vec::with_capacity(3);
    for _ in Split::ALL {
        let n = r.u32()? as usize;
        let mut sessions = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            sessions.push(read_session(&mut r, &config)?);
        }
        splits.push(sessions);
    }
    r.finish()?;
    let test = splits.pop().unwrap();
    let val = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok(EmotionDataset {
        config,
        means: means.try_into().unwrap(),
        train,
        val,
        test,
        fingerprint,
    })
}

pub fn save_dataset(ds: &EmotionDataset, path: &Path) -> Result<()> {
    write_atomic(path, &serialize_dataset(ds))
}

pub fn load_dataset(path: &Path) -> Result<EmotionDataset> {
    deserialize_dataset(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            raw_dims: [4, 5, 3],
            train_sessions: 6,
            val_sessions: 2,
            test_sessions: 3,
            steps: 6,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn identity_transitions_are_absorbing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_markov_chain(50, &Tensor::identity(4), &mut rng).unwrap();
        assert!(s.iter().all(|&c| c == s[0]));
        let bad = Tensor::filled(&[2, 2], 0.6);
        assert!(matches!(sample_markov_chain(3, &bad, &mut rng), Err(Error::Contract(_))));
    }

    #[test]
    fn uniform_transitions_give_uniform_next_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = sample_markov_chain(100_001, &Tensor::filled(&[4, 4], 0.25), &mut rng).unwrap();
        let mut counts = [0usize; 4];
        for &c in &s[1..] {
            counts[c] += 1;
        }
        for c in counts {
            assert!((c as f64 / 100_000.0 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn self_transition_rate_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = GeneratorConfig::default().transition_matrix();
        let s = sample_markov_chain(100_001, &p, &mut rng).unwrap();
        let stays = s.windows(2).filter(|w| w[0] == w[1]).count();
        assert!((stays as f64 / 100_000.0 - 0.85).abs() < 0.01);
    }

    #[test]
    fn noiseless_emission_equals_means_and_noise_is_centered() {
        let cfg = GeneratorConfig { raw_dims: [3, 4, 2], ..GeneratorConfig::default() };
        let means = emission_means(&cfg);
        for m in &means {
            for c in 0..4 {
                let n: f64 = m.row(c).iter().map(|v| v * v).sum();
                assert!((n - 1.0).abs() < 1e-12);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let states = vec![0, 1, 2, 3, 3];
        let s = emit_observations(&states, &means, |_, _| 0.0, &mut rng).unwrap();
        for m in Modality::ALL {
            for (t, &c) in states.iter().enumerate() {
                assert_eq!(s[m.index()].raw.row(t), means[m.index()].row(c));
            }
        }
        let states = vec![2; 10_000];
        let s = emit_observations(&states, &means, |_, _| 0.1, &mut rng).unwrap();
        let mu = means[0].row(2);
        for j in 0..3 {
            let mean: f64 = (0..10_000).map(|t| s[0].raw.at(t, j) - mu[j]).sum::<f64>() / 10_000.0;
            assert!(mean.abs() < 0.01);
        }
    }

    #[test]
    fn injection_modes() {
        let ds = generate_dataset(&GeneratorConfig { steps: 30, ..small() }).unwrap();
        let s = &ds.train[0];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(&inject_missing(s, 0.0, MissingMode::AtMostOne, &mut rng).unwrap(), s);
        let all = inject_missing(s, 1.0, MissingMode::AtMostOne, &mut rng).unwrap();
        assert_eq!(all.steps_missing(1), s.len());

        let mut zeroed = 0usize;
        let mut cells = 0usize;
        while cells < 100_000 {
            let x = inject_missing(s, 0.4, MissingMode::Independent, &mut rng).unwrap();
            for st in &x.streams {
                zeroed += st.present.iter().filter(|p| !**p).count();
                cells += st.len();
            }
        }
        assert!((zeroed as f64 / cells as f64 - 0.4).abs() < 0.01);

        for _ in 0..200 {
            let x = inject_missing(s, 0.7, MissingMode::AtMostOne, &mut rng).unwrap();
            assert_eq!(x.steps_missing(2) + x.steps_missing(3), 0);
            for st in &x.streams {
                for t in 0..st.len() {
                    if !st.present[t] {
                        assert!(st.raw.row(t).iter().all(|v| *v == 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_disjoint() {
        let a = generate_dataset(&small()).unwrap();
        let b = generate_dataset(&small()).unwrap();
        assert_eq!(a.fingerprint, b.fingerprint);
        assert_eq!(a, b);
        let mut ids: Vec<u64> = Split::ALL.iter().flat_map(|s| a.split(*s).iter().map(|x| x.id)).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 11);
        let other = generate_dataset(&GeneratorConfig { seed: 7, ..small() }).unwrap();
        assert_ne!(other.fingerprint, a.fingerprint);
        assert_ne!(other.train[0], a.train[0]);
    }

    #[test]
    fn default_splits_are_class_balanced() {
        let ds = generate_dataset(&GeneratorConfig::default()).unwrap();
        assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (600, 100, 200));
        for s in Split::ALL {
            for (c, share) in ds.class_shares(s).into_iter().enumerate() {
                assert!((0.225..=0.275).contains(&share), "{s:?} class {c}: {share}");
            }
        }
    }

    #[test]
    fn relabeling_keeps_the_switch_pattern() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = GeneratorConfig::default().transition_matrix();
        let mut totals = vec![0usize; 4];
        for _ in 0..50 {
            let raw = sample_markov_chain(20, &p, &mut rng).unwrap();
            let mut relabeled = raw.clone();
            balance_labels(&mut relabeled, &mut totals);
            for t in 1..raw.len() {
                assert_eq!(raw[t] == raw[t - 1], relabeled[t] == relabeled[t - 1]);
            }
        }
        let n: usize = totals.iter().sum();
        assert!(totals.iter().all(|&c| (c as f64 / n as f64 - 0.25).abs() < 0.02), "{totals:?}");
    }

    #[test]
    fn noiseless_data_is_separable_by_nearest_mean() {
        let ds = generate_dataset(&GeneratorConfig { noise_sigma: [0.0; 3], ..small() }).unwrap();
        for m in Modality::ALL {
            assert_eq!(nearest_mean_accuracy(&ds, Split::Train, m), 1.0);
        }
    }

    #[test]
    fn burst_raises_audio_sigma_on_steps_three_to_five() {
        let cfg = GeneratorConfig { noise_schedule: NoiseSchedule::AudioBurst, ..small() };
        let ds = generate_dataset(&cfg).unwrap();
        let sig = &ds.train[0].noise_sigma;
        for t in 0..6 {
            let want = if (2..5).contains(&t) { 0.6 * 4.0 } else { 0.6 };
            assert!((sig.at(t, 0) - want).abs() < 1e-12);
            assert_eq!(sig.at(t, 1), 0.5);
        }
    }

    #[test]
    fn invalid_config_names_field() {
        let cfg = GeneratorConfig { self_transition: 1.5, ..small() };
        assert!(matches!(generate_dataset(&cfg), Err(Error::Config { field, .. }) if field == "generator.self_transition"));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ds = generate_dataset(&GeneratorConfig { missing_rate: 0.3, ..small() }).unwrap();
        let bytes = serialize_dataset(&ds);
        let back = deserialize_dataset(&bytes).unwrap();
        assert_eq!(back, ds);
        assert!(back.integrity_warnings().is_empty());
        assert_eq!(serialize_dataset(&back), bytes);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = serialize_dataset(&generate_dataset(&small()).unwrap());
        for cut in [1, 33, bytes.len() / 2, bytes.len() - 40] {
            let r = deserialize_dataset(&bytes[..bytes.len() - cut]);
            assert!(matches!(r, Err(Error::Format { .. })), "cut {cut}");
        }
    }
}
