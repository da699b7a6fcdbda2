//! Flat `section.key = value` run configuration.
//!
//! Every field has a default. Unknown sections or keys are rejected. The
//! canonical form lists every key of every section in a fixed order, and its
//! sha256 is the config hash stamped on all outputs.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::{GeneratorConfig, MissingMode, NoiseSchedule};
use crate::error::{Error, Result};
use crate::fusion::MieNorm;
use crate::harness::HarnessConfig;
use crate::model::{ModelConfig, Variant};
use crate::train::TrainConfig;

pub trait Section: Default {
    const NAME: &'static str;

    fn entries(&self) -> Vec<(&'static str, String)>;

    fn set(&mut self, key: &str, value: &str) -> Result<()>;
}

pub(crate) fn parse_field<T: FromStr>(section: &str, key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::config(format!("{section}.{key}"), format!("`{value}`: {e}")))
}

pub(crate) fn parse_list<T: FromStr>(section: &str, key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|v| parse_field(section, key, v.trim()))
        .collect()
}

pub(crate) fn join_list<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn unknown(section: &str, key: &str) -> Error {
    Error::config(format!("{section}.{key}"), "unknown key")
}

pub fn canonical<S: Section>(s: &S) -> String {
    s.entries()
        .into_iter()
        .map(|(k, v)| format!("{}.{k} = {v}\n", S::NAME))
        .collect()
}

/// First 16 hex digits of the sha256 of `text`.
pub fn short_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Splits a config document into `(section, key, value)` triples.
fn lines(text: &str) -> Result<Vec<(String, String, String)>> {
    let mut out: Vec<(String, String, String)> = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (lhs, rhs) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("line {}", no + 1), "expected `section.key = value`")
        })?;
        let (section, key) = lhs.trim().split_once('.').ok_or_else(|| {
            Error::config(lhs.trim(), "key must be written as `section.key`")
        })?;
        let entry = (section.to_string(), key.to_string(), rhs.trim().to_string());
        if out.iter().any(|(s, k, _)| *s == entry.0 && *k == entry.1) {
            return Err(Error::config(format!("{section}.{key}"), "given twice"));
        }
        out.push(entry);
    }
    Ok(out)
}

/// Parses a document holding only section `S`.
pub fn parse_section<S: Section>(text: &str) -> Result<S> {
    let mut s = S::default();
    for (section, key, value) in lines(text)? {
        if section != S::NAME {
            return Err(unknown(&section, &key));
        }
        s.set(&key, &value)?;
    }
    Ok(s)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub harness: HarnessConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (section, key, value) in lines(text)? {
            cfg.set(&section, &key, &value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse(&text)
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        match section {
            GeneratorConfig::NAME => self.generator.set(key, value),
            ModelConfig::NAME => self.model.set(key, value),
            TrainConfig::NAME => self.train.set(key, value),
            HarnessConfig::NAME => self.harness.set(key, value),
            _ => Err(unknown(section, key)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.harness.validate()?;
        if self.generator.raw_dims != self.model.raw_dims {
            return Err(Error::config(
                "model.raw_dims",
                format!(
                    "{:?} does not match generated widths {:?}",
                    self.model.raw_dims, self.generator.raw_dims
                ),
            ));
        }
        if self.generator.steps > self.model.t_max {
            return Err(Error::config(
                "model.t_max",
                format!("shorter than generated sessions ({})", self.generator.steps),
            ));
        }
        Ok(())
    }

    pub fn canonical(&self) -> String {
        let mut s = canonical(&self.generator);
        s.push_str(&canonical(&self.model));
        s.push_str(&canonical(&self.train));
        s.push_str(&canonical(&self.harness));
        s
    }

    pub fn hash(&self) -> String {
        short_hash(&self.canonical())
    }
}

impl Section for ModelConfig {
    const NAME: &'static str = "model";

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("raw_dims", join_list(&self.raw_dims)),
            ("d", self.d.to_string()),
            ("layers", self.layers.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn_hidden", self.ffn_hidden.to_string()),
            ("t_max", self.t_max.to_string()),
            ("d_k", self.d_k.to_string()),
            ("mie_hidden", self.mie_hidden.to_string()),
            ("mie_shared", self.mie_shared.to_string()),
            ("mie_norm", self.mie_norm.as_str().to_string()),
            ("cls_hidden", self.cls_hidden.to_string()),
            ("classes", self.classes.to_string()),
            ("head_gain", self.head_gain.to_string()),
            ("variant", self.variant.as_str().to_string()),
        ]
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let n = Self::NAME;
        match key {
            "raw_dims" => {
                let dims: Vec<usize> = parse_list(n, key, v)?;
                self.raw_dims = dims
                    .try_into()
                    .map_err(|_| Error::config("model.raw_dims", "need three widths"))?;
            }
            "d" => self.d = parse_field(n, key, v)?,
            "layers" => self.layers = parse_field(n, key, v)?,
            "heads" => self.heads = parse_field(n, key, v)?,
            "ffn_hidden" => self.ffn_hidden = parse_field(n, key, v)?,
            "t_max" => self.t_max = parse_field(n, key, v)?,
            "d_k" => self.d_k = parse_field(n, key, v)?,
            "mie_hidden" => self.mie_hidden = parse_field(n, key, v)?,
            "mie_shared" => self.mie_shared = parse_field(n, key, v)?,
            "mie_norm" => self.mie_norm = parse_field::<MieNorm>(n, key, v)?,
            "cls_hidden" => self.cls_hidden = parse_field(n, key, v)?,
            "classes" => self.classes = parse_field(n, key, v)?,
            "head_gain" => self.head_gain = parse_field(n, key, v)?,
            "variant" => self.variant = parse_field::<Variant>(n, key, v)?,
            _ => return Err(unknown(n, key)),
        }
        Ok(())
    }
}

impl Section for GeneratorConfig {
    const NAME: &'static str = "generator";

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("classes", self.classes.to_string()),
            ("steps", self.steps.to_string()),
            ("self_transition", self.self_transition.to_string()),
            ("raw_dims", join_list(&self.raw_dims)),
            ("noise_sigma", join_list(&self.noise_sigma)),
            ("noise_schedule", self.noise_schedule.as_str().to_string()),
            ("burst_factor", self.burst_factor.to_string()),
            ("missing_rate", self.missing_rate.to_string()),
            ("missing_mode", self.missing_mode.as_str().to_string()),
            ("train_sessions", self.train_sessions.to_string()),
            ("val_sessions", self.val_sessions.to_string()),
            ("test_sessions", self.test_sessions.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let n = Self::NAME;
        match key {
            "classes" => self.classes = parse_field(n, key, v)?,
            "steps" => self.steps = parse_field(n, key, v)?,
            "self_transition" => self.self_transition = parse_field(n, key, v)?,
            "raw_dims" => {
                let dims: Vec<usize> = parse_list(n, key, v)?;
                self.raw_dims = dims
                    .try_into()
                    .map_err(|_| Error::config("generator.raw_dims", "need three widths"))?;
            }
            "noise_sigma" => {
                let s: Vec<f64> = parse_list(n, key, v)?;
                self.noise_sigma = s
                    .try_into()
                    .map_err(|_| Error::config("generator.noise_sigma", "need three values"))?;
            }
            "noise_schedule" => self.noise_schedule = parse_field::<NoiseSchedule>(n, key, v)?,
            "burst_factor" => self.burst_factor = parse_field(n, key, v)?,
            "missing_rate" => self.missing_rate = parse_field(n, key, v)?,
            "missing_mode" => self.missing_mode = parse_field::<MissingMode>(n, key, v)?,
            "train_sessions" => self.train_sessions = parse_field(n, key, v)?,
            "val_sessions" => self.val_sessions = parse_field(n, key, v)?,
            "test_sessions" => self.test_sessions = parse_field(n, key, v)?,
            "seed" => self.seed = parse_field(n, key, v)?,
            _ => return Err(unknown(n, key)),
        }
        Ok(())
    }
}

impl Section for TrainConfig {
    const NAME: &'static str = "train";

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("decay_epochs", join_list(&self.decay_epochs)),
            ("decay_factor", self.decay_factor.to_string()),
            ("dropout", self.dropout.to_string()),
            ("lambda", self.lambda.to_string()),
            ("stop_grad_prev", self.stop_grad_prev.to_string()),
            ("patience", self.patience.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let n = Self::NAME;
        match key {
            "epochs" => self.epochs = parse_field(n, key, v)?,
            "batch_size" => self.batch_size = parse_field(n, key, v)?,
            "lr" => self.lr = parse_field(n, key, v)?,
            "weight_decay" => self.weight_decay = parse_field(n, key, v)?,
            "warmup_epochs" => self.warmup_epochs = parse_field(n, key, v)?,
            "decay_epochs" => self.decay_epochs = parse_list(n, key, v)?,
            "decay_factor" => self.decay_factor = parse_field(n, key, v)?,
            "dropout" => self.dropout = parse_field(n, key, v)?,
            "lambda" => self.lambda = parse_field(n, key, v)?,
            "stop_grad_prev" => self.stop_grad_prev = parse_field(n, key, v)?,
            "patience" => self.patience = parse_field(n, key, v)?,
            "seed" => self.seed = parse_field(n, key, v)?,
            _ => return Err(unknown(n, key)),
        }
        Ok(())
    }
}

impl Section for HarnessConfig {
    const NAME: &'static str = "harness";

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("rates", join_list(&self.rates)),
            ("mode", self.mode.as_str().to_string()),
            ("seeds", join_list(&self.seeds)),
            ("lipschitz_samples", self.lipschitz_samples.to_string()),
            ("lipschitz_eps", self.lipschitz_eps.to_string()),
            ("fixed_point_bound", self.fixed_point_bound.to_string()),
            ("fixed_point_trials", self.fixed_point_trials.to_string()),
        ]
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let n = Self::NAME;
        match key {
            "rates" => self.rates = parse_list(n, key, v)?,
            "mode" => self.mode = parse_field::<MissingMode>(n, key, v)?,
            "seeds" => self.seeds = parse_list(n, key, v)?,
            "lipschitz_samples" => self.lipschitz_samples = parse_field(n, key, v)?,
            "lipschitz_eps" => self.lipschitz_eps = parse_field(n, key, v)?,
            "fixed_point_bound" => self.fixed_point_bound = parse_field(n, key, v)?,
            "fixed_point_trials" => self.fixed_point_trials = parse_field(n, key, v)?,
            _ => return Err(unknown(n, key)),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_canonical_form() {
        let cfg = RunConfig::default();
        let again = RunConfig::parse(&cfg.canonical()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.hash(), again.hash());
        assert_eq!(cfg.hash().len(), 16);
    }

    #[test]
    fn overrides_and_comments() {
        let text = "# desk run\n\ntrain.lr = 0.002   # faster\nmodel.variant = no_mie\nharness.seeds = 4, 5\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.train.lr, 0.002);
        assert_eq!(cfg.model.variant, Variant::NoMie);
        assert_eq!(cfg.harness.seeds, vec![4, 5]);
        assert_ne!(cfg.hash(), RunConfig::default().hash());
        // spacing and order do not matter
        let same = RunConfig::parse("harness.seeds=4,5\nmodel.variant=no_mie\ntrain.lr=2e-3").unwrap();
        assert_eq!(cfg.hash(), same.hash());
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        for (text, field) in [
            ("train.momentum = 0.9", "train.momentum"),
            ("optim.lr = 1", "optim.lr"),
            ("train.lr = 1\ntrain.lr = 2", "train.lr"),
            ("train.lr = fast", "train.lr"),
            ("lr = 1", "lr"),
            ("model.raw_dims = 1,2", "model.raw_dims"),
        ] {
            match RunConfig::parse(text) {
                Err(Error::Config { field: f, .. }) => assert_eq!(f, field, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn cross_section_checks() {
        let e = RunConfig::parse("generator.raw_dims = 8,8,8").unwrap_err();
        assert!(matches!(e, Error::Config { ref field, .. } if field == "model.raw_dims"));
        let e = RunConfig::parse("generator.steps = 40").unwrap_err();
        assert!(matches!(e, Error::Config { ref field, .. } if field == "model.t_max"));
    }

    #[test]
    fn short_hash_is_sha256_prefix() {
        // sha256("abc") = ba7816bf8f01cfea...
        assert_eq!(short_hash("abc"), "ba7816bf8f01cfea");
    }
}
