//! Flat `key = value` run configuration.
//!
//! ```text
//! # comments and blank lines are ignored
//! seed = 7
//! synth.noise_rate = 0.3
//! model.kernels = 32
//! train.variant = ivat+bat
//! ```
//!
//! One root `seed` drives corpus generation, initialization, shuffling and
//! perturbation probes through separate streams. `bat.epsilon` defaults to
//! `0.05 · sqrt(3 · model.kernels)`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::bat::BatConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::featurizer::FeaturizerConfig;
use crate::ivat::IvatConfig;
use crate::model::ModelConfig;
use crate::synth::{SynthConfig, Template};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub featurizer: FeaturizerConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let encoder = EncoderConfig { kernel_width: 3, kernels: 32 };
        RunConfig {
            seed: 1,
            synth: SynthConfig::default(),
            featurizer: FeaturizerConfig { word_dim: 16, pos_dim: 4, max_len: 40, max_distance: 30 },
            encoder,
            train: TrainConfig { bat: BatConfig::for_repr_dim(encoder.output_dim()), ..TrainConfig::default() },
        }
    }
}

/// Parses `key = value` lines into a map; later keys win.
pub fn parse_pairs(text: &str, origin: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: origin.into(),
            line: i + 1,
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| num(key, s.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply(&parse_pairs(&text, path)?)?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply(&parse_pairs(text, Path::new("<inline>"))?)?;
        Ok(cfg)
    }

    /// Applies overrides on top of the current values.
    pub fn apply(&mut self, pairs: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        if !pairs.contains_key("bat.epsilon") && pairs.contains_key("model.kernels") {
            self.train.bat.epsilon = BatConfig::for_repr_dim(self.encoder.output_dim()).epsilon;
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let s = &mut self.synth;
        let f = &mut self.featurizer;
        let t = &mut self.train;
        match key {
            "seed" => {
                self.seed = num(key, v)?;
                s.seed = self.seed;
                t.seed = self.seed;
            }
            "synth.n_relations" => s.n_relations = num(key, v)?,
            "synth.train_pairs" => s.n_train_pairs = num(key, v)?,
            "synth.test_pairs" => s.n_test_pairs = num(key, v)?,
            "synth.na_fraction" => s.na_fraction = num(key, v)?,
            "synth.vocab_size" => s.vocab_size = num(key, v)?,
            "synth.zipf_exponent" => s.zipf_exponent = num(key, v)?,
            "synth.triggers_per_relation" => s.triggers_per_relation = num(key, v)?,
            "synth.bag_size_weights" => s.bag_size_weights = list(key, v)?,
            "synth.noise_rate" => s.noise_rate = num(key, v)?,
            "synth.test_noise_rate" => s.test_noise_rate = num(key, v)?,
            "synth.min_len" => s.min_len = num(key, v)?,
            "synth.max_len" => s.max_len = num(key, v)?,
            "synth.templates" => s.templates = v.split(',').map(str::parse::<Template>).collect::<Result<_>>()?,
            "model.word_dim" => f.word_dim = num(key, v)?,
            "model.pos_dim" => f.pos_dim = num(key, v)?,
            "model.max_len" => f.max_len = num(key, v)?,
            "model.max_distance" => f.max_distance = num(key, v)?,
            "model.kernel_width" => self.encoder.kernel_width = num(key, v)?,
            "model.kernels" => self.encoder.kernels = num(key, v)?,
            "train.epochs" => t.epochs = num(key, v)?,
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.lr" => t.lr = num(key, v)?,
            "train.decay_at" => t.decay_at = list(key, v)?,
            "train.lr_decay" => t.lr_decay = num(key, v)?,
            "train.variant" => t.variant = v.parse()?,
            "ivat.threshold" => t.ivat.threshold = num(key, v)?,
            "ivat.epsilon" => t.ivat.epsilon = num(key, v)?,
            "ivat.xi" => t.ivat.xi = num(key, v)?,
            "ivat.power_iterations" => t.ivat.power_iterations = num(key, v)?,
            "ivat.weight" => t.ivat.weight = num(key, v)?,
            "bat.epsilon" => t.bat.epsilon = num(key, v)?,
            "bat.weight" => t.bat.weight = num(key, v)?,
            "bat.xi" => t.bat.xi = num(key, v)?,
            "bat.power_iterations" => t.bat.power_iterations = num(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.featurizer.validate()?;
        self.encoder.validate()?;
        self.train.validate()
    }

    pub fn model(&self, n_relations: usize) -> ModelConfig {
        ModelConfig { featurizer: self.featurizer, encoder: self.encoder, n_relations }
    }

    /// Every effective setting, one `key = value` per line, sorted by key.
    /// Floats use the shortest round-trip form, so equal configs render
    /// identically.
    pub fn canonical(&self) -> String {
        let s = &self.synth;
        let f = &self.featurizer;
        let t = &self.train;
        let IvatConfig { threshold, epsilon: ieps, xi: ixi, power_iterations: ik, weight: iw } = t.ivat;
        let BatConfig { epsilon: beps, weight: bw, xi: bxi, power_iterations: bk } = t.bat;
        let mut m: BTreeMap<&str, String> = BTreeMap::new();
        m.insert("seed", self.seed.to_string());
        m.insert("synth.n_relations", s.n_relations.to_string());
        m.insert("synth.train_pairs", s.n_train_pairs.to_string());
        m.insert("synth.test_pairs", s.n_test_pairs.to_string());
        m.insert("synth.na_fraction", s.na_fraction.to_string());
        m.insert("synth.vocab_size", s.vocab_size.to_string());
        m.insert("synth.zipf_exponent", s.zipf_exponent.to_string());
        m.insert("synth.triggers_per_relation", s.triggers_per_relation.to_string());
        m.insert("synth.bag_size_weights", join(&s.bag_size_weights));
        m.insert("synth.noise_rate", s.noise_rate.to_string());
        m.insert("synth.test_noise_rate", s.test_noise_rate.to_string());
        m.insert("synth.min_len", s.min_len.to_string());
        m.insert("synth.max_len", s.max_len.to_string());
        m.insert("synth.templates", join(&s.templates));
        m.insert("model.word_dim", f.word_dim.to_string());
        m.insert("model.pos_dim", f.pos_dim.to_string());
        m.insert("model.max_len", f.max_len.to_string());
        m.insert("model.max_distance", f.max_distance.to_string());
        m.insert("model.kernel_width", self.encoder.kernel_width.to_string());
        m.insert("model.kernels", self.encoder.kernels.to_string());
        m.insert("train.epochs", t.epochs.to_string());
        m.insert("train.batch_size", t.batch_size.to_string());
        m.insert("train.lr", t.lr.to_string());
        m.insert("train.decay_at", join(&t.decay_at));
        m.insert("train.lr_decay", t.lr_decay.to_string());
        m.insert("train.variant", t.variant.to_string());
        m.insert("ivat.threshold", threshold.to_string());
        m.insert("ivat.epsilon", ieps.to_string());
        m.insert("ivat.xi", ixi.to_string());
        m.insert("ivat.power_iterations", ik.to_string());
        m.insert("ivat.weight", iw.to_string());
        m.insert("bat.epsilon", beps.to_string());
        m.insert("bat.weight", bw.to_string());
        m.insert("bat.xi", bxi.to_string());
        m.insert("bat.power_iterations", bk.to_string());
        m.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Variant;

    #[test]
    fn canonical_round_trips() {
        let cfg = RunConfig::parse("seed = 9\ntrain.variant = ivat+bat # note\nmodel.kernels = 8\n").unwrap();
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.train.variant, Variant::IVAT_BAT);
        assert!((cfg.train.bat.epsilon - 0.05 * 24f64.sqrt()).abs() < 1e-15);
        let again = RunConfig::parse(&cfg.canonical()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.canonical(), cfg.canonical());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse("nonsense").is_err());
        assert!(RunConfig::parse("train.bogus = 1").is_err());
        assert!(RunConfig::parse("train.epochs = many").is_err());
        assert!(RunConfig::parse("ivat.threshold = 1.5").is_err());
    }
}
