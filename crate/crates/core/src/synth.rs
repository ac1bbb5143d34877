//! Synthetic distantly supervised corpora with controllable label noise.
//!
//! Each entity pair gets one knowledge-base relation (or `NA`) and a bag of
//! sentences. A sentence expresses its pair's relation through a trigger
//! word placed relative to the two entity mentions; with probability
//! `noise_rate` it instead expresses a different relation, which makes the
//! bag label wrong for that sentence. `NA` sentences carry no trigger.
//! Filler words follow a Zipf law, so most of the vocabulary is rare.

use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{group_by_pair, group_by_triple, Bag, Instance, PairBag, RelationVocab, Span, NA};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Where the trigger goes relative to the entity mentions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Template {
    /// `.. head .. trigger .. tail ..`
    Between,
    /// `.. trigger .. head .. tail ..`
    Before,
    /// `.. head .. tail .. trigger ..`
    After,
}

impl FromStr for Template {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "between" => Ok(Template::Between),
            "before" => Ok(Template::Before),
            "after" => Ok(Template::After),
            other => Err(Error::Config(format!("unknown template `{other}`"))),
        }
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Template::Between => "between",
            Template::Before => "before",
            Template::After => "after",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Including `NA`.
    pub n_relations: usize,
    pub n_train_pairs: usize,
    pub n_test_pairs: usize,
    /// Fraction of entity pairs whose knowledge-base relation is `NA`.
    pub na_fraction: f64,
    /// Number of distinct filler words.
    pub vocab_size: usize,
    pub zipf_exponent: f64,
    pub triggers_per_relation: usize,
    /// `bag_size_weights[i]` is the relative frequency of bags of size `i + 1`.
    pub bag_size_weights: Vec<f64>,
    pub noise_rate: f64,
    pub test_noise_rate: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub templates: Vec<Template>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_relations: 5,
            n_train_pairs: 2000,
            n_test_pairs: 500,
            na_fraction: 0.4,
            vocab_size: 2000,
            zipf_exponent: 1.0,
            triggers_per_relation: 4,
            bag_size_weights: vec![0.3, 0.2, 0.15, 0.15, 0.1, 0.1],
            noise_rate: 0.3,
            test_noise_rate: 0.3,
            min_len: 8,
            max_len: 20,
            templates: vec![Template::Between, Template::Before, Template::After],
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_relations < 2 {
            return bad("synthetic corpus needs NA plus at least one relation");
        }
        if self.n_train_pairs == 0 || self.n_test_pairs == 0 {
            return bad("synthetic corpus needs entity pairs in both splits");
        }
        if !(0.0..=1.0).contains(&self.noise_rate) || !(0.0..=1.0).contains(&self.test_noise_rate) {
            return bad("noise rate must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.na_fraction) {
            return bad("na_fraction must lie in [0, 1]");
        }
        if self.vocab_size == 0 || self.triggers_per_relation == 0 {
            return bad("vocabulary and trigger sets must be nonempty");
        }
        if self.bag_size_weights.is_empty()
            || self.bag_size_weights.iter().any(|w| !(*w >= 0.0))
            || self.bag_size_weights.iter().sum::<f64>() <= 0.0
        {
            return bad("bag size weights must be nonnegative with positive total");
        }
        if self.min_len < 3 || self.max_len < self.min_len {
            return bad("sentence lengths need 3 <= min_len <= max_len");
        }
        if self.templates.is_empty() {
            return bad("at least one template is required");
        }
        Ok(())
    }

    pub fn relation_vocab(&self) -> RelationVocab {
        let names = std::iter::once("NA".to_string())
            .chain((1..self.n_relations).map(|r| format!("rel_{r}")))
            .collect();
        RelationVocab::new(names).expect("generated names are unique")
    }
}

/// A generated corpus. `*_truth[i]` is the relation instance `i` actually
/// expresses; it is kept for diagnostics and never used in training.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub relations: RelationVocab,
    pub train: Vec<Instance>,
    pub test: Vec<Instance>,
    pub train_truth: Vec<usize>,
    pub test_truth: Vec<usize>,
}

impl SynthCorpus {
    pub fn train_bags(&self) -> Vec<Bag> {
        group_by_triple(self.train.clone())
    }

    pub fn test_bags(&self) -> Vec<PairBag> {
        group_by_pair(self.test.clone())
    }

    /// Fraction of training instances whose expressed relation differs from
    /// the bag label.
    pub fn train_noise_fraction(&self) -> f64 {
        noise_fraction(&self.train, &self.train_truth)
    }
}

pub fn noise_fraction(instances: &[Instance], truth: &[usize]) -> f64 {
    if instances.is_empty() {
        return 0.0;
    }
    let noisy = instances.iter().zip(truth).filter(|(i, t)| i.relation != **t).count();
    noisy as f64 / instances.len() as f64
}

struct Renderer<'a> {
    cfg: &'a SynthConfig,
    filler: WeightedIndex<f64>,
    trigger: WeightedIndex<f64>,
}

impl<'a> Renderer<'a> {
    fn new(cfg: &'a SynthConfig) -> Self {
        let zipf = |n: usize| {
            WeightedIndex::new((1..=n).map(|k| (k as f64).powf(-cfg.zipf_exponent))).expect("positive weights")
        };
        Renderer { cfg, filler: zipf(cfg.vocab_size), trigger: zipf(cfg.triggers_per_relation) }
    }

    fn filler(&self, rng: &mut ChaCha8Rng) -> String {
        format!("w{}", self.filler.sample(rng))
    }

    /// Renders one sentence expressing `relation` between `head` and `tail`.
    fn sentence(&self, relation: usize, head: &str, tail: &str, rng: &mut ChaCha8Rng) -> (Vec<String>, Span, Span) {
        let len = rng.gen_range(self.cfg.min_len..=self.cfg.max_len);
        let mut tokens: Vec<String> = (0..len).map(|_| self.filler(rng)).collect();
        // Slots: head < tail always; the trigger goes before, between or after.
        let template = *self.cfg.templates.choose(rng).expect("nonempty templates");
        let (h, t, trig) = match template {
            Template::Between => {
                let h = rng.gen_range(0..len - 2);
                let trig = rng.gen_range(h + 1..len - 1);
                let t = rng.gen_range(trig + 1..len);
                (h, t, trig)
            }
            Template::Before => {
                let trig = rng.gen_range(0..len - 2);
                let h = rng.gen_range(trig + 1..len - 1);
                let t = rng.gen_range(h + 1..len);
                (h, t, trig)
            }
            Template::After => {
                let h = rng.gen_range(0..len - 2);
                let t = rng.gen_range(h + 1..len - 1);
                let trig = rng.gen_range(t + 1..len);
                (h, t, trig)
            }
        };
        tokens[h] = head.to_string();
        tokens[t] = tail.to_string();
        if relation != NA {
            tokens[trig] = format!("r{relation}t{}", self.trigger.sample(rng));
        }
        (tokens, Span::new(h, h + 1), Span::new(t, t + 1))
    }
}

fn other_relation(label: usize, n: usize, rng: &mut ChaCha8Rng) -> usize {
    let r = rng.gen_range(0..n - 1);
    if r >= label {
        r + 1
    } else {
        r
    }
}

fn generate_split(
    cfg: &SynthConfig,
    pairs: &[(usize, usize, usize)],
    noise_rate: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<Instance>, Vec<usize>) {
    let renderer = Renderer::new(cfg);
    let sizes = WeightedIndex::new(&cfg.bag_size_weights).expect("validated weights");
    let mut instances = Vec::new();
    let mut truth = Vec::new();
    for &(h, t, label) in pairs {
        let (head, tail) = (format!("ent{h}"), format!("ent{t}"));
        let size = sizes.sample(rng) + 1;
        for _ in 0..size {
            let expressed =
                if rng.gen_bool(noise_rate) { other_relation(label, cfg.n_relations, rng) } else { label };
            let (tokens, hs, ts) = renderer.sentence(expressed, &head, &tail, rng);
            instances.push(Instance {
                tokens,
                head: hs,
                tail: ts,
                head_id: head.clone(),
                tail_id: tail.clone(),
                head_name: head.clone(),
                tail_name: tail.clone(),
                relation: label,
            });
            truth.push(expressed);
        }
    }
    (instances, truth)
}

/// Generates train and test splits. Deterministic for a fixed config.
pub fn generate_synth(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, Stream::Corpus);
    let total_pairs = cfg.n_train_pairs + cfg.n_test_pairs;
    // Entities are shared between pairs; pairs themselves are unique.
    let n_entities = (2 * total_pairs).max(4);
    let mut seen = std::collections::HashSet::new();
    let mut pairs = Vec::with_capacity(total_pairs);
    while pairs.len() < total_pairs {
        let h = rng.gen_range(0..n_entities);
        let t = rng.gen_range(0..n_entities);
        if h == t || !seen.insert((h, t)) {
            continue;
        }
        let label = if rng.gen_bool(cfg.na_fraction) { NA } else { rng.gen_range(1..cfg.n_relations) };
        pairs.push((h, t, label));
    }
    let (train_pairs, test_pairs) = pairs.split_at(cfg.n_train_pairs);
    let (train, train_truth) = generate_split(cfg, train_pairs, cfg.noise_rate, &mut rng);
    let mut test_rng = stream_rng(cfg.seed, Stream::TestCorpus);
    let (test, test_truth) = generate_split(cfg, test_pairs, cfg.test_noise_rate, &mut test_rng);
    Ok(SynthCorpus { relations: cfg.relation_vocab(), train, test, train_truth, test_truth })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, noise: f64) -> SynthConfig {
        SynthConfig { n_train_pairs: 200, n_test_pairs: 50, noise_rate: noise, test_noise_rate: noise, seed, ..Default::default() }
    }

    #[test]
    fn zero_noise_means_truth_matches_labels() {
        let c = generate_synth(&small(3, 0.0)).unwrap();
        assert!(c.train.iter().zip(&c.train_truth).all(|(i, t)| i.relation == *t));
        assert_eq!(c.train_noise_fraction(), 0.0);
    }

    #[test]
    fn same_seed_same_corpus() {
        assert_eq!(generate_synth(&small(9, 0.3)).unwrap(), generate_synth(&small(9, 0.3)).unwrap());
        assert_ne!(generate_synth(&small(9, 0.3)).unwrap().train, generate_synth(&small(10, 0.3)).unwrap().train);
    }

    #[test]
    fn noise_fraction_converges() {
        let cfg = SynthConfig { n_train_pairs: 8000, noise_rate: 0.3, seed: 21, ..Default::default() };
        let c = generate_synth(&cfg).unwrap();
        assert!(c.train.len() >= 20_000, "{}", c.train.len());
        let f = c.train_noise_fraction();
        assert!((0.28..=0.32).contains(&f), "{f}");
    }

    #[test]
    fn degenerate_configs_rejected() {
        assert!(generate_synth(&SynthConfig { n_relations: 0, ..Default::default() }).is_err());
        assert!(generate_synth(&SynthConfig { n_train_pairs: 0, ..Default::default() }).is_err());
        assert!(generate_synth(&SynthConfig { noise_rate: 1.5, ..Default::default() }).is_err());
    }

    #[test]
    fn spans_are_valid_and_bags_keep_order() {
        let c = generate_synth(&small(4, 0.3)).unwrap();
        for inst in c.train.iter().chain(&c.test) {
            assert!(inst.head.end <= inst.tail.start && inst.tail.end <= inst.tokens.len());
        }
        let regrouped: Vec<Instance> = c.train_bags().into_iter().flat_map(|b| b.instances).collect();
        assert_eq!(regrouped, c.train);
    }

    #[test]
    fn train_and_test_pairs_are_disjoint() {
        let c = generate_synth(&small(5, 0.3)).unwrap();
        let train: std::collections::HashSet<_> = c.train.iter().map(|i| (&i.head_id, &i.tail_id)).collect();
        assert!(c.test.iter().all(|i| !train.contains(&(&i.head_id, &i.tail_id))));
    }
}
