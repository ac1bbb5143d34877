#![allow(dead_code)]

pub mod oracles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relext_core::corpus::{Instance, Span};
use relext_core::encoder::EncoderConfig;
use relext_core::featurizer::{featurize, FeaturizedInstance, FeaturizerConfig, Vocab};
use relext_core::model::{ModelConfig, ModelParams};

/// l=8, d_w=4, d_p=2, p=6, n_r=3.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        featurizer: FeaturizerConfig { word_dim: 4, pos_dim: 2, max_len: 8, max_distance: 4 },
        encoder: EncoderConfig { kernel_width: 3, kernels: 6 },
        n_relations: 3,
    }
}

pub fn instance(words: &[&str], head: usize, tail: usize, relation: usize) -> Instance {
    Instance {
        tokens: words.iter().map(|w| w.to_string()).collect(),
        head: Span::new(head, head + 1),
        tail: Span::new(tail, tail + 1),
        head_id: words[head].into(),
        tail_id: words[tail].into(),
        head_name: words[head].into(),
        tail_name: words[tail].into(),
        relation,
    }
}

/// Random sentences over a small vocabulary.
pub fn random_bag(rng: &mut ChaCha8Rng, size: usize, max_len: usize, relation: usize) -> Vec<Instance> {
    (0..size)
        .map(|_| {
            let len = rng.gen_range(4..=max_len);
            let words: Vec<String> = (0..len).map(|_| format!("w{}", rng.gen_range(0..6))).collect();
            let refs: Vec<&str> = words.iter().map(String::as_str).collect();
            let h = rng.gen_range(0..len - 1);
            let t = rng.gen_range(h + 1..len);
            instance(&refs, h, t, relation)
        })
        .collect()
}

pub struct Fixture {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    pub params: ModelParams,
    pub bags: Vec<Vec<FeaturizedInstance>>,
    pub relations: Vec<usize>,
}

/// Random bags of the given sizes with random parameters.
pub fn fixture(seed: u64, sizes: &[usize], cfg: ModelConfig) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<(Vec<Instance>, usize)> = sizes
        .iter()
        .map(|&s| {
            let r = rng.gen_range(0..cfg.n_relations);
            (random_bag(&mut rng, s, cfg.featurizer.max_len, r), r)
        })
        .collect();
    let vocab = Vocab::build(raw.iter().flat_map(|(b, _)| b.iter()));
    let bags = raw
        .iter()
        .map(|(b, _)| b.iter().map(|i| featurize(i, &cfg.featurizer, &vocab).unwrap()).collect())
        .collect();
    let relations = raw.iter().map(|(_, r)| *r).collect();
    let params = ModelParams::init(&cfg, vocab.len(), &mut rng);
    Fixture { cfg, vocab, params, bags, relations }
}

impl Fixture {
    pub fn batch(&self) -> Vec<(&[FeaturizedInstance], usize)> {
        self.bags.iter().map(|b| b.as_slice()).zip(self.relations.iter().copied()).collect()
    }
}
