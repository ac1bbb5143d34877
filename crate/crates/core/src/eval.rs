//! Featurized train/test sets and held-out scoring.

use crate::attention::infer_bag;
use crate::corpus::{Bag, PairBag, NA};
use crate::error::{Error, Result};
use crate::featurizer::{featurize, FeaturizedInstance, FeaturizerConfig, Vocab};
use crate::metrics::EvalRecord;
use crate::model::{ModelConfig, ModelParams};

/// Training bags ready for the model. `source[i]` holds the instances that
/// survived featurization, aligned with `bags[i]`.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub bags: Vec<Vec<FeaturizedInstance>>,
    pub relations: Vec<usize>,
    pub source: Vec<Bag>,
    pub rejected: usize,
}

impl TrainData {
    pub fn prepare(bags: &[Bag], cfg: &FeaturizerConfig, vocab: &Vocab) -> Result<Self> {
        let mut data = TrainData { bags: Vec::new(), relations: Vec::new(), source: Vec::new(), rejected: 0 };
        for bag in bags {
            let mut feats = Vec::with_capacity(bag.len());
            let mut kept = Vec::with_capacity(bag.len());
            for inst in &bag.instances {
                match featurize(inst, cfg, vocab) {
                    Ok(f) => {
                        feats.push(f);
                        kept.push(inst.clone());
                    }
                    Err(e) => {
                        log::debug!("skipping instance: {e}");
                        data.rejected += 1;
                    }
                }
            }
            if !feats.is_empty() {
                data.bags.push(feats);
                data.relations.push(bag.key.relation);
                data.source.push(Bag { key: bag.key.clone(), instances: kept });
            }
        }
        if data.bags.is_empty() {
            return Err(Error::EmptyCorpus("no training bag survived featurization".into()));
        }
        Ok(data)
    }

    pub fn instances(&self) -> usize {
        self.bags.iter().map(Vec::len).sum()
    }
}

/// Test entity pairs with every fact they hold.
#[derive(Debug, Clone)]
pub struct TestData {
    pub bags: Vec<Vec<FeaturizedInstance>>,
    pub relations: Vec<Vec<usize>>,
    pub rejected: usize,
}

impl TestData {
    pub fn prepare(pairs: &[PairBag], cfg: &FeaturizerConfig, vocab: &Vocab) -> Result<Self> {
        let mut data = TestData { bags: Vec::new(), relations: Vec::new(), rejected: 0 };
        for pair in pairs {
            let mut feats = Vec::with_capacity(pair.instances.len());
            for inst in &pair.instances {
                match featurize(inst, cfg, vocab) {
                    Ok(f) => feats.push(f),
                    Err(_) => data.rejected += 1,
                }
            }
            if !feats.is_empty() {
                data.bags.push(feats);
                data.relations.push(pair.relations.clone());
            }
        }
        if data.bags.is_empty() {
            return Err(Error::EmptyCorpus("no test pair survived featurization".into()));
        }
        Ok(data)
    }

    /// Number of non-NA facts, the recall denominator.
    pub fn positives(&self) -> usize {
        self.relations.iter().map(|rs| rs.iter().filter(|&&r| r != NA).count()).sum()
    }
}

/// One record per (pair, non-NA relation).
pub fn score_pairs(params: &ModelParams, cfg: &ModelConfig, test: &TestData) -> Result<Vec<EvalRecord>> {
    let mut out = Vec::with_capacity(test.bags.len() * (cfg.n_relations - 1));
    for (pair, (bag, facts)) in test.bags.iter().zip(&test.relations).enumerate() {
        let scores = infer_bag(params, cfg, bag)?;
        for (relation, &score) in scores.iter().enumerate().skip(1) {
            out.push(EvalRecord { pair, relation, score, correct: facts.contains(&relation) });
        }
    }
    Ok(out)
}
