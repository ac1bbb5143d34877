//! Train-then-evaluate drivers shared by the CLI and the acceptance suite.

use serde::Serialize;

use crate::attention::bag_attention;
use crate::config::RunConfig;
use crate::corpus::{filter_low_attention, RelationVocab};
use crate::error::{Error, Result};
use crate::eval::{score_pairs, TestData, TrainData};
use crate::featurizer::Vocab;
use crate::metrics::{evaluate, Summary};
use crate::model::{ModelConfig, ModelParams};
use crate::synth::generate_synth;
use crate::trainer::{train, TrainConfig, TrainLog, Variant};

/// A generated corpus, featurized and ready to train on.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub relations: RelationVocab,
    pub vocab: Vocab,
    pub model: ModelConfig,
    pub train: TrainData,
    pub test: TestData,
    pub noise_fraction: f64,
}

/// Generates the synthetic corpus for `run.seed` and builds the vocabulary
/// from its training split.
pub fn prepare_synth(run: &RunConfig) -> Result<Prepared> {
    let corpus = generate_synth(&run.synth)?;
    let vocab = Vocab::build(corpus.train.iter());
    let train = TrainData::prepare(&corpus.train_bags(), &run.featurizer, &vocab)?;
    let test = TestData::prepare(&corpus.test_bags(), &run.featurizer, &vocab)?;
    Ok(Prepared {
        model: run.model(corpus.relations.len()),
        noise_fraction: corpus.train_noise_fraction(),
        relations: corpus.relations,
        vocab,
        train,
        test,
    })
}

/// Trained parameters with their held-out summary.
#[derive(Debug, Clone)]
pub struct Trained {
    pub params: ModelParams,
    pub log: TrainLog,
    pub summary: Summary,
}

pub fn train_and_evaluate(
    data: &TrainData,
    test: &TestData,
    cfg: &ModelConfig,
    vocab_size: usize,
    train_cfg: &TrainConfig,
) -> Result<Trained> {
    let (params, log) = train(data, cfg, vocab_size, train_cfg)?;
    let records = score_pairs(&params, cfg, test)?;
    let (_, summary) = evaluate(&records, test.positives())?;
    Ok(Trained { params, log, summary })
}

/// Gold-query attention weights for every training bag.
pub fn attention_scores(params: &ModelParams, cfg: &ModelConfig, data: &TrainData) -> Result<Vec<Vec<f64>>> {
    data.bags.iter().zip(&data.relations).map(|(b, &r)| bag_attention(params, cfg, b, r)).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct FilterRow {
    pub threshold: f64,
    pub instances: usize,
    pub removed_fraction: f64,
    pub method: String,
    pub auc: f64,
    /// `(auc − full_auc) / full_auc`.
    pub relative_delta: f64,
}

/// Drops training instances whose score is below `threshold`, retrains each
/// method from scratch and compares with its full-data AUC.
#[allow(clippy::too_many_arguments)]
pub fn filter_and_retrain(
    data: &TrainData,
    test: &TestData,
    cfg: &ModelConfig,
    vocab: &Vocab,
    scores: &[Vec<f64>],
    threshold: f64,
    full: &[(Variant, f64)],
    train_cfg: &TrainConfig,
) -> Result<Vec<FilterRow>> {
    let outcome = filter_low_attention(&data.source, scores, threshold)?;
    if outcome.bags.is_empty() {
        return Err(Error::EmptyCorpus(format!("threshold {threshold} removes every instance")));
    }
    let filtered = TrainData::prepare(&outcome.bags, &cfg.featurizer, vocab)?;
    let mut rows = Vec::with_capacity(full.len());
    for &(v, base) in full {
        let t = TrainConfig { variant: v, ..train_cfg.clone() };
        let auc = train_and_evaluate(&filtered, test, cfg, vocab.len(), &t)?.summary.auc;
        log::info!("filter {threshold}: {v} auc {auc:.4} (full {base:.4})");
        rows.push(FilterRow {
            threshold,
            instances: filtered.instances(),
            removed_fraction: outcome.removed_fraction(),
            method: v.to_string(),
            auc,
            relative_delta: (auc - base) / base,
        });
    }
    Ok(rows)
}

/// Trains every method on the full data, scores the training instances with
/// the `scorer` run's attention, then filters at each threshold and retrains.
/// The first rows (threshold 0) hold the full-data runs.
#[allow(clippy::too_many_arguments)]
pub fn run_filter_experiment(
    data: &TrainData,
    test: &TestData,
    cfg: &ModelConfig,
    vocab: &Vocab,
    thresholds: &[f64],
    methods: &[Variant],
    scorer: Variant,
    train_cfg: &TrainConfig,
) -> Result<Vec<FilterRow>> {
    let run = |v: Variant| train_and_evaluate(data, test, cfg, vocab.len(), &TrainConfig { variant: v, ..train_cfg.clone() });
    let mut full = Vec::with_capacity(methods.len());
    let mut scorer_params = None;
    for &v in methods {
        let t = run(v)?;
        full.push((v, t.summary.auc));
        if v == scorer {
            scorer_params = Some(t.params);
        }
    }
    let scorer_params = match scorer_params {
        Some(p) => p,
        None => run(scorer)?.params,
    };
    let scores = attention_scores(&scorer_params, cfg, data)?;
    let mut rows: Vec<FilterRow> = full
        .iter()
        .map(|&(v, auc)| FilterRow {
            threshold: 0.0,
            instances: data.instances(),
            removed_fraction: 0.0,
            method: v.to_string(),
            auc,
            relative_delta: 0.0,
        })
        .collect();
    for &threshold in thresholds {
        rows.extend(filter_and_retrain(data, test, cfg, vocab, &scores, threshold, &full, train_cfg)?);
    }
    Ok(rows)
}
