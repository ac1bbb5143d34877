//! Combined objective `L = J + β1·LDS-X + β2·LDS-Z`, SGD loop, variants and
//! the attention histogram.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use relext_autograd::{softmax, EngineError, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::attention::{mil_loss, BagForward};
use crate::bat::{bag_vat_loss, estimate_adv, estimate_bag_vadv, lds_z_loss, BagTerm, BatConfig};
use crate::error::{Error, Result};
use crate::eval::TrainData;
use crate::featurizer::FeaturizedInstance;
use crate::ivat::{
    estimate_instance_adv, estimate_vadv, instance_adv_loss, lds_x_loss, select_noisy, InstanceTerm, IvatConfig,
};
use crate::model::{collect_grads, BoundParams, ModelConfig, ModelParams};
use crate::rng::{stream_rng, Stream};

/// Instance-level regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InstanceReg {
    None,
    /// Virtual adversarial, low-attention instances only.
    VatNoisy,
    VatAll,
    /// Supervised adversarial against the bag label, low-attention only.
    AtNoisy,
    AtAll,
}

/// Bag-level regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BagReg {
    None,
    At,
    Vat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Variant {
    pub instance: InstanceReg,
    pub bag: BagReg,
}

const NAMED: [(&str, Variant); 11] = [
    ("baseline", Variant { instance: InstanceReg::None, bag: BagReg::None }),
    ("ivat", Variant { instance: InstanceReg::VatNoisy, bag: BagReg::None }),
    ("bat", Variant { instance: InstanceReg::None, bag: BagReg::At }),
    ("ivat+bat", Variant { instance: InstanceReg::VatNoisy, bag: BagReg::At }),
    ("instance-at", Variant { instance: InstanceReg::AtNoisy, bag: BagReg::None }),
    ("bag-vat", Variant { instance: InstanceReg::None, bag: BagReg::Vat }),
    ("all-instance-vat", Variant { instance: InstanceReg::VatAll, bag: BagReg::None }),
    ("all-instance-at", Variant { instance: InstanceReg::AtAll, bag: BagReg::None }),
    ("instance-at+bag-at", Variant { instance: InstanceReg::AtNoisy, bag: BagReg::At }),
    ("instance-vat+bag-vat", Variant { instance: InstanceReg::VatNoisy, bag: BagReg::Vat }),
    ("instance-at+bag-vat", Variant { instance: InstanceReg::AtNoisy, bag: BagReg::Vat }),
];

impl Variant {
    pub const BASELINE: Variant = NAMED[0].1;
    pub const IVAT: Variant = NAMED[1].1;
    pub const BAT: Variant = NAMED[2].1;
    pub const IVAT_BAT: Variant = NAMED[3].1;

    pub fn named() -> impl Iterator<Item = (&'static str, Variant)> {
        NAMED.into_iter()
    }

    pub fn name(&self) -> String {
        self.to_string()
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        NAMED
            .iter()
            .find(|(n, _)| *n == s)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match NAMED.iter().find(|(_, v)| v == self) {
            Some((n, _)) => f.write_str(n),
            None => write!(f, "{:?}+{:?}", self.instance, self.bag),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Bags per step.
    pub batch_size: usize,
    pub lr: f64,
    /// Epoch fractions at which the rate is multiplied by `lr_decay`.
    pub decay_at: Vec<f64>,
    pub lr_decay: f64,
    pub seed: u64,
    pub variant: Variant,
    pub ivat: IvatConfig,
    pub bat: BatConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            batch_size: 50,
            lr: 0.1,
            decay_at: vec![0.6, 0.8],
            lr_decay: 0.1,
            seed: 1,
            variant: Variant::BASELINE,
            ivat: IvatConfig::default(),
            bat: BatConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::Config("learning rate and decay must be positive".into()));
        }
        if self.decay_at.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config("decay points are epoch fractions in [0, 1]".into()));
        }
        self.ivat.validate()?;
        self.bat.validate()
    }

    /// Rate for a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.decay_at.iter().filter(|f| epoch >= (*f * self.epochs as f64).floor() as usize).count();
        self.lr * self.lr_decay.powi(passed as i32)
    }
}

/// Attention weights in ten bins of width 0.1; weights of singleton bags
/// (exactly 1.0) are counted apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AttentionHistogram {
    pub bins: [u64; 10],
    pub singleton: u64,
}

impl AttentionHistogram {
    pub fn add_bag(&mut self, alphas: &[f64]) {
        if alphas.len() == 1 {
            self.singleton += 1;
            return;
        }
        for &a in alphas {
            self.bins[((a * 10.0).floor() as usize).min(9)] += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.bins.iter().sum::<u64>() + self.singleton
    }

    /// Multi-instance mass strictly below `threshold` (a multiple of 0.1).
    pub fn mass_below(&self, threshold: f64) -> u64 {
        let k = ((threshold * 10.0).round() as usize).min(10);
        self.bins[..k].iter().sum()
    }

    pub fn merge(&mut self, other: &AttentionHistogram) {
        for (a, b) in self.bins.iter_mut().zip(other.bins) {
            *a += b;
        }
        self.singleton += other.singleton;
    }
}

/// Histogram of gold-query attention over a set of bags.
pub fn attention_histogram(alphas: &[Vec<f64>]) -> AttentionHistogram {
    let mut h = AttentionHistogram::default();
    for a in alphas {
        h.add_bag(a);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Means over steps.
    pub j: f64,
    pub lds_x: f64,
    pub lds_z: f64,
    pub loss: f64,
    pub histogram: AttentionHistogram,
    pub selected_instances: u64,
    pub flat_instance: u64,
    pub flat_bag: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn to_json_lines(&self) -> String {
        self.epochs.iter().map(|e| serde_json::to_string(e).expect("log serializes") + "\n").collect()
    }
}

/// Terms of one step's objective, all on the same tape.
#[derive(Debug)]
pub struct Objective {
    pub forwards: Vec<BagForward>,
    pub j: Var,
    pub lds_x: Option<Var>,
    pub lds_z: Option<Var>,
    pub total: Var,
    pub selected: u64,
    pub flat_instance: u64,
    pub flat_bag: u64,
}

/// Perturbation for one selected instance.
#[derive(Debug, Clone)]
pub struct PlannedInstance {
    pub index: usize,
    pub delta: Tensor,
    pub clean: Option<Tensor>,
    pub relation: Option<usize>,
    pub flat: bool,
}

#[derive(Debug, Clone)]
pub struct PlannedBag {
    pub delta: Tensor,
    pub clean: Option<Tensor>,
    pub flat: bool,
}

/// Selections and perturbations of one step. Replaying a plan makes the
/// objective a smooth function of the parameters (used by gradient checks).
#[derive(Debug, Clone, Default)]
pub struct StepPlan {
    pub instances: Vec<Vec<PlannedInstance>>,
    pub bags: Vec<PlannedBag>,
}

fn selected_instances(variant: Variant, alphas: &[f64], threshold: f64) -> Vec<usize> {
    match variant.instance {
        InstanceReg::None => Vec::new(),
        InstanceReg::VatNoisy | InstanceReg::AtNoisy => select_noisy(alphas, threshold),
        InstanceReg::VatAll | InstanceReg::AtAll => (0..alphas.len()).collect(),
    }
}

fn plan_step(
    g: &Graph,
    p: &BoundParams,
    params: &ModelParams,
    cfg: &ModelConfig,
    train: &TrainConfig,
    batch: &[(&[FeaturizedInstance], usize)],
    forwards: &[BagForward],
    rng: &mut ChaCha8Rng,
) -> Result<StepPlan> {
    let mut plan = StepPlan::default();
    if train.variant.instance != InstanceReg::None && train.ivat.weight > 0.0 {
        let virtual_ = matches!(train.variant.instance, InstanceReg::VatNoisy | InstanceReg::VatAll);
        for (fwd, (instances, relation)) in forwards.iter().zip(batch) {
            let mut chosen = Vec::new();
            for index in selected_instances(train.variant, &fwd.alphas(g), train.ivat.threshold) {
                let x = g.value(fwd.inputs[index]);
                let f = &instances[index];
                chosen.push(if virtual_ {
                    let clean = softmax(&logits_of(g, p, fwd.reprs[index]));
                    let pert = estimate_vadv(params, cfg, x, f, &clean, &train.ivat, rng)?;
                    PlannedInstance { index, delta: pert.delta, clean: Some(clean), relation: None, flat: pert.flat }
                } else {
                    let pert = estimate_instance_adv(params, cfg, x, f, *relation, train.ivat.epsilon)?;
                    PlannedInstance { index, delta: pert.delta, clean: None, relation: Some(*relation), flat: pert.flat }
                });
            }
            plan.instances.push(chosen);
        }
    }
    if train.variant.bag != BagReg::None && train.bat.weight > 0.0 {
        for fwd in forwards {
            let z = g.value(fwd.z);
            plan.bags.push(match train.variant.bag {
                BagReg::At => {
                    let pert = estimate_adv(params, z, fwd.relation, train.bat.epsilon)?;
                    PlannedBag { delta: pert.delta, clean: None, flat: pert.flat }
                }
                _ => {
                    let clean = softmax(&logits_of(g, p, fwd.z));
                    let pert = estimate_bag_vadv(params, z, &clean, &train.bat, rng)?;
                    PlannedBag { delta: pert.delta, clean: Some(clean), flat: pert.flat }
                }
            });
        }
    }
    Ok(plan)
}

/// Records `J`, the active regularizers and their weighted sum for one
/// batch on parameters `p` bound to `g`. Perturbations are estimated
/// against `params` (which must hold the values bound in `p`) unless a
/// plan is replayed; either way they enter the tape as constants.
#[allow(clippy::too_many_arguments)]
pub fn build_objective(
    g: &mut Graph,
    p: &BoundParams,
    params: &ModelParams,
    cfg: &ModelConfig,
    train: &TrainConfig,
    batch: &[(&[FeaturizedInstance], usize)],
    replay: Option<&StepPlan>,
    rng: &mut ChaCha8Rng,
) -> Result<(Objective, StepPlan)> {
    let (j, forwards) = mil_loss(g, p, cfg, batch)?;
    let plan = match replay {
        Some(plan) => plan.clone(),
        None => plan_step(g, p, params, cfg, train, batch, &forwards, rng)?,
    };
    let virtual_x = matches!(train.variant.instance, InstanceReg::VatNoisy | InstanceReg::VatAll);
    let mut flat_instance = 0;
    let mut terms = Vec::new();
    for (fwd, ((instances, _), chosen)) in forwards.iter().zip(batch.iter().zip(&plan.instances)) {
        for c in chosen {
            flat_instance += c.flat as u64;
            terms.push(InstanceTerm {
                input: fwd.inputs[c.index],
                features: &instances[c.index],
                delta: c.delta.clone(),
                clean: c.clean.clone(),
                relation: c.relation,
            });
        }
    }
    let lds_x = if train.variant.instance != InstanceReg::None && train.ivat.weight > 0.0 {
        Some(if virtual_x { lds_x_loss(g, p, cfg, &terms)? } else { instance_adv_loss(g, p, cfg, &terms)? })
    } else {
        None
    };
    let lds_z = if train.variant.bag != BagReg::None && train.bat.weight > 0.0 {
        let bag_terms: Vec<BagTerm> = forwards
            .iter()
            .zip(&plan.bags)
            .map(|(fwd, b)| BagTerm { z: fwd.z, delta: b.delta.clone(), relation: fwd.relation, clean: b.clean.clone() })
            .collect();
        Some(match train.variant.bag {
            BagReg::At => lds_z_loss(g, p, &bag_terms)?,
            _ => bag_vat_loss(g, p, &bag_terms)?,
        })
    } else {
        None
    };

    let mut total = j;
    if let Some(x) = lds_x {
        let w = g.scale(x, train.ivat.weight)?;
        total = g.add(total, w)?;
    }
    if let Some(z) = lds_z {
        let w = g.scale(z, train.bat.weight)?;
        total = g.add(total, w)?;
    }
    let flat_bag = plan.bags.iter().filter(|b| b.flat).count() as u64;
    let objective =
        Objective { forwards, j, lds_x, lds_z, total, selected: terms.len() as u64, flat_instance, flat_bag };
    Ok((objective, plan))
}

/// Classifier scores of a recorded representation, computed off-tape.
fn logits_of(g: &Graph, p: &BoundParams, z: Var) -> Tensor {
    let w = g.value(p.classifier_weight);
    let b = g.value(p.classifier_bias);
    let z = g.value(z);
    let rows = w.rows();
    Tensor::vector((0..rows).map(|r| w.row(r).iter().zip(z.data()).map(|(a, c)| a * c).sum::<f64>() + b.data()[r]).collect())
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::Engine(EngineError::NonFinite { .. }))
}

/// Trains from a fresh initialization. Fully determined by `train.seed`.
pub fn train(
    data: &TrainData,
    cfg: &ModelConfig,
    vocab_size: usize,
    train: &TrainConfig,
) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    train.validate()?;
    if data.bags.is_empty() {
        return Err(Error::EmptyCorpus("no training bags".into()));
    }
    let mut params = ModelParams::init(cfg, vocab_size, &mut stream_rng(train.seed, Stream::Init));
    let mut shuffle = stream_rng(train.seed, Stream::Shuffle);
    let mut perturb = stream_rng(train.seed, Stream::Perturbation);
    let mut order: Vec<usize> = (0..data.bags.len()).collect();
    let mut log = TrainLog::default();

    for epoch in 0..train.epochs {
        let lr = train.lr_at(epoch);
        order.shuffle(&mut shuffle);
        let mut sums = [0.0f64; 4];
        let mut steps = 0usize;
        let mut entry = EpochLog {
            epoch,
            lr,
            j: 0.0,
            lds_x: 0.0,
            lds_z: 0.0,
            loss: 0.0,
            histogram: AttentionHistogram::default(),
            selected_instances: 0,
            flat_instance: 0,
            flat_bag: 0,
        };
        for (step, chunk) in order.chunks(train.batch_size).enumerate() {
            let batch: Vec<(&[FeaturizedInstance], usize)> =
                chunk.iter().map(|&b| (data.bags[b].as_slice(), data.relations[b])).collect();
            let diverged = |params: &ModelParams| Error::Diverged { epoch, step, last_good: Box::new(params.clone()) };
            let mut g = Graph::new();
            let bound = params.bind_trainable(&mut g);
            let obj = match build_objective(&mut g, &bound, &params, cfg, train, &batch, None, &mut perturb) {
                Ok((o, _)) => o,
                Err(e) if is_divergence(&e) => return Err(diverged(&params)),
                Err(e) => return Err(e),
            };
            let total = g.value(obj.total).item();
            if !total.is_finite() {
                return Err(diverged(&params));
            }
            for fwd in &obj.forwards {
                entry.histogram.add_bag(&fwd.alphas(&g));
            }
            sums[0] += g.value(obj.j).item();
            sums[1] += obj.lds_x.map_or(0.0, |v| g.value(v).item());
            sums[2] += obj.lds_z.map_or(0.0, |v| g.value(v).item());
            sums[3] += total;
            entry.selected_instances += obj.selected;
            entry.flat_instance += obj.flat_instance;
            entry.flat_bag += obj.flat_bag;
            let grads = match g.backward(obj.total) {
                Ok(gr) => gr,
                Err(e @ EngineError::NonFinite { .. }) => {
                    log::warn!("{e}");
                    return Err(diverged(&params));
                }
                Err(e) => return Err(e.into()),
            };
            let grads = collect_grads(&grads, &g, &bound)?;
            if grads.iter().any(|t| !t.all_finite()) {
                return Err(diverged(&params));
            }
            params.sgd_step(&grads, lr);
            steps += 1;
        }
        let n = steps.max(1) as f64;
        entry.j = sums[0] / n;
        entry.lds_x = sums[1] / n;
        entry.lds_z = sums[2] / n;
        entry.loss = sums[3] / n;
        log::info!(
            "epoch {epoch} [{}] lr {lr:.4} J {:.4} lds_x {:.4} lds_z {:.4} L {:.4}",
            train.variant,
            entry.j,
            entry.lds_x,
            entry.lds_z,
            entry.loss
        );
        log.epochs.push(entry);
    }
    Ok((params, log))
}
