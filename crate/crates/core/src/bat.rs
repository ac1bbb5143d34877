//! Bag-level regularizers on the attention-weighted representation `z`.
//!
//! Adversarial training: `d = ε · g / ‖g‖₂` with `g = ∇_z(−log p(r | z))`,
//! held constant, and the loss `−log p(r | z + d)` averaged over bags.
//! Gradients reach the encoder through `z` only; the perturbation
//! construction itself is never differentiated.
//!
//! The virtual variant (KL between clean and perturbed `classify(z)`) is
//! here for the comparison experiments.

use rand_chacha::ChaCha8Rng;
use relext_autograd::{Graph, Tensor, Var};

use crate::attention::mean;
use crate::error::{Error, Result};
use crate::model::{BoundParams, ModelParams};
use crate::perturb::{power_iteration, random_direction, scale_to_radius, Perturbation};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatConfig {
    /// Perturbation radius on `z`.
    pub epsilon: f64,
    /// Loss weight `β2`.
    pub weight: f64,
    /// Probe scale and iterations for the virtual variant.
    pub xi: f64,
    pub power_iterations: usize,
}

impl BatConfig {
    /// Radius `0.05 · sqrt(repr_dim)`.
    pub fn for_repr_dim(repr_dim: usize) -> Self {
        BatConfig { epsilon: 0.05 * (repr_dim as f64).sqrt(), weight: 1.0, xi: 1e-6, power_iterations: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !(self.weight >= 0.0) || !(self.xi > 0.0) || self.power_iterations == 0 {
            return Err(Error::Config(format!("invalid bag regularizer config {self:?}")));
        }
        Ok(())
    }
}

impl Default for BatConfig {
    fn default() -> Self {
        BatConfig::for_repr_dim(3 * 230)
    }
}

/// Classifier-only forward from a constant representation.
fn head_graph(params: &ModelParams, g: &mut Graph) -> BoundParams {
    params.bind_frozen_head(g)
}

/// `∇_z(−log p(relation | z))` with frozen classifier.
pub fn nll_gradient(params: &ModelParams, z: &Tensor, relation: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = head_graph(params, &mut g);
    let zv = g.leaf(z.clone());
    let nll = p.nll(&mut g, zv, relation)?;
    Ok(g.backward(nll)?.get_or_zeros(zv, z))
}

/// Fast-gradient perturbation of `z`. A flat gradient yields zero.
pub fn estimate_adv(params: &ModelParams, z: &Tensor, relation: usize, epsilon: f64) -> Result<Perturbation> {
    let g = nll_gradient(params, z, relation)?;
    Ok(match scale_to_radius(&g, epsilon) {
        Some(delta) => Perturbation { delta, flat: false },
        None => Perturbation { delta: Tensor::zeros(z.shape()), flat: true },
    })
}

/// A bag representation inside a training graph.
#[derive(Debug, Clone)]
pub struct BagTerm {
    pub z: Var,
    pub delta: Tensor,
    pub relation: usize,
    /// Detached clean prediction (virtual variant only).
    pub clean: Option<Tensor>,
}

/// Mean over bags of `−log p(r | z + d)`.
pub fn lds_z_loss(g: &mut Graph, p: &BoundParams, terms: &[BagTerm]) -> Result<Var> {
    let mut nlls = Vec::with_capacity(terms.len());
    for t in terms {
        let d = g.constant(t.delta.clone());
        let za = g.add(t.z, d)?;
        nlls.push(p.nll(g, za, t.relation)?);
    }
    mean(g, &nlls)
}

/// Virtual adversarial perturbation of `z` against its own clean prediction.
pub fn estimate_bag_vadv(
    params: &ModelParams,
    z: &Tensor,
    clean: &Tensor,
    cfg: &BatConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Perturbation> {
    let n = z.len();
    let start = random_direction(z.shape(), n, rng);
    let xi = cfg.xi * (n as f64).sqrt();
    let (d, flat) = power_iteration(start, xi, cfg.power_iterations, n, |r| {
        let mut g = Graph::new();
        let p = head_graph(params, &mut g);
        let zc = g.constant(z.clone());
        let rv = g.leaf(r.clone());
        let zr = g.add(zc, rv)?;
        let q = p.distribution(&mut g, zr)?;
        let pc = g.constant(clean.clone());
        let kl = g.kl_div(pc, q)?;
        Ok(g.backward(kl)?.get_or_zeros(rv, r))
    })?;
    Ok(Perturbation { delta: d.scaled(cfg.epsilon), flat })
}

/// Mean over bags of `KL[p(· | z) ‖ p(· | z + d)]` with the clean side detached.
pub fn bag_vat_loss(g: &mut Graph, p: &BoundParams, terms: &[BagTerm]) -> Result<Var> {
    let mut kls = Vec::with_capacity(terms.len());
    for t in terms {
        let clean = t.clean.as_ref().ok_or_else(|| Error::Config("virtual bag term without clean distribution".into()))?;
        let d = g.constant(t.delta.clone());
        let za = g.add(t.z, d)?;
        let q = p.distribution(g, za)?;
        let pc = g.constant(clean.clone());
        kls.push(g.kl_div(pc, q)?);
    }
    mean(g, &kls)
}
