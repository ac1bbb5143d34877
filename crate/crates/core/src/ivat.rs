//! Instance-level regularizers.
//!
//! Virtual adversarial training on instances the bag attention ignores:
//! instances with `α < threshold` are run as singleton bags, a
//! divergence-maximizing perturbation of their input matrix is estimated by
//! power iteration, and the KL divergence between the clean (detached) and
//! perturbed predictions is penalized. Labels never enter this loss.
//!
//! The same file holds the supervised instance-level variant (fast-gradient
//! perturbation of the input matrix against the bag label) used by the
//! comparison experiments.

use rand_chacha::ChaCha8Rng;
use relext_autograd::{Graph, Tensor, Var};

use crate::attention::mean;
use crate::error::{Error, Result};
use crate::featurizer::FeaturizedInstance;
use crate::model::{BoundParams, ModelConfig, ModelParams};
use crate::perturb::{power_iteration, random_direction, scale_to_radius, Perturbation};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IvatConfig {
    /// Instances with attention strictly below this are selected.
    pub threshold: f64,
    /// Perturbation radius on the input matrix.
    pub epsilon: f64,
    /// Probe scale per unit of `sqrt(active elements)`.
    pub xi: f64,
    pub power_iterations: usize,
    /// Loss weight `β1`.
    pub weight: f64,
}

impl Default for IvatConfig {
    fn default() -> Self {
        IvatConfig { threshold: 0.2, epsilon: 1.0, xi: 1e-6, power_iterations: 1, weight: 1.0 }
    }
}

impl IvatConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("attention threshold {} outside (0, 1)", self.threshold)));
        }
        if !(self.epsilon >= 0.0) || !(self.xi > 0.0) || self.power_iterations == 0 || !(self.weight >= 0.0) {
            return Err(Error::Config(format!("invalid instance regularizer config {self:?}")));
        }
        Ok(())
    }
}

/// Indices of instances with `α < threshold`. Singleton bags are never
/// selected.
pub fn select_noisy(alphas: &[f64], threshold: f64) -> Vec<usize> {
    if alphas.len() < 2 {
        return Vec::new();
    }
    alphas.iter().enumerate().filter(|(_, &a)| a < threshold).map(|(i, _)| i).collect()
}

/// Number of non-pad elements of an input matrix.
pub fn active_elements(cfg: &ModelConfig, f: &FeaturizedInstance) -> usize {
    f.len * cfg.featurizer.input_dim()
}

/// `p(y | x)` for a single instance with frozen parameters.
pub fn instance_distribution(params: &ModelParams, cfg: &ModelConfig, f: &FeaturizedInstance) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let x = p.embed(&mut g, f)?;
    let h = p.encode(&mut g, x, cfg, f)?;
    let d = p.distribution(&mut g, h)?;
    Ok(g.value(d).data().to_vec())
}

/// Input matrix `X` for a single instance with frozen parameters.
pub fn input_matrix(params: &ModelParams, f: &FeaturizedInstance) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let x = p.embed(&mut g, f)?;
    Ok(g.value(x).clone())
}

/// `∇_r KL[p_clean ‖ p(y | x + r)]` with frozen parameters.
pub fn kl_gradient(
    params: &ModelParams,
    cfg: &ModelConfig,
    x: &Tensor,
    f: &FeaturizedInstance,
    clean: &Tensor,
    r: &Tensor,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.bind_frozen_head(&mut g);
    let xc = g.constant(x.clone());
    let rv = g.leaf(r.clone());
    let xr = g.add(xc, rv)?;
    let h = p.encode(&mut g, xr, cfg, f)?;
    let q = p.distribution(&mut g, h)?;
    let pc = g.constant(clean.clone());
    let kl = g.kl_div(pc, q)?;
    let grads = g.backward(kl)?;
    Ok(grads.get_or_zeros(rv, r))
}

/// Virtual adversarial perturbation of norm `epsilon` for one input matrix.
/// Pad rows stay zero and are excluded from the norm.
pub fn estimate_vadv(
    params: &ModelParams,
    cfg: &ModelConfig,
    x: &Tensor,
    f: &FeaturizedInstance,
    clean: &Tensor,
    ivat: &IvatConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Perturbation> {
    let active = active_elements(cfg, f);
    let start = random_direction(x.shape(), active, rng);
    let xi = ivat.xi * (active as f64).sqrt();
    let (d, flat) = power_iteration(start, xi, ivat.power_iterations, active, |r| {
        kl_gradient(params, cfg, x, f, clean, r)
    })?;
    Ok(Perturbation { delta: d.scaled(ivat.epsilon), flat })
}

/// A selected instance inside a training graph.
#[derive(Debug, Clone)]
pub struct InstanceTerm<'a> {
    /// Input matrix node on the training tape.
    pub input: Var,
    pub features: &'a FeaturizedInstance,
    /// Fixed perturbation added to the input matrix.
    pub delta: Tensor,
    /// Detached clean prediction (virtual adversarial terms).
    pub clean: Option<Tensor>,
    /// Bag label (supervised adversarial terms).
    pub relation: Option<usize>,
}

/// Mean over terms of `KL[p_clean ‖ p(y | x + d)]`; zero when empty.
/// Each term must carry its detached clean distribution.
pub fn lds_x_loss(g: &mut Graph, p: &BoundParams, cfg: &ModelConfig, terms: &[InstanceTerm<'_>]) -> Result<Var> {
    let mut kls = Vec::with_capacity(terms.len());
    for t in terms {
        let clean = t.clean.as_ref().ok_or_else(|| Error::Config("virtual adversarial term without clean distribution".into()))?;
        let d = g.constant(t.delta.clone());
        let xa = g.add(t.input, d)?;
        let h = p.encode(g, xa, cfg, t.features)?;
        let q = p.distribution(g, h)?;
        let pc = g.constant(clean.clone());
        kls.push(g.kl_div(pc, q)?);
    }
    mean(g, &kls)
}

/// Fast-gradient perturbation of an input matrix against `relation`.
pub fn estimate_instance_adv(
    params: &ModelParams,
    cfg: &ModelConfig,
    x: &Tensor,
    f: &FeaturizedInstance,
    relation: usize,
    epsilon: f64,
) -> Result<Perturbation> {
    let mut g = Graph::new();
    let p = params.bind_frozen_head(&mut g);
    let xv = g.leaf(x.clone());
    let h = p.encode(&mut g, xv, cfg, f)?;
    let nll = p.nll(&mut g, h, relation)?;
    let mut grad = g.backward(nll)?.get_or_zeros(xv, x);
    crate::perturb::mask_tail(&mut grad, active_elements(cfg, f));
    Ok(match scale_to_radius(&grad, epsilon) {
        Some(delta) => Perturbation { delta, flat: false },
        None => Perturbation { delta: Tensor::zeros(x.shape()), flat: true },
    })
}

/// Mean over terms of `−log p(r | x + d)` for singleton instances.
pub fn instance_adv_loss(g: &mut Graph, p: &BoundParams, cfg: &ModelConfig, terms: &[InstanceTerm<'_>]) -> Result<Var> {
    let mut nlls = Vec::with_capacity(terms.len());
    for t in terms {
        let relation = t.relation.ok_or_else(|| Error::Config("adversarial term without label".into()))?;
        let d = g.constant(t.delta.clone());
        let xa = g.add(t.input, d)?;
        let h = p.encode(g, xa, cfg, t.features)?;
        nlls.push(p.nll(g, h, relation)?);
    }
    mean(g, &nlls)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_selection() {
        assert_eq!(select_noisy(&[0.9, 0.06, 0.04], 0.2), vec![1, 2]);
        assert!(select_noisy(&[1.0], 0.99).is_empty());
        assert!(select_noisy(&[0.5, 0.5], 0.5).is_empty());
    }

    #[test]
    fn config_bounds() {
        assert!(IvatConfig::default().validate().is_ok());
        assert!(IvatConfig { threshold: 1.0, ..Default::default() }.validate().is_err());
        assert!(IvatConfig { power_iterations: 0, ..Default::default() }.validate().is_err());
    }
}
