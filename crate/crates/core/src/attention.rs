//! Selective attention over a bag, bag representation, relation classifier
//! and the multi-instance objective.

use relext_autograd::{Graph, Var};

use crate::error::Result;
use crate::featurizer::FeaturizedInstance;
use crate::model::{BoundParams, ModelConfig, ModelParams};

/// Attention logits `f_i = h_i · diag(A) · q_r`, softmax-normalized.
pub fn attention_scores(g: &mut Graph, p: &BoundParams, hs: Var, relation: usize) -> Result<Var> {
    let repr = g.value(p.relation_query).cols();
    let q = g.gather(p.relation_query, &[relation])?;
    let q = g.reshape(q, vec![repr])?;
    let aq = g.mul(p.attention_diag, q)?;
    let f = g.matvec(hs, aq)?;
    Ok(g.softmax(f)?)
}

/// `z = Σ α_i h_i`.
pub fn bag_repr(g: &mut Graph, hs: Var, alpha: Var) -> Result<Var> {
    Ok(g.vecmat(alpha, hs)?)
}

/// `softmax(M z + b)`.
pub fn classify(g: &mut Graph, p: &BoundParams, z: Var) -> Result<Var> {
    p.distribution(g, z)
}

/// Recorded forward pass of one bag.
#[derive(Debug, Clone)]
pub struct BagForward {
    /// Input matrices, one per instance.
    pub inputs: Vec<Var>,
    /// Sentence representations, one per instance.
    pub reprs: Vec<Var>,
    pub alpha: Var,
    pub z: Var,
    pub relation: usize,
    /// `−log p(relation | z)`.
    pub nll: Var,
}

impl BagForward {
    pub fn alphas(&self, g: &Graph) -> Vec<f64> {
        g.value(self.alpha).data().to_vec()
    }
}

/// Encodes every instance of a bag and attends with the query of `relation`.
pub fn forward_bag(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &ModelConfig,
    instances: &[FeaturizedInstance],
    relation: usize,
) -> Result<BagForward> {
    let mut inputs = Vec::with_capacity(instances.len());
    let mut reprs = Vec::with_capacity(instances.len());
    for f in instances {
        let x = p.embed(g, f)?;
        reprs.push(p.encode(g, x, cfg, f)?);
        inputs.push(x);
    }
    let hs = g.stack(&reprs)?;
    let alpha = attention_scores(g, p, hs, relation)?;
    let z = bag_repr(g, hs, alpha)?;
    let nll = p.nll(g, z, relation)?;
    Ok(BagForward { inputs, reprs, alpha, z, relation, nll })
}

/// Mean over bags of `−log p(r_i | z_i)`, with the gold relation as the
/// attention query.
pub fn mil_loss(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &ModelConfig,
    batch: &[(&[FeaturizedInstance], usize)],
) -> Result<(Var, Vec<BagForward>)> {
    let mut bags = Vec::with_capacity(batch.len());
    for (instances, relation) in batch {
        bags.push(forward_bag(g, p, cfg, instances, *relation)?);
    }
    let nlls: Vec<Var> = bags.iter().map(|b| b.nll).collect();
    let j = mean(g, &nlls)?;
    Ok((j, bags))
}

/// Mean of scalar nodes; zero for an empty list.
pub fn mean(g: &mut Graph, scalars: &[Var]) -> Result<Var> {
    if scalars.is_empty() {
        return Ok(g.constant(relext_autograd::Tensor::scalar(0.0)));
    }
    let stacked = g.stack(scalars)?;
    let total = g.sum(stacked)?;
    Ok(g.scale(total, 1.0 / scalars.len() as f64)?)
}

/// Test-time scores: for every relation `r`, attend with `q_r` and report
/// `p(r | z_r)`.
pub fn infer_bag(params: &ModelParams, cfg: &ModelConfig, instances: &[FeaturizedInstance]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let mut reprs = Vec::with_capacity(instances.len());
    for f in instances {
        let x = p.embed(&mut g, f)?;
        reprs.push(p.encode(&mut g, x, cfg, f)?);
    }
    let hs = g.stack(&reprs)?;
    let mut scores = Vec::with_capacity(cfg.n_relations);
    for r in 0..cfg.n_relations {
        let alpha = attention_scores(&mut g, &p, hs, r)?;
        let z = bag_repr(&mut g, hs, alpha)?;
        let dist = classify(&mut g, &p, z)?;
        scores.push(g.value(dist).data()[r]);
    }
    Ok(scores)
}

/// Attention weights of each instance under the gold-relation query.
pub fn bag_attention(params: &ModelParams, cfg: &ModelConfig, instances: &[FeaturizedInstance], relation: usize) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let fwd = forward_bag(&mut g, &p, cfg, instances, relation)?;
    Ok(fwd.alphas(&g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use relext_autograd::{softmax, Tensor};

    fn bound_heads(g: &mut Graph, diag: Vec<f64>, query: Vec<Vec<f64>>, w: Vec<Vec<f64>>, b: Vec<f64>) -> BoundParams {
        let zero = g.constant(Tensor::zeros(&[1]));
        BoundParams {
            emb: None,
            conv: crate::encoder::ConvVars { weight: zero, bias: zero },
            attention_diag: g.constant(Tensor::vector(diag)),
            relation_query: g.constant(Tensor::from_rows(&query).unwrap()),
            classifier_weight: g.constant(Tensor::from_rows(&w).unwrap()),
            classifier_bias: g.constant(Tensor::vector(b)),
        }
    }

    fn alphas_for(hs: Vec<Vec<f64>>, diag: Vec<f64>, q: Vec<f64>) -> Vec<f64> {
        let mut g = Graph::new();
        let n = q.len();
        let p = bound_heads(&mut g, diag, vec![q], vec![vec![0.0; n]], vec![0.0]);
        let h = g.constant(Tensor::from_rows(&hs).unwrap());
        let a = attention_scores(&mut g, &p, h, 0).unwrap();
        g.value(a).data().to_vec()
    }

    #[test]
    fn singleton_bag_gets_full_weight() {
        assert_eq!(alphas_for(vec![vec![0.3, -2.0]], vec![1.0, 0.5], vec![4.0, 1.0]), vec![1.0]);
    }

    #[test]
    fn equal_instances_split_evenly() {
        assert_eq!(alphas_for(vec![vec![0.3, 0.1]; 2], vec![1.0, 1.0], vec![1.0, 2.0]), vec![0.5, 0.5]);
    }

    #[test]
    fn closed_form_two_instance_softmax() {
        // f = [ln 2, 0]
        let a = alphas_for(vec![vec![2f64.ln()], vec![0.0]], vec![1.0], vec![1.0]);
        assert!((a[0] - 2.0 / 3.0).abs() < 1e-15 && (a[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn bag_repr_weighted_sum() {
        let mut g = Graph::new();
        let rows = vec![vec![1.0, 2.0], vec![-1.0, 0.5], vec![3.0, -2.0]];
        let h = g.constant(Tensor::from_rows(&rows).unwrap());
        let a = g.constant(Tensor::vector(vec![0.2, 0.3, 0.5]));
        let z = bag_repr(&mut g, h, a).unwrap();
        let expect = [0.2 - 0.3 + 1.5, 0.4 + 0.15 - 1.0];
        for (v, e) in g.value(z).data().iter().zip(expect) {
            assert!((v - e).abs() < 1e-15);
        }
        let one_hot = g.constant(Tensor::vector(vec![0.0, 1.0, 0.0]));
        let z = bag_repr(&mut g, h, one_hot).unwrap();
        assert_eq!(g.value(z).data(), &[-1.0, 0.5]);
    }

    #[test]
    fn classifier_outputs() {
        let mut g = Graph::new();
        let p = bound_heads(&mut g, vec![1.0; 2], vec![vec![0.0; 2]; 3], vec![vec![0.0; 2]; 3], vec![0.0; 3]);
        let z = g.constant(Tensor::vector(vec![0.4, -0.7]));
        let d = classify(&mut g, &p, z).unwrap();
        assert!(g.value(d).data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));

        let p = bound_heads(&mut g, vec![1.0; 2], vec![vec![0.0; 2]; 3], vec![vec![0.0; 2]; 3], vec![0.0, 60.0, 0.0]);
        let d = classify(&mut g, &p, z).unwrap();
        assert!(g.value(d).data()[1] >= 1.0 - 1e-15);

        let w = vec![vec![0.3, -0.2], vec![1.1, 0.4], vec![-0.5, 0.9]];
        let b = vec![0.1, -0.2, 0.05];
        let p = bound_heads(&mut g, vec![1.0; 2], vec![vec![0.0; 2]; 3], w.clone(), b.clone());
        let d = classify(&mut g, &p, z).unwrap();
        let o: Vec<f64> = w.iter().zip(&b).map(|(row, bi)| row[0] * 0.4 - row[1] * 0.7 + bi).collect();
        let e: Vec<f64> = o.iter().map(|v| v.exp()).collect();
        let total: f64 = e.iter().sum();
        for (v, ei) in g.value(d).data().iter().zip(&e) {
            assert!((v - ei / total).abs() < 1e-15);
        }
        assert_eq!(softmax(&Tensor::vector(o)).data(), g.value(d).data());
    }
}
