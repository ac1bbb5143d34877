//! Independent oracles shared by the integration and acceptance tests.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relext_autograd::{finite_diff_check, FdReport, Graph, Tensor, Var};
use relext_core::encoder::ConvVars;
use relext_core::featurizer::EmbeddingVars;
use relext_core::ivat::IvatConfig;
use relext_core::metrics::EvalRecord;
use relext_core::model::BoundParams;
use relext_core::trainer::{build_objective, StepPlan, TrainConfig, Variant};

use super::{fixture, tiny_config, Fixture};

/// Linear-softmax toy `p(y | x) = softmax(W x)` in two dimensions. Around
/// `r = 0` the KL divergence is `½ rᵀ H r` with
/// `H = Wᵀ (diag(p) − p pᵀ) W`.
pub struct Toy {
    pub w: Tensor,
    pub x: Tensor,
}

impl Toy {
    pub fn clean(&self) -> Tensor {
        let mut g = Graph::new();
        let w = g.constant(self.w.clone());
        let x = g.constant(self.x.clone());
        let o = g.matvec(w, x).unwrap();
        let p = g.softmax(o).unwrap();
        g.value(p).clone()
    }

    pub fn kl_grad(&self, r: &Tensor) -> Tensor {
        let clean = self.clean();
        let mut g = Graph::new();
        let w = g.constant(self.w.clone());
        let x = g.constant(self.x.clone());
        let rv = g.leaf(r.clone());
        let xr = g.add(x, rv).unwrap();
        let o = g.matvec(w, xr).unwrap();
        let q = g.softmax(o).unwrap();
        let pc = g.constant(clean);
        let kl = g.kl_div(pc, q).unwrap();
        g.backward(kl).unwrap().get_or_zeros(rv, r)
    }

    /// Eigenpairs of the 2×2 symmetric Hessian, largest first.
    pub fn eigen(&self) -> ((f64, [f64; 2]), (f64, [f64; 2])) {
        let p = self.clean();
        let n = p.len();
        let mut h = [[0.0; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                let mut s = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        let c = if i == j { p.data()[i] } else { 0.0 } - p.data()[i] * p.data()[j];
                        s += self.w.at(i, a) * c * self.w.at(j, b);
                    }
                }
                h[a][b] = s;
            }
        }
        let (a, b, d) = (h[0][0], h[0][1], h[1][1]);
        let mid = (a + d) / 2.0;
        let rad = (((a - d) / 2.0).powi(2) + b * b).sqrt();
        let (l1, l2) = (mid + rad, mid - rad);
        let vec_for = |l: f64| {
            let v = if b.abs() > 1e-15 { [b, l - a] } else if (l - a).abs() < (l - d).abs() { [1.0, 0.0] } else { [0.0, 1.0] };
            let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
            [v[0] / n, v[1] / n]
        };
        ((l1, vec_for(l1)), (l2, vec_for(l2)))
    }
}

pub fn abs_cos(d: &Tensor, v: [f64; 2]) -> f64 {
    (d.data()[0] * v[0] + d.data()[1] * v[1]).abs() / d.l2_norm()
}

pub fn toy() -> Toy {
    Toy {
        w: Tensor::from_rows(&[vec![3.0, 0.4], vec![-2.5, 0.1], vec![0.2, -0.6]]).unwrap(),
        x: Tensor::vector(vec![0.1, -0.2]),
    }
}

/// Brute force: repeatedly take the best remaining record (highest score,
/// then smallest pair, then smallest relation) and accumulate.
pub fn oracle(records: &[EvalRecord], positives: usize) -> (Vec<(f64, f64)>, f64) {
    let mut left: Vec<EvalRecord> = records.to_vec();
    let mut points = Vec::new();
    let mut hits = 0;
    while !left.is_empty() {
        let mut best = 0;
        for i in 1..left.len() {
            let (a, b) = (&left[i], &left[best]);
            if a.score > b.score || (a.score == b.score && (a.pair, a.relation) < (b.pair, b.relation)) {
                best = i;
            }
        }
        let r = left.remove(best);
        if r.correct {
            hits += 1;
        }
        let k = points.len() + 1;
        points.push((hits as f64 / k as f64, hits as f64 / positives as f64));
    }
    let mut area = 0.0;
    let mut prev = (points[0].0, 0.0);
    for &(p, r) in &points {
        area += (r - prev.1) * (p + prev.0) / 2.0;
        prev = (p, r);
    }
    (points, area)
}

pub fn random_records(rng: &mut ChaCha8Rng) -> (Vec<EvalRecord>, usize) {
    let pairs = rng.gen_range(1..60);
    let mut out = Vec::new();
    let mut positives = 0;
    for pair in 0..pairs {
        for relation in 1..4 {
            // coarse scores so ties are common
            let score = rng.gen_range(0..12) as f64 / 11.0;
            let correct = rng.gen_bool(0.3);
            positives += correct as usize;
            out.push(EvalRecord { pair, relation, score, correct });
        }
    }
    // facts the model never scored still count toward recall
    positives += rng.gen_range(0..3);
    if positives == 0 {
        positives = 1;
    }
    out.shuffle(rng);
    (out, positives)
}

pub fn bound_from(v: &[Var]) -> BoundParams {
    BoundParams {
        emb: Some(EmbeddingVars { word: v[0], head_pos: v[1], tail_pos: v[2] }),
        conv: ConvVars { weight: v[3], bias: v[4] },
        attention_diag: v[5],
        relation_query: v[6],
        classifier_weight: v[7],
        classifier_bias: v[8],
    }
}

pub fn train_config(variant: Variant) -> TrainConfig {
    let mut t = TrainConfig { variant, ..TrainConfig::default() };
    // select every instance of a multi-instance bag
    t.ivat = IvatConfig { threshold: 0.99, epsilon: 0.5, ..IvatConfig::default() };
    t.bat.epsilon = 0.3;
    t.ivat.weight = 0.7;
    t.bat.weight = 1.3;
    t
}

pub fn plan_for(fx: &Fixture, t: &TrainConfig) -> StepPlan {
    let mut g = Graph::new();
    let p = fx.params.bind_trainable(&mut g);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    build_objective(&mut g, &p, &fx.params, &fx.cfg, t, &fx.batch(), None, &mut rng).unwrap().1
}

/// Central differences of the full objective for `variant` on two bags,
/// replaying one fixed selection and perturbation plan.
pub fn objective_fd(variant: Variant, seed: u64) -> FdReport {
    let fx = fixture(seed, &[3, 2], tiny_config());
    let t = train_config(variant);
    let plan = plan_for(&fx, &t);
    let batch = fx.batch();
    let inputs: Vec<Tensor> = fx.params.tensors().into_iter().cloned().collect();
    finite_diff_check(
        |g, v| {
            let p = bound_from(v);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let (obj, _) = build_objective(g, &p, &fx.params, &fx.cfg, &t, &batch, Some(&plan), &mut rng)
                .map_err(|e| match e {
                    relext_core::Error::Engine(e) => e,
                    other => panic!("{other}"),
                })?;
            Ok(obj.total)
        },
        &inputs,
        1e-5,
    )
    .unwrap()
}
