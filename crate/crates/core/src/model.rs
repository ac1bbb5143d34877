//! Model dimensions, parameter tables and their binding onto a tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use relext_autograd::{Graph, Tensor, Var};

use crate::encoder::{encode, ConvVars, EncoderConfig};
use crate::error::{Error, Result};
use crate::featurizer::{embed, EmbeddingVars, FeaturizedInstance, FeaturizerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub featurizer: FeaturizerConfig,
    pub encoder: EncoderConfig,
    /// Including `NA`.
    pub n_relations: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.featurizer.validate()?;
        self.encoder.validate()?;
        if self.n_relations < 2 {
            return Err(Error::Config("need at least two relations".into()));
        }
        Ok(())
    }

    pub fn repr_dim(&self) -> usize {
        self.encoder.output_dim()
    }
}

/// All trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub word_emb: Tensor,
    pub head_pos_emb: Tensor,
    pub tail_pos_emb: Tensor,
    pub conv_weight: Tensor,
    pub conv_bias: Tensor,
    /// Diagonal of the attention matrix `A`.
    pub attention_diag: Tensor,
    /// Row `r` is the query `q_r`.
    pub relation_query: Tensor,
    pub classifier_weight: Tensor,
    pub classifier_bias: Tensor,
}

pub const PARAM_NAMES: [&str; 9] = [
    "word_emb",
    "head_pos_emb",
    "tail_pos_emb",
    "conv_weight",
    "conv_bias",
    "attention_diag",
    "relation_query",
    "classifier_weight",
    "classifier_bias",
];

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()).expect("shape")
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    uniform(rng, &[rows, cols], (6.0 / (rows + cols) as f64).sqrt())
}

impl ModelParams {
    /// Embeddings uniform in ±0.25, dense layers Xavier-uniform, biases
    /// zero, attention diagonal one.
    pub fn init(cfg: &ModelConfig, vocab_size: usize, rng: &mut ChaCha8Rng) -> Self {
        let f = &cfg.featurizer;
        let repr = cfg.repr_dim();
        let window = cfg.encoder.kernel_width * f.input_dim();
        ModelParams {
            word_emb: uniform(rng, &[vocab_size, f.word_dim], 0.25),
            head_pos_emb: uniform(rng, &[f.position_table_len(), f.pos_dim], 0.25),
            tail_pos_emb: uniform(rng, &[f.position_table_len(), f.pos_dim], 0.25),
            conv_weight: xavier(rng, window, cfg.encoder.kernels),
            conv_bias: Tensor::zeros(&[cfg.encoder.kernels]),
            attention_diag: Tensor::filled(&[repr], 1.0),
            relation_query: xavier(rng, cfg.n_relations, repr),
            classifier_weight: xavier(rng, cfg.n_relations, repr),
            classifier_bias: Tensor::zeros(&[cfg.n_relations]),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.word_emb,
            &self.head_pos_emb,
            &self.tail_pos_emb,
            &self.conv_weight,
            &self.conv_bias,
            &self.attention_diag,
            &self.relation_query,
            &self.classifier_weight,
            &self.classifier_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.word_emb,
            &mut self.head_pos_emb,
            &mut self.tail_pos_emb,
            &mut self.conv_weight,
            &mut self.conv_bias,
            &mut self.attention_diag,
            &mut self.relation_query,
            &mut self.classifier_weight,
            &mut self.classifier_bias,
        ]
    }

    pub fn from_tensors(t: [Tensor; 9]) -> Self {
        let [word_emb, head_pos_emb, tail_pos_emb, conv_weight, conv_bias, attention_diag, relation_query, classifier_weight, classifier_bias] =
            t;
        ModelParams {
            word_emb,
            head_pos_emb,
            tail_pos_emb,
            conv_weight,
            conv_bias,
            attention_diag,
            relation_query,
            classifier_weight,
            classifier_bias,
        }
    }

    /// Checks every table against the expected dimensions.
    pub fn check_shapes(&self, cfg: &ModelConfig, vocab_size: usize) -> Result<()> {
        let f = &cfg.featurizer;
        let repr = cfg.repr_dim();
        let expected: [Vec<usize>; 9] = [
            vec![vocab_size, f.word_dim],
            vec![f.position_table_len(), f.pos_dim],
            vec![f.position_table_len(), f.pos_dim],
            vec![cfg.encoder.kernel_width * f.input_dim(), cfg.encoder.kernels],
            vec![cfg.encoder.kernels],
            vec![repr],
            vec![cfg.n_relations, repr],
            vec![cfg.n_relations, repr],
            vec![cfg.n_relations],
        ];
        for ((name, t), shape) in PARAM_NAMES.iter().zip(self.tensors()).zip(expected) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!("{name}: shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        Ok(())
    }

    /// Binds every table as a differentiable leaf.
    pub fn bind_trainable(&self, g: &mut Graph) -> BoundParams {
        self.bind(g, true, true)
    }

    /// Binds every table as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundParams {
        self.bind(g, false, true)
    }

    /// Binds encoder and heads as constants, skipping the embedding tables
    /// (for graphs that start from a precomputed input matrix).
    pub fn bind_frozen_head(&self, g: &mut Graph) -> BoundParams {
        self.bind(g, false, false)
    }

    fn bind(&self, g: &mut Graph, trainable: bool, embeddings: bool) -> BoundParams {
        let mut add = |t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        let emb = embeddings.then(|| EmbeddingVars {
            word: add(&self.word_emb),
            head_pos: add(&self.head_pos_emb),
            tail_pos: add(&self.tail_pos_emb),
        });
        BoundParams {
            emb,
            conv: ConvVars { weight: add(&self.conv_weight), bias: add(&self.conv_bias) },
            attention_diag: add(&self.attention_diag),
            relation_query: add(&self.relation_query),
            classifier_weight: add(&self.classifier_weight),
            classifier_bias: add(&self.classifier_bias),
        }
    }

    /// Applies `param -= lr * grad` for every table.
    pub fn sgd_step(&mut self, grads: &[Tensor; 9], lr: f64) {
        for (p, g) in self.tensors_mut().into_iter().zip(grads) {
            p.axpy(-lr, g);
        }
    }
}

/// Parameter tables recorded on one tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundParams {
    pub emb: Option<EmbeddingVars>,
    pub conv: ConvVars,
    pub attention_diag: Var,
    pub relation_query: Var,
    pub classifier_weight: Var,
    pub classifier_bias: Var,
}

impl BoundParams {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = Vec::with_capacity(9);
        if let Some(e) = self.emb {
            v.extend([e.word, e.head_pos, e.tail_pos]);
        }
        v.extend([
            self.conv.weight,
            self.conv.bias,
            self.attention_diag,
            self.relation_query,
            self.classifier_weight,
            self.classifier_bias,
        ]);
        v
    }

    pub fn embeddings(&self) -> Result<&EmbeddingVars> {
        self.emb.as_ref().ok_or_else(|| Error::Config("embedding tables were not bound".into()))
    }

    /// Input matrix `X` for one instance.
    pub fn embed(&self, g: &mut Graph, f: &FeaturizedInstance) -> Result<Var> {
        embed(g, self.embeddings()?, f)
    }

    /// Sentence representation `h` from an input matrix.
    pub fn encode(&self, g: &mut Graph, x: Var, cfg: &ModelConfig, f: &FeaturizedInstance) -> Result<Var> {
        encode(g, x, &self.conv, cfg.encoder.kernel_width, f)
    }

    /// Classifier scores `o = M z + b`.
    pub fn logits(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let o = g.matvec(self.classifier_weight, z)?;
        Ok(g.add_row_bias(o, self.classifier_bias)?)
    }

    /// `−log p(r | z)`.
    pub fn nll(&self, g: &mut Graph, z: Var, relation: usize) -> Result<Var> {
        let o = self.logits(g, z)?;
        let lp = g.log_softmax(o)?;
        let pick = g.pick(lp, relation)?;
        Ok(g.scale(pick, -1.0)?)
    }

    /// `p(· | z)`.
    pub fn distribution(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let o = self.logits(g, z)?;
        Ok(g.softmax(o)?)
    }
}

/// Gradient tensors for every table (zeros where nothing flowed).
pub fn collect_grads(grads: &relext_autograd::Gradients, g: &Graph, bound: &BoundParams) -> Result<[Tensor; 9]> {
    let vars = bound.vars();
    if vars.len() != 9 {
        return Err(Error::Config("gradient collection needs bound embedding tables".into()));
    }
    Ok(std::array::from_fn(|i| grads.get_or_zeros(vars[i], g.value(vars[i]))))
}
