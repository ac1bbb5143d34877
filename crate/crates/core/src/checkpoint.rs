//! Portable JSON checkpoints: dimensions, vocabularies and every parameter
//! table with its shape. Floats are written in shortest round-trip form, so
//! saving the same parameters twice gives identical bytes.

use std::path::Path;

use relext_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::corpus::RelationVocab;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::featurizer::{FeaturizerConfig, Vocab};
use crate::model::{ModelConfig, ModelParams, PARAM_NAMES};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Dims {
    word_dim: usize,
    pos_dim: usize,
    max_len: usize,
    max_distance: usize,
    kernel_width: usize,
    kernels: usize,
    n_relations: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Table {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct File {
    format_version: u32,
    dims: Dims,
    words: Vec<String>,
    relations: Vec<String>,
    tables: Vec<Table>,
}

/// Everything needed to score new data.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub vocab: Vocab,
    pub relations: RelationVocab,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let f = &self.model.featurizer;
        let file = File {
            format_version: FORMAT_VERSION,
            dims: Dims {
                word_dim: f.word_dim,
                pos_dim: f.pos_dim,
                max_len: f.max_len,
                max_distance: f.max_distance,
                kernel_width: self.model.encoder.kernel_width,
                kernels: self.model.encoder.kernels,
                n_relations: self.model.n_relations,
            },
            words: self.vocab.words().to_vec(),
            relations: self.relations.names().to_vec(),
            tables: PARAM_NAMES
                .iter()
                .zip(self.params.tensors())
                .map(|(n, t)| Table { name: n.to_string(), shape: t.shape().to_vec(), data: t.data().to_vec() })
                .collect(),
        };
        serde_json::to_string(&file).expect("checkpoint serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: File = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if file.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", file.format_version)));
        }
        let d = &file.dims;
        let model = ModelConfig {
            featurizer: FeaturizerConfig {
                word_dim: d.word_dim,
                pos_dim: d.pos_dim,
                max_len: d.max_len,
                max_distance: d.max_distance,
            },
            encoder: EncoderConfig { kernel_width: d.kernel_width, kernels: d.kernels },
            n_relations: d.n_relations,
        };
        model.validate()?;
        let vocab = Vocab::from_list(file.words)?;
        let relations = RelationVocab::new(file.relations)?;
        if relations.len() != model.n_relations {
            return Err(Error::Checkpoint("relation list does not match dimensions".into()));
        }
        if file.tables.len() != PARAM_NAMES.len() {
            return Err(Error::Checkpoint(format!("expected {} tables", PARAM_NAMES.len())));
        }
        let mut tensors = Vec::with_capacity(PARAM_NAMES.len());
        for (t, name) in file.tables.into_iter().zip(PARAM_NAMES) {
            if t.name != name {
                return Err(Error::Checkpoint(format!("table `{}` where `{name}` was expected", t.name)));
            }
            let tensor = Tensor::new(t.shape, t.data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            if !tensor.all_finite() {
                return Err(Error::Checkpoint(format!("{name}: non-finite value")));
            }
            tensors.push(tensor);
        }
        let params = ModelParams::from_tensors(tensors.try_into().expect("nine tables"));
        params.check_shapes(&model, vocab.len())?;
        Ok(Checkpoint { model, vocab, relations, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_json(&text)
    }
}
