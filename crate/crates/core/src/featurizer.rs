//! Token ids and relative-position features, and their embedding into the
//! input matrix `X` (one row `[word; pos_head; pos_tail]` per position).
//!
//! Relative distance is `token − entity`, clipped to `[−D, D]` and shifted
//! by `D + 1` so that every table index is positive; index 0 is the pad slot.

use std::collections::HashMap;
use std::path::Path;

use relext_autograd::{Graph, Tensor, Var};

use crate::corpus::Instance;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeaturizerConfig {
    pub word_dim: usize,
    pub pos_dim: usize,
    pub max_len: usize,
    pub max_distance: usize,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        FeaturizerConfig { word_dim: 50, pos_dim: 5, max_len: 120, max_distance: 100 }
    }
}

impl FeaturizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_len < 3 || self.max_distance < 1 || self.word_dim == 0 || self.pos_dim == 0 {
            return Err(Error::Config(format!("invalid featurizer config {self:?}")));
        }
        Ok(())
    }

    /// Row width of `X`.
    pub fn input_dim(&self) -> usize {
        self.word_dim + 2 * self.pos_dim
    }

    /// Rows of each position table.
    pub fn position_table_len(&self) -> usize {
        2 * self.max_distance + 3
    }
}

/// Word vocabulary with reserved pad and unknown ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_words(words: impl IntoIterator<Item = String>) -> Self {
        let mut v = Vocab { words: vec!["<pad>".into(), "<unk>".into()], index: HashMap::new() };
        v.index.insert("<pad>".into(), PAD);
        v.index.insert("<unk>".into(), UNK);
        for w in words {
            if !v.index.contains_key(&w) {
                v.index.insert(w.clone(), v.words.len());
                v.words.push(w);
            }
        }
        v
    }

    /// Vocabulary of every token in `instances`, in order of first use.
    pub fn build<'a>(instances: impl IntoIterator<Item = &'a Instance>) -> Self {
        Vocab::from_words(instances.into_iter().flat_map(|i| i.tokens.iter().cloned()))
    }

    /// Restores a vocabulary from its word list (pad and unk first).
    pub fn from_list(words: Vec<String>) -> Result<Self> {
        if words.len() < 2 || words[0] != "<pad>" || words[1] != "<unk>" {
            return Err(Error::Checkpoint("vocabulary must start with <pad>, <unk>".into()));
        }
        Ok(Vocab::from_words(words.into_iter().skip(2)))
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// Model-ready view of an instance. Contains no relation label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeaturizedInstance {
    pub word_ids: Vec<usize>,
    pub head_pos_ids: Vec<usize>,
    pub tail_pos_ids: Vec<usize>,
    pub head: usize,
    pub tail: usize,
    /// Number of real (non-pad) positions.
    pub len: usize,
}

impl FeaturizedInstance {
    pub fn pad_mask(&self) -> Vec<bool> {
        (0..self.word_ids.len()).map(|i| i < self.len).collect()
    }
}

/// `token − entity`, clipped to `[−max_distance, max_distance]`.
pub fn relative_distance(token: usize, entity: usize, max_distance: usize) -> i64 {
    let d = token as i64 - entity as i64;
    d.clamp(-(max_distance as i64), max_distance as i64)
}

fn position_id(token: usize, entity: usize, max_distance: usize) -> usize {
    (relative_distance(token, entity, max_distance) + max_distance as i64 + 1) as usize
}

/// Entity index is the first token of the mention.
pub fn featurize(instance: &Instance, cfg: &FeaturizerConfig, vocab: &Vocab) -> Result<FeaturizedInstance> {
    let l = cfg.max_len;
    let (head, tail) = (instance.head.start, instance.tail.start);
    if head >= l || tail >= l {
        return Err(Error::Featurize(format!(
            "entity at token {} lies beyond truncation length {l}",
            head.max(tail)
        )));
    }
    let len = instance.tokens.len().min(l);
    let mut word_ids = vec![PAD; l];
    let mut head_pos_ids = vec![0; l];
    let mut tail_pos_ids = vec![0; l];
    for i in 0..len {
        word_ids[i] = vocab.id(&instance.tokens[i]);
        head_pos_ids[i] = position_id(i, head, cfg.max_distance);
        tail_pos_ids[i] = position_id(i, tail, cfg.max_distance);
    }
    Ok(FeaturizedInstance { word_ids, head_pos_ids, tail_pos_ids, head, tail, len })
}

/// Featurizes every instance of every bag, counting rejects.
pub fn featurize_bags<'a, I>(bags: I, cfg: &FeaturizerConfig, vocab: &Vocab) -> (Vec<Vec<FeaturizedInstance>>, usize)
where
    I: IntoIterator<Item = &'a [Instance]>,
{
    let mut rejected = 0;
    let out = bags
        .into_iter()
        .map(|instances| {
            instances
                .iter()
                .filter_map(|inst| match featurize(inst, cfg, vocab) {
                    Ok(f) => Some(f),
                    Err(_) => {
                        rejected += 1;
                        None
                    }
                })
                .collect()
        })
        .collect();
    (out, rejected)
}

/// Embedding tables as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingVars {
    pub word: Var,
    pub head_pos: Var,
    pub tail_pos: Var,
}

/// `X` (l × d): row `i` is `[word_i; head_pos_i; tail_pos_i]`.
pub fn embed(g: &mut Graph, tables: &EmbeddingVars, f: &FeaturizedInstance) -> Result<Var> {
    let w = g.gather(tables.word, &f.word_ids)?;
    let p1 = g.gather(tables.head_pos, &f.head_pos_ids)?;
    let p2 = g.gather(tables.tail_pos, &f.tail_pos_ids)?;
    Ok(g.concat_cols(&[w, p1, p2])?)
}

/// Reads `token v1 .. v_dim` lines and copies matching rows into `table`.
/// Returns the number of rows replaced.
pub fn load_word_vectors(path: &Path, vocab: &Vocab, table: &mut Tensor) -> Result<usize> {
    let dim = table.cols();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut replaced = 0;
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let values: std::result::Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
        let values = values.map_err(|e| Error::Parse { path: path.into(), line: i + 1, message: e.to_string() })?;
        if values.len() != dim {
            return Err(Error::Parse {
                path: path.into(),
                line: i + 1,
                message: format!("expected {dim} values, found {}", values.len()),
            });
        }
        let id = vocab.id(word);
        if id != UNK || word == "<unk>" {
            table.row_mut(id).copy_from_slice(&values);
            replaced += 1;
        }
    }
    Ok(replaced)
}
