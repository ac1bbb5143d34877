//! JSON-lines corpora and bag construction.
//!
//! One line per instance:
//!
//! ```text
//! {"text": "...", "h": {"name": "...", "id": "...", "pos": [s, e]},
//!  "t": {"name": "...", "id": "...", "pos": [s, e]}, "relation": "..."}
//! ```
//!
//! `text` is pre-tokenized and split on whitespace. `pos` holds half-open
//! token indices `[start, end)`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NA: usize = 0;

/// Half-open token range of an entity mention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BagKey {
    pub head: String,
    pub tail: String,
    pub relation: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub tokens: Vec<String>,
    pub head: Span,
    pub tail: Span,
    pub head_id: String,
    pub tail_id: String,
    pub head_name: String,
    pub tail_name: String,
    pub relation: usize,
}

impl Instance {
    pub fn key(&self) -> BagKey {
        BagKey { head: self.head_id.clone(), tail: self.tail_id.clone(), relation: self.relation }
    }

    fn validate(&self, n_relations: usize) -> std::result::Result<(), String> {
        let n = self.tokens.len();
        for (name, span) in [("head", self.head), ("tail", self.tail)] {
            if span.start >= span.end || span.end > n {
                return Err(format!("{name} span [{}, {}) outside {n} tokens", span.start, span.end));
            }
        }
        if self.head.overlaps(&self.tail) {
            return Err("head and tail spans overlap".into());
        }
        if self.relation >= n_relations {
            return Err(format!("relation id {} out of range", self.relation));
        }
        Ok(())
    }
}

/// Training unit: all instances sharing (head, tail, relation).
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub key: BagKey,
    pub instances: Vec<Instance>,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// Evaluation unit: all instances of one entity pair, with every relation
/// the pair holds.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBag {
    pub head: String,
    pub tail: String,
    /// Sorted, deduplicated.
    pub relations: Vec<usize>,
    pub instances: Vec<Instance>,
}

/// Relation names; id 0 is always `NA`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationVocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl RelationVocab {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.first().map(String::as_str) != Some("NA") {
            return Err(Error::Config("relation vocabulary must start with NA".into()));
        }
        let mut index = HashMap::new();
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate relation `{n}`")));
            }
        }
        Ok(RelationVocab { names, index })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let names: Vec<String> =
            text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
        RelationVocab::new(names).map_err(|e| match e {
            Error::Config(message) => Error::Parse { path: path.into(), line: 1, message },
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.names.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EntityRecord {
    name: String,
    id: String,
    pos: [usize; 2],
}

#[derive(Debug, Serialize, Deserialize)]
struct InstanceRecord {
    text: String,
    h: EntityRecord,
    t: EntityRecord,
    relation: String,
}

/// Counts reported by [`load_corpus`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CorpusStats {
    pub instances: usize,
    pub bags: usize,
    pub entity_pairs: usize,
}

pub fn load_instances(path: &Path, relations: &RelationVocab) -> Result<Vec<Instance>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { path: path.into(), line: i + 1, message };
        let rec: InstanceRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let relation = relations
            .id(&rec.relation)
            .ok_or_else(|| parse_err(format!("unknown relation `{}`", rec.relation)))?;
        let inst = Instance {
            tokens: rec.text.split_whitespace().map(String::from).collect(),
            head: Span::new(rec.h.pos[0], rec.h.pos[1]),
            tail: Span::new(rec.t.pos[0], rec.t.pos[1]),
            head_id: rec.h.id,
            tail_id: rec.t.id,
            head_name: rec.h.name,
            tail_name: rec.t.name,
            relation,
        };
        inst.validate(relations.len()).map_err(parse_err)?;
        out.push(inst);
    }
    Ok(out)
}

/// Loads a JSON-lines file and groups it into (head, tail, relation) bags.
pub fn load_corpus(path: &Path, relations: &RelationVocab) -> Result<(Vec<Bag>, CorpusStats)> {
    let instances = load_instances(path, relations)?;
    let stats = corpus_stats(&instances);
    let bags = group_by_triple(instances);
    log::info!(
        "{}: {} instances, {} bags, {} entity pairs",
        path.display(),
        stats.instances,
        stats.bags,
        stats.entity_pairs
    );
    Ok((bags, stats))
}

pub fn corpus_stats(instances: &[Instance]) -> CorpusStats {
    let mut triples = std::collections::HashSet::new();
    let mut pairs = std::collections::HashSet::new();
    for inst in instances {
        triples.insert(inst.key());
        pairs.insert((inst.head_id.as_str(), inst.tail_id.as_str()));
    }
    CorpusStats { instances: instances.len(), bags: triples.len(), entity_pairs: pairs.len() }
}

/// Bags in order of first appearance; instances keep file order.
pub fn group_by_triple(instances: Vec<Instance>) -> Vec<Bag> {
    let mut slot: HashMap<BagKey, usize> = HashMap::new();
    let mut bags: Vec<Bag> = Vec::new();
    for inst in instances {
        let key = inst.key();
        match slot.get(&key) {
            Some(&i) => bags[i].instances.push(inst),
            None => {
                slot.insert(key.clone(), bags.len());
                bags.push(Bag { key, instances: vec![inst] });
            }
        }
    }
    bags
}

/// Groups by entity pair. A sentence listed once per relation of a
/// multi-label pair is kept once.
pub fn group_by_pair(instances: Vec<Instance>) -> Vec<PairBag> {
    let mut slot: HashMap<(String, String), usize> = HashMap::new();
    let mut bags: Vec<PairBag> = Vec::new();
    for inst in instances {
        let key = (inst.head_id.clone(), inst.tail_id.clone());
        let i = *slot.entry(key).or_insert_with(|| {
            bags.push(PairBag {
                head: inst.head_id.clone(),
                tail: inst.tail_id.clone(),
                relations: Vec::new(),
                instances: Vec::new(),
            });
            bags.len() - 1
        });
        let bag = &mut bags[i];
        if let Err(pos) = bag.relations.binary_search(&inst.relation) {
            bag.relations.insert(pos, inst.relation);
        }
        let duplicate = bag
            .instances
            .iter()
            .any(|o| o.tokens == inst.tokens && o.head == inst.head && o.tail == inst.tail);
        if !duplicate {
            bag.instances.push(inst);
        }
    }
    bags
}

pub fn write_instances<'a>(
    path: &Path,
    instances: impl IntoIterator<Item = &'a Instance>,
    relations: &RelationVocab,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for inst in instances {
        let rec = InstanceRecord {
            text: inst.tokens.join(" "),
            h: EntityRecord {
                name: inst.head_name.clone(),
                id: inst.head_id.clone(),
                pos: [inst.head.start, inst.head.end],
            },
            t: EntityRecord {
                name: inst.tail_name.clone(),
                id: inst.tail_id.clone(),
                pos: [inst.tail.start, inst.tail.end],
            },
            relation: relations.name(inst.relation).to_string(),
        };
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Result of [`filter_low_attention`].
#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub bags: Vec<Bag>,
    pub removed: usize,
    pub kept: usize,
}

impl FilterOutcome {
    pub fn removed_fraction(&self) -> f64 {
        let total = self.removed + self.kept;
        if total == 0 {
            0.0
        } else {
            self.removed as f64 / total as f64
        }
    }
}

/// Drops instances whose attention score is strictly below `threshold`.
/// Bags left empty are dropped.
pub fn filter_low_attention(bags: &[Bag], scores: &[Vec<f64>], threshold: f64) -> Result<FilterOutcome> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::Config(format!("filter threshold {threshold} outside [0, 1)")));
    }
    let mut out = Vec::with_capacity(bags.len());
    let (mut removed, mut kept) = (0, 0);
    for (b, bag) in bags.iter().enumerate() {
        let bag_scores = scores.get(b).ok_or(Error::MissingScore { bag: b, instance: 0 })?;
        if bag_scores.len() < bag.len() {
            return Err(Error::MissingScore { bag: b, instance: bag_scores.len() });
        }
        let instances: Vec<Instance> = bag
            .instances
            .iter()
            .zip(bag_scores)
            .filter(|(_, &s)| s >= threshold)
            .map(|(inst, _)| inst.clone())
            .collect();
        kept += instances.len();
        removed += bag.len() - instances.len();
        if !instances.is_empty() {
            out.push(Bag { key: bag.key.clone(), instances });
        }
    }
    Ok(FilterOutcome { bags: out, removed, kept })
}
