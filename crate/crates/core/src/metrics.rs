//! Held-out evaluation: precision/recall curve, area under it, P@N.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One scored (entity pair, relation) prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub pair: usize,
    /// Non-NA relation id.
    pub relation: usize,
    pub score: f64,
    /// Whether the fact is in the test knowledge base.
    pub correct: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    /// 1-based.
    pub rank: usize,
    pub score: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Score descending, ties by `(pair, relation)` ascending.
pub fn rank_order(a: &EvalRecord, b: &EvalRecord) -> Ordering {
    b.score.total_cmp(&a.score).then(a.pair.cmp(&b.pair)).then(a.relation.cmp(&b.relation))
}

pub fn sorted(records: &[EvalRecord]) -> Result<Vec<EvalRecord>> {
    if let Some(r) = records.iter().find(|r| !r.score.is_finite()) {
        return Err(Error::Metrics(format!("non-finite score for pair {} relation {}", r.pair, r.relation)));
    }
    let mut v = records.to_vec();
    v.sort_by(rank_order);
    Ok(v)
}

/// Cumulative precision and recall at every rank. `positives` is the number
/// of facts in the test knowledge base.
pub fn pr_curve(records: &[EvalRecord], positives: usize) -> Result<Vec<PrPoint>> {
    if positives == 0 {
        return Err(Error::Metrics("no positive facts to recall".into()));
    }
    let mut hits = 0usize;
    Ok(sorted(records)?
        .iter()
        .enumerate()
        .map(|(i, r)| {
            hits += r.correct as usize;
            PrPoint {
                rank: i + 1,
                score: r.score,
                precision: hits as f64 / (i + 1) as f64,
                recall: hits as f64 / positives as f64,
            }
        })
        .collect())
}

/// Trapezoidal area over recall. The curve is anchored at recall 0 with the
/// first point's precision.
pub fn auc(curve: &[PrPoint]) -> f64 {
    let Some(first) = curve.first() else { return 0.0 };
    let (mut area, mut r0, mut p0) = (0.0, 0.0, first.precision);
    for pt in curve {
        area += (pt.recall - r0) * (pt.precision + p0) / 2.0;
        r0 = pt.recall;
        p0 = pt.precision;
    }
    area
}

/// Fraction correct among the top `n`.
pub fn p_at_n(records: &[EvalRecord], n: usize) -> Result<f64> {
    if n == 0 || n > records.len() {
        return Err(Error::Metrics(format!("P@{n} requested with {} records", records.len())));
    }
    let s = sorted(records)?;
    Ok(s[..n].iter().filter(|r| r.correct).count() as f64 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub auc: f64,
    #[serde(rename = "p@100")]
    pub p100: Option<f64>,
    #[serde(rename = "p@200")]
    pub p200: Option<f64>,
    #[serde(rename = "p@300")]
    pub p300: Option<f64>,
    /// Mean of the three, when all are defined.
    #[serde(rename = "p@mean")]
    pub p_mean: Option<f64>,
}

/// Curve and summary in one pass. P@N entries are `None` when there are
/// fewer than N records.
pub fn evaluate(records: &[EvalRecord], positives: usize) -> Result<(Vec<PrPoint>, Summary)> {
    let curve = pr_curve(records, positives)?;
    let at = |n: usize| (n <= curve.len()).then(|| curve[n - 1].precision);
    let (p100, p200, p300) = (at(100), at(200), at(300));
    let p_mean = match (p100, p200, p300) {
        (Some(a), Some(b), Some(c)) => Some((a + b + c) / 3.0),
        _ => None,
    };
    Ok((curve.clone(), Summary { auc: auc(&curve), p100, p200, p300, p_mean }))
}

pub fn write_curve_csv(path: &Path, curve: &[PrPoint]) -> Result<()> {
    let mut out = String::from("rank,score,precision,recall\n");
    for p in curve {
        out.push_str(&format!("{},{},{},{}\n", p.rank, p.score, p.precision, p.recall));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_summary_json(path: &Path, summary: &Summary) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let text = serde_json::to_string_pretty(summary).map_err(|e| Error::Metrics(e.to_string()))?;
    writeln!(f, "{text}").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(pair: usize, score: f64, correct: bool) -> EvalRecord {
        EvalRecord { pair, relation: 1, score, correct }
    }

    #[test]
    fn perfect_ranking() {
        let r: Vec<_> = (0..4).map(|i| rec(i, 1.0 - i as f64 * 0.1, true)).collect();
        let c = pr_curve(&r, 4).unwrap();
        assert!(c.iter().all(|p| p.precision == 1.0));
        assert_eq!(auc(&c), 1.0);
    }

    #[test]
    fn single_record() {
        let c = pr_curve(&[rec(0, 0.3, true)], 1).unwrap();
        assert_eq!((c[0].precision, c[0].recall), (1.0, 1.0));
    }

    #[test]
    fn rectangle() {
        let c = vec![
            PrPoint { rank: 1, score: 0.0, precision: 0.5, recall: 0.5 },
            PrPoint { rank: 2, score: 0.0, precision: 0.5, recall: 1.0 },
        ];
        assert_eq!(auc(&c), 0.5);
    }

    #[test]
    fn hand_walked_five() {
        let r = vec![rec(0, 0.9, true), rec(1, 0.8, false), rec(2, 0.7, true), rec(3, 0.6, false), rec(4, 0.5, true)];
        let c = pr_curve(&r, 4).unwrap();
        let p: Vec<f64> = c.iter().map(|x| x.precision).collect();
        let rc: Vec<f64> = c.iter().map(|x| x.recall).collect();
        assert_eq!(p, vec![1.0, 0.5, 2.0 / 3.0, 0.5, 0.6]);
        assert_eq!(rc, vec![0.25, 0.25, 0.5, 0.5, 0.75]);
    }

    #[test]
    fn rejections() {
        assert!(pr_curve(&[rec(0, 0.5, false)], 0).is_err());
        assert!(p_at_n(&[rec(0, 0.5, false)], 2).is_err());
        assert!(sorted(&[rec(0, f64::NAN, false)]).is_err());
    }

    #[test]
    fn ties_are_stable() {
        let a = vec![rec(2, 0.5, true), rec(1, 0.5, false)];
        let b = vec![rec(1, 0.5, false), rec(2, 0.5, true)];
        assert_eq!(pr_curve(&a, 1).unwrap(), pr_curve(&b, 1).unwrap());
        assert_eq!(p_at_n(&a, 1).unwrap(), 0.0);
    }
}
