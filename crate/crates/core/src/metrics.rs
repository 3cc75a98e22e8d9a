//! Evaluation of predicted words against gold words.
//!
//! Edit distance counts phoneme-token operations. B-Cubed F1 aligns the two
//! words and treats every alignment column as an item labelled by its
//! (predicted token, gold token) pair, with `-` standing for a gap, so a
//! consistent substitution costs less than scattered ones.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{align_pair, site_str};
use crate::phonology::{Phoneme, SoundClassModel};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("BothEmpty: normalized edit distance of two empty sequences")]
    BothEmpty,
    #[error("EmptySequence: B-Cubed F1 needs two non-empty sequences")]
    EmptySequence,
    #[error("NoPairs: nothing to evaluate")]
    NoPairs,
    #[error("Io: {0}")]
    Io(#[from] io::Error),
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance divided by the longer length.
pub fn ned<T: PartialEq>(a: &[T], b: &[T]) -> Result<f64, MetricsError> {
    let longest = a.len().max(b.len());
    if longest == 0 {
        return Err(MetricsError::BothEmpty);
    }
    Ok(edit_distance(a, b) as f64 / longest as f64)
}

/// B-Cubed F1 of items given as (predicted label, gold label) pairs.
pub fn bcubed_from_items<L: Eq + std::hash::Hash>(items: &[(L, L)]) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    let mut by_pred: HashMap<&L, usize> = HashMap::new();
    let mut by_gold: HashMap<&L, usize> = HashMap::new();
    let mut by_both: HashMap<(&L, &L), usize> = HashMap::new();
    for (p, g) in items {
        *by_pred.entry(p).or_default() += 1;
        *by_gold.entry(g).or_default() += 1;
        *by_both.entry((p, g)).or_default() += 1;
    }
    let n = items.len() as f64;
    let (mut precision, mut recall) = (0.0, 0.0);
    for (p, g) in items {
        let both = by_both[&(p, g)] as f64;
        precision += both / by_pred[p] as f64;
        recall += both / by_gold[g] as f64;
    }
    let (precision, recall) = (precision / n, recall / n);
    2.0 * precision * recall / (precision + recall)
}

/// Alignment columns of `pred` against `gold` as (pred token, gold token).
pub fn aligned_items(pred: &[Phoneme], gold: &[Phoneme], model: &SoundClassModel) -> Result<Vec<(String, String)>, MetricsError> {
    let al = align_pair(pred, gold, model).map_err(|_| MetricsError::EmptySequence)?;
    Ok(al
        .row_a
        .iter()
        .zip(&al.row_b)
        .map(|(p, g)| (site_str(p).to_string(), site_str(g).to_string()))
        .collect())
}

pub fn bcubed_f1(pred: &[Phoneme], gold: &[Phoneme], model: &SoundClassModel) -> Result<f64, MetricsError> {
    Ok(bcubed_from_items(&aligned_items(pred, gold, model)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub ed: f64,
    pub ned: f64,
    pub bc: f64,
}

/// Scores of one hypothesis. An empty hypothesis costs its full gold length
/// in edit distance, 1 in NED and 0 in B-Cubed F1.
pub fn score_pair(pred: &[Phoneme], gold: &[Phoneme], model: &SoundClassModel) -> Result<Scores, MetricsError> {
    if gold.is_empty() {
        return Err(MetricsError::EmptySequence);
    }
    if pred.is_empty() {
        return Ok(Scores {
            ed: gold.len() as f64,
            ned: 1.0,
            bc: 0.0,
        });
    }
    Ok(Scores {
        ed: edit_distance(pred, gold) as f64,
        ned: ned(pred, gold)?,
        bc: bcubed_f1(pred, gold, model)?,
    })
}

/// One hypothesis with its reference and family.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub family: String,
    pub pred: Vec<Phoneme>,
    pub gold: Vec<Phoneme>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyScores {
    pub ed: f64,
    pub ned: f64,
    pub bc: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ed: f64,
    pub ned: f64,
    pub bc: f64,
    pub n: usize,
    pub per_family: BTreeMap<String, FamilyScores>,
}

impl EvalReport {
    pub fn scores(&self) -> Scores {
        Scores {
            ed: self.ed,
            ned: self.ned,
            bc: self.bc,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn write(&self, path: &Path) -> Result<(), MetricsError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    /// Family rows with ED, NED and BC columns.
    pub fn family_table(&self) -> String {
        let mut out = String::from("family\ted\tned\tbc\tn\n");
        for (family, s) in &self.per_family {
            out.push_str(&format!("{family}\t{:.4}\t{:.4}\t{:.4}\t{}\n", s.ed, s.ned, s.bc, s.n));
        }
        out
    }
}

fn mean(sum: Scores, n: usize) -> Scores {
    let n = n as f64;
    Scores {
        ed: sum.ed / n,
        ned: sum.ned / n,
        bc: sum.bc / n,
    }
}

fn add(a: Scores, b: Scores) -> Scores {
    Scores {
        ed: a.ed + b.ed,
        ned: a.ned + b.ned,
        bc: a.bc + b.bc,
    }
}

/// Per-instance scores averaged overall and per family.
pub fn evaluate(pairs: &[Prediction], model: &SoundClassModel) -> Result<EvalReport, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::NoPairs);
    }
    let mut total = Scores::default();
    let mut families: BTreeMap<String, (Scores, usize)> = BTreeMap::new();
    for p in pairs {
        let s = score_pair(&p.pred, &p.gold, model)?;
        total = add(total, s);
        let entry = families.entry(p.family.clone()).or_default();
        entry.0 = add(entry.0, s);
        entry.1 += 1;
    }
    let overall = mean(total, pairs.len());
    let per_family = families
        .into_iter()
        .map(|(f, (sum, n))| {
            let m = mean(sum, n);
            (
                f,
                FamilyScores {
                    ed: m.ed,
                    ned: m.ned,
                    bc: m.bc,
                    n,
                },
            )
        })
        .collect();
    Ok(EvalReport {
        ed: overall.ed,
        ned: overall.ned,
        bc: overall.bc,
        n: pairs.len(),
        per_family,
    })
}

/// Ranked substitution pairs with their combined normalized frequency.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ErrorTable {
    pub entries: Vec<(String, f64)>,
}

impl ErrorTable {
    pub fn top(&self, k: usize) -> &[(String, f64)] {
        &self.entries[..k.min(self.entries.len())]
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("rank\tpair\tfrequency\n");
        for (i, (pair, f)) in self.entries.iter().enumerate() {
            out.push_str(&format!("{}\t{pair}\t{f:.6}\n", i + 1));
        }
        out
    }
}

/// Unordered pair key, the two tokens sorted and joined by `/`.
pub fn pair_key(a: &str, b: &str) -> String {
    if a <= b {
        format!("{a}/{b}")
    } else {
        format!("{b}/{a}")
    }
}

/// Substitution errors normalized within each family, summed over families
/// and normalized again, so large families do not dominate.
pub fn sound_exchange_errors(pairs: &[Prediction], model: &SoundClassModel) -> Result<ErrorTable, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::NoPairs);
    }
    let mut counts: BTreeMap<&str, BTreeMap<String, usize>> = BTreeMap::new();
    for p in pairs {
        if p.pred.is_empty() || p.gold.is_empty() {
            continue;
        }
        let family = counts.entry(p.family.as_str()).or_default();
        for (a, b) in aligned_items(&p.pred, &p.gold, model)? {
            if a != b && a != crate::phonology::GAP && b != crate::phonology::GAP {
                *family.entry(pair_key(&a, &b)).or_default() += 1;
            }
        }
    }
    let mut combined: BTreeMap<String, f64> = BTreeMap::new();
    for family in counts.values() {
        let total: usize = family.values().sum();
        for (pair, &c) in family {
            *combined.entry(pair.clone()).or_default() += c as f64 / total as f64;
        }
    }
    let norm: f64 = combined.values().sum();
    let mut entries: Vec<(String, f64)> = combined.into_iter().map(|(k, v)| (k, v / norm)).collect();
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(ErrorTable { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phonology::segment;

    fn w(s: &str) -> Vec<Phoneme> {
        segment(s).unwrap()
    }

    #[test]
    fn zero_shot_pair() {
        let pred = w("p e r s p i k y i t a");
        let gold = w("p e r s p i k u i t a");
        assert_eq!(edit_distance(&pred, &gold), 1);
        assert!((ned(&pred, &gold).unwrap() - 1.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn edit_distance_basics() {
        let e: Vec<Phoneme> = vec![];
        assert_eq!(edit_distance(&e, &w("a b")), 2);
        assert_eq!(edit_distance(&w("k a t"), &w("k a t")), 0);
        assert_eq!(edit_distance(&w("k a t"), &w("a t k")), 2);
        assert!(matches!(ned(&e, &e), Err(MetricsError::BothEmpty)));
        assert_eq!(ned(&w("a b"), &w("c d")).unwrap(), 1.0);
    }

    #[test]
    fn bcubed_basics() {
        let m = SoundClassModel::builtin();
        assert_eq!(bcubed_f1(&w("k a t"), &w("k a t"), &m).unwrap(), 1.0);
        assert!(bcubed_f1(&[], &w("a"), &m).is_err());
        let s = score_pair(&[], &w("a b c"), &m).unwrap();
        assert_eq!(s, Scores { ed: 3.0, ned: 1.0, bc: 0.0 });
    }

    #[test]
    fn error_table_single_family() {
        let m = SoundClassModel::builtin();
        let pairs = vec![
            Prediction { family: "f".into(), pred: w("p a t a"), gold: w("p u t u") },
            Prediction { family: "f".into(), pred: w("k u"), gold: w("k a") },
            Prediction { family: "f".into(), pred: w("m i"), gold: w("m e") },
        ];
        let t = sound_exchange_errors(&pairs, &m).unwrap();
        assert_eq!(t.entries, vec![("a/u".to_string(), 0.75), ("e/i".to_string(), 0.25)]);
        assert!(t.to_tsv().starts_with("rank\tpair\tfrequency\n1\ta/u\t0.750000\n"));
    }
}
