//! Training-time alignment trimming.
//!
//! A site where every language but one has a gap is removed and its lone
//! phoneme is merged into the same row's token at the next site (`j` + `ɛ`
//! becomes `j.ɛ`). A lone phoneme in the last site is appended to the
//! penultimate site instead (`ʊ` + `m` becomes `ʊ.m`). Test-time alignments
//! are never trimmed.

use std::fmt;

use thiserror::Error;

use crate::alignment::Msa;
use crate::phonology::{Phoneme, GAP, MERGE_SEPARATOR};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TrimError {
    #[error("TooFewRows: trimming needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("EmptyToken: `{0}` contains an empty segment")]
    EmptyToken(String),
}

/// One or more phonemes occupying a single site.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MergedToken(Vec<Phoneme>);

impl MergedToken {
    pub fn single(p: Phoneme) -> Self {
        MergedToken(vec![p])
    }

    pub fn phonemes(&self) -> &[Phoneme] {
        &self.0
    }

    pub fn is_merged(&self) -> bool {
        self.0.len() > 1
    }
}

impl fmt::Display for MergedToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, p) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, "{MERGE_SEPARATOR}")?;
            }
            f.write_str(p.as_str())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrimmedRow {
    pub language: String,
    pub sites: Vec<Option<MergedToken>>,
}

impl TrimmedRow {
    /// Phonemes in order with merges split and gaps removed.
    pub fn phonemes(&self) -> Vec<Phoneme> {
        self.sites
            .iter()
            .flatten()
            .flat_map(|t| t.phonemes().iter().cloned())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrimmedMsa {
    rows: Vec<TrimmedRow>,
}

impl TrimmedMsa {
    pub fn rows(&self) -> &[TrimmedRow] {
        &self.rows
    }

    pub fn width(&self) -> usize {
        self.rows.first().map_or(0, |r| r.sites.len())
    }

    pub fn row(&self, language: &str) -> Option<&TrimmedRow> {
        self.rows.iter().find(|r| r.language == language)
    }

    pub fn token_rows(&self) -> Vec<(String, Vec<String>)> {
        self.rows
            .iter()
            .map(|r| {
                let toks = r
                    .sites
                    .iter()
                    .map(|s| s.as_ref().map_or_else(|| GAP.to_string(), |t| t.to_string()))
                    .collect();
                (r.language.clone(), toks)
            })
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (lang, toks) in self.token_rows() {
            out.push_str(&lang);
            for t in toks {
                out.push('\t');
                out.push_str(&t);
            }
            out.push('\n');
        }
        out
    }
}

fn non_gap_rows(rows: &[Vec<Option<Vec<Phoneme>>>], c: usize) -> impl Iterator<Item = usize> + '_ {
    rows.iter()
        .enumerate()
        .filter(move |(_, r)| r[c].is_some())
        .map(|(i, _)| i)
}

/// Merge lone-phoneme sites into their neighbours until none remain.
pub fn trim(msa: &Msa) -> Result<TrimmedMsa, TrimError> {
    if msa.rows().len() < 2 {
        return Err(TrimError::TooFewRows(msa.rows().len()));
    }
    let mut rows: Vec<Vec<Option<Vec<Phoneme>>>> = msa
        .rows()
        .iter()
        .map(|r| r.sites.iter().map(|s| s.clone().map(|p| vec![p])).collect())
        .collect();

    'scan: loop {
        let width = rows[0].len();
        if width < 2 {
            break;
        }
        for c in 0..width {
            let owners: Vec<usize> = non_gap_rows(&rows, c).take(2).collect();
            let [r] = owners[..] else {
                continue;
            };
            let lone = rows[r][c].take().expect("owner has a token");
            if c + 1 < width {
                let next = &mut rows[r][c + 1];
                *next = Some(match next.take() {
                    Some(tail) => lone.into_iter().chain(tail).collect(),
                    None => lone,
                });
            } else {
                let prev = &mut rows[r][c - 1];
                *prev = Some(match prev.take() {
                    Some(head) => head.into_iter().chain(lone).collect(),
                    None => lone,
                });
            }
            for row in &mut rows {
                row.remove(c);
            }
            continue 'scan;
        }
        break;
    }

    let rows = msa
        .rows()
        .iter()
        .zip(rows)
        .map(|(orig, sites)| TrimmedRow {
            language: orig.language.clone(),
            sites: sites.into_iter().map(|s| s.map(MergedToken)).collect(),
        })
        .collect();
    Ok(TrimmedMsa { rows })
}

/// Split a (possibly merged) site token on the separator.
pub fn split_merged(token: &str) -> Result<Vec<Phoneme>, TrimError> {
    if token.is_empty() || token == GAP {
        return Err(TrimError::EmptyToken(token.to_string()));
    }
    token
        .split(MERGE_SEPARATOR)
        .map(|part| Phoneme::new(part).map_err(|_| TrimError::EmptyToken(token.to_string())))
        .collect()
}
