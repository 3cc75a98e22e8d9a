//! Cognate wordlists in tab-separated form.
//!
//! ```text
//! COGID<TAB>French<TAB>Italian<TAB>Latin
//! 12<TAB>ʒ ə n j ɛ v ʁ<TAB>d͡ʒ i n e p r o<TAB>?
//! ```
//!
//! One cognate set per row, one language per column, cells are
//! space-separated IPA segments. An empty cell means the language has no
//! word in that set; a cell holding exactly `?` marks the word to predict.
//! A file holds one family, named after the file stem.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phonology::{join, segment, Phoneme, PhonologyError};

pub const ID_COLUMN: &str = "COGID";
pub const TARGET_MARK: &str = "?";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("MalformedHeader: {0}")]
    MalformedHeader(String),
    #[error("RowWidthMismatch: line {line} has {found} cells, header has {expected}")]
    RowWidthMismatch { line: usize, found: usize, expected: usize },
    #[error("EmptyDataset: {0} holds no cognate sets")]
    EmptyDataset(String),
    #[error("BadCell: line {line}, column `{language}`: {source}")]
    BadCell {
        line: usize,
        language: String,
        source: PhonologyError,
    },
    #[error("MultipleTargets: line {0} marks more than one cell with `?`")]
    MultipleTargets(usize),
    #[error("UnknownLanguage: `{0}` is not a column of the dataset")]
    UnknownLanguage(String),
    #[error("ProportionOutOfRange: {0} is not strictly between 0 and 1")]
    ProportionOutOfRange(f64),
    #[error("TooFewCognateSets: cannot make {folds} folds from {sets} cognate sets")]
    TooFewCognateSets { folds: usize, sets: usize },
    #[error("Io: {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CognateSet {
    pub id: String,
    pub family: String,
    /// attested words in the dataset's column order
    pub words: Vec<(String, Vec<Phoneme>)>,
    /// language whose cell is `?`
    pub target: Option<String>,
    pub proto_language: Option<String>,
}

impl CognateSet {
    pub fn word(&self, language: &str) -> Option<&[Phoneme]> {
        self.words
            .iter()
            .find(|(l, _)| l == language)
            .map(|(_, w)| w.as_slice())
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(|(l, _)| l.as_str())
    }

    /// Attested words other than the proto-language's.
    pub fn daughter_words(&self) -> Vec<(String, Vec<Phoneme>)> {
        self.words
            .iter()
            .filter(|(l, _)| Some(l) != self.proto_language.as_ref())
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub family: String,
    pub languages: Vec<String>,
    pub proto_language: Option<String>,
    pub sets: Vec<CognateSet>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub languages: usize,
    pub words: usize,
    pub cognate_sets: usize,
}

impl std::ops::Add for Summary {
    type Output = Summary;

    fn add(self, o: Summary) -> Summary {
        Summary {
            languages: self.languages + o.languages,
            words: self.words + o.words,
            cognate_sets: self.cognate_sets + o.cognate_sets,
        }
    }
}

/// Header cells starting with `Proto` name the proto-language.
pub fn detect_proto(languages: &[String]) -> Option<String> {
    languages
        .iter()
        .find(|l| l.to_lowercase().starts_with("proto"))
        .cloned()
}

impl Dataset {
    pub fn parse(text: &str, family: &str) -> Result<Dataset, DataError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| DataError::EmptyDataset(family.to_string()))?;
        let cells: Vec<&str> = header.split('\t').collect();
        if cells.first().map(|c| c.trim()) != Some(ID_COLUMN) {
            return Err(DataError::MalformedHeader(format!("first column must be `{ID_COLUMN}`")));
        }
        let languages: Vec<String> = cells[1..].iter().map(|c| c.trim().to_string()).collect();
        if languages.is_empty() {
            return Err(DataError::MalformedHeader("no language columns".into()));
        }
        if let Some(bad) = languages.iter().find(|l| l.is_empty()) {
            return Err(DataError::MalformedHeader(format!("empty language name `{bad}`")));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = languages.iter().find(|l| !seen.insert(l.as_str())) {
            return Err(DataError::MalformedHeader(format!("language `{dup}` appears twice")));
        }
        let proto_language = detect_proto(&languages);

        let mut sets = Vec::new();
        for (n, line) in lines {
            let line_no = n + 1;
            let cells: Vec<&str> = line.split('\t').collect();
            if cells.len() != languages.len() + 1 {
                return Err(DataError::RowWidthMismatch {
                    line: line_no,
                    found: cells.len(),
                    expected: languages.len() + 1,
                });
            }
            let mut words = Vec::new();
            let mut target = None;
            for (lang, cell) in languages.iter().zip(&cells[1..]) {
                let cell = cell.trim();
                if cell.is_empty() {
                    continue;
                }
                if cell == TARGET_MARK {
                    if target.replace(lang.clone()).is_some() {
                        return Err(DataError::MultipleTargets(line_no));
                    }
                    continue;
                }
                let word = segment(cell).map_err(|source| DataError::BadCell {
                    line: line_no,
                    language: lang.clone(),
                    source,
                })?;
                words.push((lang.clone(), word));
            }
            sets.push(CognateSet {
                id: cells[0].trim().to_string(),
                family: family.to_string(),
                words,
                target,
                proto_language: proto_language.clone(),
            });
        }
        if sets.is_empty() {
            return Err(DataError::EmptyDataset(family.to_string()));
        }
        Ok(Dataset {
            family: family.to_string(),
            languages,
            proto_language,
            sets,
        })
    }

    /// Declare which column holds the proto-language.
    pub fn set_proto(&mut self, language: &str) -> Result<(), DataError> {
        if !self.languages.iter().any(|l| l == language) {
            return Err(DataError::UnknownLanguage(language.to_string()));
        }
        self.proto_language = Some(language.to_string());
        for s in &mut self.sets {
            s.proto_language = Some(language.to_string());
        }
        Ok(())
    }

    /// Long-format wordlist, one word per row, as distributed by many
    /// comparative databases. The header must name `DOCULECT` and `COGID`
    /// columns and one of `TOKENS`, `SEGMENTS` or `IPA`. Rows sharing a
    /// COGID form one cognate set; the first word of a language wins.
    /// Lines starting with `#` are skipped.
    pub fn from_wordlist(text: &str, family: &str) -> Result<Dataset, DataError> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
        let (_, header) = lines
            .next()
            .ok_or_else(|| DataError::EmptyDataset(family.to_string()))?;
        let cells: Vec<String> = header.split('\t').map(|c| c.trim().to_uppercase()).collect();
        let find = |names: &[&str]| names.iter().find_map(|n| cells.iter().position(|c| c == n));
        let (Some(lang_col), Some(id_col), Some(form_col)) = (
            find(&["DOCULECT", "LANGUAGE"]),
            find(&[ID_COLUMN]),
            find(&["TOKENS", "SEGMENTS", "IPA"]),
        ) else {
            return Err(DataError::MalformedHeader(
                "wordlist needs DOCULECT, COGID and TOKENS columns".into(),
            ));
        };

        let mut languages: Vec<String> = Vec::new();
        let mut sets: Vec<CognateSet> = Vec::new();
        let mut index: std::collections::HashMap<String, usize> = std::collections::HashMap::new();
        for (n, line) in lines {
            let row: Vec<&str> = line.split('\t').collect();
            if row.len() != cells.len() {
                return Err(DataError::RowWidthMismatch {
                    line: n + 1,
                    found: row.len(),
                    expected: cells.len(),
                });
            }
            let (lang, id, form) = (row[lang_col].trim(), row[id_col].trim(), row[form_col].trim());
            if lang.is_empty() || id.is_empty() || form.is_empty() {
                continue;
            }
            let word = segment(form).map_err(|source| DataError::BadCell {
                line: n + 1,
                language: lang.to_string(),
                source,
            })?;
            if !languages.iter().any(|l| l == lang) {
                languages.push(lang.to_string());
            }
            let slot = *index.entry(id.to_string()).or_insert_with(|| {
                sets.push(CognateSet {
                    id: id.to_string(),
                    family: family.to_string(),
                    words: Vec::new(),
                    target: None,
                    proto_language: None,
                });
                sets.len() - 1
            });
            if sets[slot].word(lang).is_none() {
                sets[slot].words.push((lang.to_string(), word));
            }
        }
        if sets.is_empty() {
            return Err(DataError::EmptyDataset(family.to_string()));
        }
        let proto_language = detect_proto(&languages);
        for s in &mut sets {
            s.proto_language.clone_from(&proto_language);
        }
        Ok(Dataset {
            family: family.to_string(),
            languages,
            proto_language,
            sets,
        })
    }

    /// Rename a language column everywhere it occurs.
    pub fn rename_language(&mut self, from: &str, to: &str) -> Result<(), DataError> {
        let Some(slot) = self.languages.iter().position(|l| l == from) else {
            return Err(DataError::UnknownLanguage(from.to_string()));
        };
        if from != to && self.languages.iter().any(|l| l == to) {
            return Err(DataError::MalformedHeader(format!("language `{to}` already exists")));
        }
        self.languages[slot] = to.to_string();
        let rename = |l: &mut String| {
            if l == from {
                *l = to.to_string();
            }
        };
        if let Some(p) = &mut self.proto_language {
            rename(p);
        }
        for s in &mut self.sets {
            s.words.iter_mut().for_each(|(l, _)| rename(l));
            s.target.iter_mut().for_each(rename);
            s.proto_language.iter_mut().for_each(rename);
        }
        if self.proto_language.is_none() {
            self.proto_language = detect_proto(&self.languages);
            for s in &mut self.sets {
                s.proto_language.clone_from(&self.proto_language);
            }
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(ID_COLUMN);
        for l in &self.languages {
            out.push('\t');
            out.push_str(l);
        }
        out.push('\n');
        for s in &self.sets {
            out.push_str(&s.id);
            for l in &self.languages {
                out.push('\t');
                if let Some(w) = s.word(l) {
                    out.push_str(&join(w));
                } else if s.target.as_deref() == Some(l) {
                    out.push_str(TARGET_MARK);
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn summarize(&self) -> Summary {
        Summary {
            languages: self.languages.len(),
            words: self.sets.iter().map(|s| s.words.len()).sum(),
            cognate_sets: self.sets.len(),
        }
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            family: self.family.clone(),
            languages: self.languages.clone(),
            proto_language: self.proto_language.clone(),
            sets: idx.iter().map(|&i| self.sets[i].clone()).collect(),
        }
    }

    /// Seeded split at cognate-set granularity; the test part receives
    /// `round(proportion * n)` sets. Both parts keep file order.
    pub fn split(&self, test_proportion: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
        if !(test_proportion > 0.0 && test_proportion < 1.0) {
            return Err(DataError::ProportionOutOfRange(test_proportion));
        }
        let n = self.sets.len();
        let n_test = (test_proportion * n as f64).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut test: Vec<usize> = order[..n_test].to_vec();
        let mut train: Vec<usize> = order[n_test..].to_vec();
        test.sort_unstable();
        train.sort_unstable();
        Ok((self.subset(&train), self.subset(&test)))
    }

    /// Seeded partition into `k` folds of near-equal size.
    pub fn folds(&self, k: usize, seed: u64) -> Result<Vec<Dataset>, DataError> {
        let n = self.sets.len();
        if k < 2 || n < k {
            return Err(DataError::TooFewCognateSets { folds: k, sets: n });
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok((0..k)
            .map(|f| {
                let mut idx: Vec<usize> = order.iter().copied().skip(f).step_by(k).collect();
                idx.sort_unstable();
                self.subset(&idx)
            })
            .collect())
    }

    /// Concatenate parts of one dataset, for example the training folds.
    pub fn merge(parts: &[&Dataset]) -> Option<Dataset> {
        let first = parts.first()?;
        let mut out = Dataset {
            family: first.family.clone(),
            languages: first.languages.clone(),
            proto_language: first.proto_language.clone(),
            sets: Vec::new(),
        };
        for p in parts {
            out.sets.extend(p.sets.iter().cloned());
        }
        Some(out)
    }
}

fn family_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "unknown".into())
}

pub fn load_tsv(path: &Path) -> Result<Dataset, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Dataset::parse(&text, &family_of(path))
}

pub fn save_tsv(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, dataset.to_tsv()).map_err(io_err(path))
}

/// Every `*.tsv` file of a directory, sorted by file name; a plain file
/// path loads just that file.
pub fn load_corpus(path: &Path) -> Result<Vec<Dataset>, DataError> {
    if path.is_file() {
        return Ok(vec![load_tsv(path)?]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(io_err(path))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "tsv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(DataError::EmptyDataset(path.display().to_string()));
    }
    files.iter().map(|f| load_tsv(f)).collect()
}

pub fn summarize_corpus(corpus: &[Dataset]) -> Summary {
    corpus
        .iter()
        .map(Dataset::summarize)
        .fold(Summary::default(), |a, b| a + b)
}
