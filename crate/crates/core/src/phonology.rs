//! Phoneme segmentation and sound-class scoring.
//!
//! Word forms arrive as space-separated IPA segments. Alignment does not
//! compare segments directly: each segment is first mapped onto a coarse
//! sound class (labial plosives, sibilants, front rounded vowels, ...) and
//! the alignment score of two segments is the score of their classes.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

/// Symbol used for alignment gaps.
pub const GAP: &str = "-";
/// Separator joining phonemes inside a merged (trimmed) token.
pub const MERGE_SEPARATOR: char = '.';

const BUILTIN_CLASSES: &str = include_str!("../data/sound_classes.tsv");
const BUILTIN_SCORES: &str = include_str!("../data/class_scores.tsv");

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PhonologyError {
    #[error("EmptyForm: form contains no segments")]
    EmptyForm,
    #[error("BadToken: `{0}` is not a valid phoneme")]
    BadToken(String),
    #[error("MalformedTable: {0}")]
    MalformedTable(String),
}

/// One IPA segment, possibly several characters long (`t͡ʃ`, `uː`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Phoneme(String);

impl Phoneme {
    pub fn new(value: impl Into<String>) -> Result<Self, PhonologyError> {
        let value = value.into();
        if value.is_empty()
            || value == GAP
            || value.contains(MERGE_SEPARATOR)
            || value.chars().any(char::is_whitespace)
        {
            return Err(PhonologyError::BadToken(value));
        }
        Ok(Phoneme(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Phoneme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for Phoneme {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

/// Split a space-segmented IPA form into phonemes.
pub fn segment(form: &str) -> Result<Vec<Phoneme>, PhonologyError> {
    let phonemes = form
        .split_whitespace()
        .map(Phoneme::new)
        .collect::<Result<Vec<_>, _>>()?;
    if phonemes.is_empty() {
        return Err(PhonologyError::EmptyForm);
    }
    Ok(phonemes)
}

/// Join phonemes back into the canonical single-space form.
pub fn join(phonemes: &[Phoneme]) -> String {
    phonemes
        .iter()
        .map(Phoneme::as_str)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Index of a class symbol inside a [`SoundClassModel`].
pub type ClassId = usize;

/// Maps segments to sound classes and scores class pairs.
#[derive(Debug, Clone)]
pub struct SoundClassModel {
    symbols: Vec<String>,
    class_of: HashMap<String, ClassId>,
    scores: Vec<i32>,
    gap_penalty: i32,
    unknown: ClassId,
}

impl SoundClassModel {
    /// The shipped table: SCA-style classes, +5 same class, +2 for related
    /// classes, -10 across vowel/consonant (and tone/segment), -2 otherwise.
    pub fn builtin() -> Self {
        Self::from_tables(BUILTIN_CLASSES, BUILTIN_SCORES, -4, "0")
            .expect("built-in sound class tables are well formed")
    }

    /// Build a model from a `SEGMENT<TAB>CLASS` table and a square score
    /// matrix whose header row and first column list the class symbols.
    pub fn from_tables(
        classes_tsv: &str,
        scores_tsv: &str,
        gap_penalty: i32,
        unknown_class: &str,
    ) -> Result<Self, PhonologyError> {
        let bad = |msg: String| PhonologyError::MalformedTable(msg);

        let mut lines = scores_tsv.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty score matrix".into()))?;
        let symbols: Vec<String> = header
            .split('\t')
            .skip(1)
            .map(|s| s.trim().to_string())
            .collect();
        if symbols.is_empty() {
            return Err(bad("score matrix has no classes".into()));
        }
        let index: HashMap<&str, ClassId> = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        if index.len() != symbols.len() {
            return Err(bad("duplicate class symbol in score header".into()));
        }

        let k = symbols.len();
        let mut scores = vec![None; k * k];
        for line in lines {
            let mut cells = line.split('\t');
            let row = cells.next().unwrap_or_default().trim();
            let &i = index
                .get(row)
                .ok_or_else(|| bad(format!("score row for unknown class `{row}`")))?;
            let values: Vec<&str> = cells.collect();
            if values.len() != k {
                return Err(bad(format!("score row `{row}` has {} cells, expected {k}", values.len())));
            }
            for (j, v) in values.iter().enumerate() {
                let v: i32 = v
                    .trim()
                    .parse()
                    .map_err(|_| bad(format!("non-integer score `{v}` in row `{row}`")))?;
                scores[i * k + j] = Some(v);
            }
        }
        let scores: Vec<i32> = scores
            .into_iter()
            .enumerate()
            .map(|(n, v)| v.ok_or_else(|| bad(format!("missing score row for `{}`", symbols[n / k]))))
            .collect::<Result<_, _>>()?;
        for i in 0..k {
            for j in 0..i {
                if scores[i * k + j] != scores[j * k + i] {
                    return Err(bad(format!(
                        "score matrix is not symmetric at ({}, {})",
                        symbols[i], symbols[j]
                    )));
                }
            }
        }
        let min_self = (0..k).map(|i| scores[i * k + i]).min().unwrap_or(0);
        if gap_penalty >= min_self {
            return Err(bad(format!(
                "gap penalty {gap_penalty} must be below the smallest self-match score {min_self}"
            )));
        }
        let unknown = *index
            .get(unknown_class)
            .ok_or_else(|| bad(format!("unknown class `{unknown_class}` has no scores")))?;

        let mut class_of = HashMap::new();
        for (n, line) in classes_tsv.lines().enumerate() {
            if line.trim().is_empty() || (n == 0 && line.starts_with("SEGMENT")) {
                continue;
            }
            let (segment, class) = line
                .split_once('\t')
                .ok_or_else(|| bad(format!("class table line {} lacks a tab", n + 1)))?;
            let &id = index
                .get(class.trim())
                .ok_or_else(|| bad(format!("class `{class}` of `{segment}` has no scores")))?;
            class_of.insert(segment.to_string(), id);
        }

        Ok(SoundClassModel {
            symbols,
            class_of,
            scores,
            gap_penalty,
            unknown,
        })
    }

    pub fn gap_penalty(&self) -> i32 {
        self.gap_penalty
    }

    pub fn unknown_class(&self) -> &str {
        &self.symbols[self.unknown]
    }

    pub fn symbol(&self, id: ClassId) -> &str {
        &self.symbols[id]
    }

    pub fn num_classes(&self) -> usize {
        self.symbols.len()
    }

    /// Class of a phoneme: exact table lookup, then the segment with its
    /// modifiers stripped, then the first base character, then the first
    /// raw character (for bare tone segments such as `⁵⁵`).
    pub fn class_id(&self, phoneme: &Phoneme) -> ClassId {
        let raw = phoneme.as_str();
        if let Some(&id) = self.class_of.get(raw) {
            return id;
        }
        let stripped: String = raw.chars().filter(|&c| !is_modifier(c)).collect();
        if !stripped.is_empty() {
            if let Some(&id) = self.class_of.get(stripped.as_str()) {
                return id;
            }
            let first = stripped.chars().next().map(String::from).unwrap_or_default();
            if let Some(&id) = self.class_of.get(first.as_str()) {
                return id;
            }
        }
        let first = raw.chars().next().map(String::from).unwrap_or_default();
        self.class_of.get(first.as_str()).copied().unwrap_or(self.unknown)
    }

    pub fn classify(&self, phoneme: &Phoneme) -> &str {
        self.symbol(self.class_id(phoneme))
    }

    pub fn score(&self, a: ClassId, b: ClassId) -> i32 {
        self.scores[a * self.symbols.len() + b]
    }

    pub fn score_symbols(&self, a: &str, b: &str) -> Option<i32> {
        let ia = self.symbols.iter().position(|s| s == a)?;
        let ib = self.symbols.iter().position(|s| s == b)?;
        Some(self.score(ia, ib))
    }

    pub fn score_phonemes(&self, a: &Phoneme, b: &Phoneme) -> i32 {
        self.score(self.class_id(a), self.class_id(b))
    }
}

impl Default for SoundClassModel {
    fn default() -> Self {
        Self::builtin()
    }
}

/// Length marks, tone digits and letters, aspiration and other spacing
/// modifiers, and combining diacritics.
fn is_modifier(c: char) -> bool {
    matches!(c,
        '\u{0300}'..='\u{036F}'
        | '\u{1AB0}'..='\u{1AFF}'
        | '\u{1DC0}'..='\u{1DFF}'
        | '\u{20D0}'..='\u{20FF}'
        | '\u{02B0}'..='\u{02FF}'
        | '\u{1D2C}'..='\u{1D6A}'
        | '\u{A700}'..='\u{A71F}'
        | '⁰' | '¹' | '²' | '³' | '⁴'..='⁹' | 'ⁿ'
        | '0'..='9')
}
