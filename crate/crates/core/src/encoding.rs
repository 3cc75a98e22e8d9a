//! Token vocabulary and the padded 2D id grids fed to the model.
//!
//! Every row of a grid is laid out as
//! `[CLS] [<language>] site tokens... [SEP] [PAD]*`. The row being predicted
//! has all of its site tokens replaced by `[MASK]`; only its language token
//! stays visible.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use crate::phonology::{Phoneme, GAP};
use crate::trimming::split_merged;

pub type TokenId = u32;

/// Aligned rows as `(language, site tokens)`; gaps are `-`, merged tokens
/// use `.` separators.
pub type TokenRows = Vec<(String, Vec<String>)>;

pub const PAD: &str = "[PAD]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const UNK: &str = "[UNK]";

const SPECIALS: [&str; 6] = [PAD, CLS, SEP, MASK, UNK, GAP];

#[derive(Debug, Error)]
pub enum EncodingError {
    #[error("EmptyCorpus: no alignments to build a vocabulary from")]
    EmptyCorpus,
    #[error("UnknownLanguageToken: no vocabulary token for language `{0}`")]
    UnknownLanguageToken(String),
    #[error("TargetMissing: language `{0}` is not a row of the alignment")]
    TargetMissing(String),
    #[error("TokenCollision: site token `{0}` looks like a special or language token")]
    TokenCollision(String),
    #[error("MalformedVocabulary: {0}")]
    MalformedVocabulary(String),
    #[error("EmptyAlignment: cannot encode an alignment without sites")]
    EmptyAlignment,
    #[error("Io: {0}")]
    Io(#[from] std::io::Error),
}

pub fn language_token(name: &str) -> String {
    format!("[{name}]")
}

fn is_bracketed(tok: &str) -> bool {
    tok.len() > 2 && tok.starts_with('[') && tok.ends_with(']')
}

/// Bijection between tokens and ids. Ids 0..6 are `[PAD]`, `[CLS]`, `[SEP]`,
/// `[MASK]`, `[UNK]` and the gap token `-`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub const PAD_ID: TokenId = 0;
    pub const CLS_ID: TokenId = 1;
    pub const SEP_ID: TokenId = 2;
    pub const MASK_ID: TokenId = 3;
    pub const UNK_ID: TokenId = 4;
    pub const GAP_ID: TokenId = 5;
    pub const NUM_SPECIALS: usize = SPECIALS.len();

    fn from_tokens(tokens: Vec<String>) -> Result<Self, EncodingError> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(EncodingError::MalformedVocabulary(format!(
                    "line {} must be `{s}`",
                    i + 1
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(['\n', '\t']) {
                return Err(EncodingError::MalformedVocabulary(format!("bad token on line {}", i + 1)));
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(EncodingError::MalformedVocabulary(format!("duplicate token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Specials, then one `[<name>]` token per language in the given order,
    /// then site tokens in first-seen order.
    pub fn build(corpus: &[TokenRows], languages: &[String]) -> Result<Self, EncodingError> {
        if corpus.is_empty() {
            return Err(EncodingError::EmptyCorpus);
        }
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        for lang in languages {
            let t = language_token(lang);
            if seen.insert(t.clone()) {
                tokens.push(t);
            }
        }
        for rows in corpus {
            for (_, sites) in rows {
                for tok in sites {
                    if seen.contains(tok) {
                        continue;
                    }
                    if is_bracketed(tok) {
                        return Err(EncodingError::TokenCollision(tok.clone()));
                    }
                    seen.insert(tok.clone());
                    tokens.push(tok.clone());
                }
            }
        }
        Vocabulary::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> TokenId {
        self.id(token).unwrap_or(Self::UNK_ID)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn language_id(&self, language: &str) -> Option<TokenId> {
        self.id(&language_token(language))
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        (id as usize) < Self::NUM_SPECIALS
    }

    /// Language name if `id` is a language token.
    pub fn language_of(&self, id: TokenId) -> Option<&str> {
        if self.is_special(id) {
            return None;
        }
        let t = self.token(id)?;
        is_bracketed(t).then(|| &t[1..t.len() - 1])
    }

    pub fn languages(&self) -> Vec<&str> {
        (0..self.len() as TokenId).filter_map(|i| self.language_of(i)).collect()
    }

    /// One token per line; the line number (from 0) is the id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, EncodingError> {
        let body = text.strip_suffix('\n').unwrap_or(text);
        Vocabulary::from_tokens(body.split('\n').map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), EncodingError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EncodingError> {
        Vocabulary::from_text(&fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// the target row is part of the alignment and supplies the labels
    Train,
    /// the target is absent; an all-`[MASK]` row is appended
    Infer,
}

/// Padded id grid for one instance. `labels[c]` is `None` (ignored) or the
/// gold token id for the masked row at column `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub ids: Array2<TokenId>,
    pub pad_mask: Array2<bool>,
    pub labels: Vec<Option<TokenId>>,
    pub target_row: usize,
}

impl TokenGrid {
    pub fn rows(&self) -> usize {
        self.ids.nrows()
    }

    pub fn width(&self) -> usize {
        self.ids.ncols()
    }

    pub fn supervised(&self) -> usize {
        self.labels.iter().flatten().count()
    }

    /// Same grid with `[PAD]` rows and columns appended.
    pub fn padded(&self, rows: usize, width: usize) -> TokenGrid {
        let (rows, width) = (rows.max(self.rows()), width.max(self.width()));
        let mut ids = Array2::from_elem((rows, width), Vocabulary::PAD_ID);
        ids.slice_mut(ndarray::s![..self.rows(), ..self.width()])
            .assign(&self.ids);
        let mut labels = self.labels.clone();
        labels.resize(width, None);
        TokenGrid {
            pad_mask: ids.mapv(|i| i == Vocabulary::PAD_ID),
            ids,
            labels,
            target_row: self.target_row,
        }
    }

    /// Columns holding site tokens (between the language token and `[SEP]`)
    /// of the target row.
    pub fn site_columns(&self) -> std::ops::Range<usize> {
        let row = self.ids.row(self.target_row);
        let sep = row
            .iter()
            .position(|&i| i == Vocabulary::SEP_ID)
            .unwrap_or(self.width());
        2.min(sep)..sep
    }
}

/// Lay out aligned rows as a grid with the `unknown_language` row masked.
pub fn encode(
    rows: &[(String, Vec<String>)],
    unknown_language: &str,
    vocab: &Vocabulary,
    mode: Mode,
) -> Result<TokenGrid, EncodingError> {
    let sites = rows.first().map_or(0, |r| r.1.len());
    if sites == 0 || rows.iter().any(|r| r.1.len() != sites) {
        return Err(EncodingError::EmptyAlignment);
    }
    let target_lang = vocab
        .language_id(unknown_language)
        .ok_or_else(|| EncodingError::UnknownLanguageToken(unknown_language.to_string()))?;

    let position = rows.iter().position(|(l, _)| l == unknown_language);
    let (target_row, num_rows) = match (mode, position) {
        (Mode::Train, None) => return Err(EncodingError::TargetMissing(unknown_language.into())),
        (_, Some(p)) => (p, rows.len()),
        (Mode::Infer, None) => (rows.len(), rows.len() + 1),
    };

    let width = sites + 3;
    let mut ids = Array2::from_elem((num_rows, width), Vocabulary::PAD_ID);
    for r in 0..num_rows {
        ids[[r, 0]] = Vocabulary::CLS_ID;
        ids[[r, width - 1]] = Vocabulary::SEP_ID;
        if r == target_row {
            ids[[r, 1]] = target_lang;
            for c in 0..sites {
                ids[[r, c + 2]] = Vocabulary::MASK_ID;
            }
        } else {
            let (lang, toks) = &rows[r];
            // context languages unseen in training fall back to [UNK]
            ids[[r, 1]] = vocab.language_id(lang).unwrap_or(Vocabulary::UNK_ID);
            for (c, tok) in toks.iter().enumerate() {
                ids[[r, c + 2]] = vocab.id_or_unk(tok);
            }
        }
    }

    let mut labels = vec![None; width];
    if mode == Mode::Train {
        let gold = &rows[target_row].1;
        for (c, tok) in gold.iter().enumerate() {
            labels[c + 2] = Some(vocab.id_or_unk(tok));
        }
        labels[width - 1] = Some(Vocabulary::SEP_ID);
    }

    Ok(TokenGrid {
        pad_mask: ids.mapv(|i| i == Vocabulary::PAD_ID),
        ids,
        labels,
        target_row,
    })
}

/// A predicted or gold word with all alignment artefacts removed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedWord {
    pub language: Option<String>,
    pub phonemes: Vec<Phoneme>,
}

impl DecodedWord {
    pub fn form(&self) -> String {
        crate::phonology::join(&self.phonemes)
    }
}

/// Drop specials, language tokens and gaps; split merged tokens; keep order.
/// The first language token seen names the word's language.
pub fn decode(ids: &[TokenId], vocab: &Vocabulary) -> DecodedWord {
    let mut language = None;
    let mut phonemes = Vec::new();
    for &id in ids {
        if vocab.is_special(id) {
            continue;
        }
        if let Some(lang) = vocab.language_of(id) {
            language.get_or_insert_with(|| lang.to_string());
            continue;
        }
        if let Some(tok) = vocab.token(id) {
            if let Ok(parts) = split_merged(tok) {
                phonemes.extend(parts);
            }
        }
    }
    DecodedWord { language, phonemes }
}
