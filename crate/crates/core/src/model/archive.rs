//! Model directories: `config.json`, `vocab.txt` and `weights.bin`.
//!
//! `weights.bin` is an 8-byte little-endian manifest length, a JSON manifest
//! listing every tensor's name, shape and byte offset into the data block,
//! then the data block of little-endian `f32` values in row-major order.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{init_params, ModelConfig, ModelError, Params};
use crate::encoding::{EncodingError, Vocabulary};

pub const CONFIG_FILE: &str = "config.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const WEIGHTS_FILE: &str = "weights.bin";

const DTYPE: &str = "f32-le";

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("Io: {0}")]
    Io(#[from] io::Error),
    #[error("MalformedArchive: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    dtype: String,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

pub fn save_archive(dir: &Path, params: &Params<f32>, vocab: &Vocabulary) -> Result<(), ArchiveError> {
    if params.config.vocab_size != vocab.len() {
        return Err(ArchiveError::Malformed(format!(
            "model expects {} tokens, vocabulary has {}",
            params.config.vocab_size,
            vocab.len()
        )));
    }
    fs::create_dir_all(dir)?;
    let config = serde_json::to_string_pretty(&params.config).map_err(|e| ArchiveError::Malformed(e.to_string()))?;
    fs::write(dir.join(CONFIG_FILE), config + "\n")?;
    vocab.save(&dir.join(VOCAB_FILE))?;

    let mut entries = Vec::new();
    let mut data = Vec::new();
    for t in params.tensors() {
        entries.push(Entry {
            name: t.name,
            shape: t.shape,
            offset: data.len(),
        });
        for x in t.data {
            data.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = serde_json::to_vec(&Manifest {
        dtype: DTYPE.to_string(),
        tensors: entries,
    })
    .map_err(|e| ArchiveError::Malformed(e.to_string()))?;
    let mut blob = Vec::with_capacity(8 + manifest.len() + data.len());
    blob.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    blob.extend_from_slice(&manifest);
    blob.extend_from_slice(&data);
    fs::write(dir.join(WEIGHTS_FILE), blob)?;
    Ok(())
}

pub fn load_archive(dir: &Path) -> Result<(Params<f32>, Vocabulary), ArchiveError> {
    let bad = |m: String| ArchiveError::Malformed(m);
    let config: ModelConfig = serde_json::from_str(&fs::read_to_string(dir.join(CONFIG_FILE))?)
        .map_err(|e| bad(format!("{CONFIG_FILE}: {e}")))?;
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
    if vocab.len() != config.vocab_size {
        return Err(bad(format!(
            "config declares {} tokens, {VOCAB_FILE} has {}",
            config.vocab_size,
            vocab.len()
        )));
    }

    let blob = fs::read(dir.join(WEIGHTS_FILE))?;
    let header: [u8; 8] = blob
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| bad("weights file is truncated".into()))?;
    let len = u64::from_le_bytes(header) as usize;
    let manifest_bytes = blob
        .get(8..8 + len)
        .ok_or_else(|| bad("weights manifest is truncated".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(manifest_bytes).map_err(|e| bad(format!("weights manifest: {e}")))?;
    if manifest.dtype != DTYPE {
        return Err(bad(format!("unsupported dtype `{}`", manifest.dtype)));
    }
    let data = &blob[8 + len..];

    let mut params = init_params::<f32>(&config, 0)?;
    let expected: Vec<(String, Vec<usize>)> = params
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.shape))
        .collect();
    if expected.len() != manifest.tensors.len() {
        return Err(bad(format!(
            "expected {} tensors, manifest lists {}",
            expected.len(),
            manifest.tensors.len()
        )));
    }
    for ((name, shape), (target, entry)) in expected
        .iter()
        .zip(params.tensors_mut().into_iter().zip(&manifest.tensors))
    {
        if *name != entry.name || *shape != entry.shape {
            return Err(bad(format!(
                "tensor `{}` {:?} does not match expected `{name}` {shape:?}",
                entry.name, entry.shape
            )));
        }
        let bytes = data
            .get(entry.offset..entry.offset + 4 * target.data.len())
            .ok_or_else(|| bad(format!("tensor `{name}` runs past the end of the data")))?;
        for (x, chunk) in target.data.iter_mut().zip(bytes.chunks_exact(4)) {
            *x = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        }
    }
    if !params.is_finite() {
        return Err(bad("weights contain non-finite values".into()));
    }
    Ok((params, vocab))
}
