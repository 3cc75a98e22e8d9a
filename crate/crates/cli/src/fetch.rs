//! Download the public corpora and convert them to the wordlist TSV layout.
//!
//! A manifest lists gzipped tarballs and, for each, which archive members
//! become which output files. A member pattern is matched segment by
//! segment after dropping the archive's top-level directory; the text
//! matched by `*` names the family.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use cogtran::dataio::{detect_proto, save_tsv, Dataset};
use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, CliError, Result};

pub const DEFAULT_MANIFEST: &str = include_str!("../../../data/fetch_manifest.json");
pub const LOCK_FILE: &str = "manifest.lock.json";
const MAX_DOWNLOAD: u64 = 512 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    /// one row per cognate set, `COGID` then one column per language
    Wide,
    /// one row per word with DOCULECT, COGID and TOKENS columns
    Wordlist,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Member {
    pub pattern: String,
    pub format: Format,
    pub dest: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Source {
    pub name: String,
    pub url: String,
    pub sha256: Option<String>,
    pub members: Vec<Member>,
    /// family (lower case) to the language column holding its proto-forms
    #[serde(default)]
    pub proto_languages: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub sources: Vec<Source>,
}

impl Manifest {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|source| CliError::Json {
            path: origin.to_path_buf(),
            source,
        })
    }
}

#[derive(Debug, Serialize)]
struct Locked {
    name: String,
    url: String,
    sha256: String,
    files: Vec<String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn download(url: &str) -> Result<Vec<u8>> {
    let mut response = ureq::get(url)
        .call()
        .map_err(|e| CliError::Fetch(format!("{url}: {e}")))?;
    response
        .body_mut()
        .with_config()
        .limit(MAX_DOWNLOAD)
        .read_to_vec()
        .map_err(|e| CliError::Fetch(format!("{url}: {e}")))
}

/// Match `path` against `pattern`; on success return the text matched by
/// the first `*`, without a trailing `.tsv`.
pub fn match_member(pattern: &str, path: &str) -> Option<String> {
    let pat: Vec<&str> = pattern.split('/').collect();
    let segs: Vec<&str> = path.split('/').filter(|s| !s.is_empty()).collect();
    if pat.len() != segs.len() {
        return None;
    }
    let mut family = None;
    for (p, s) in pat.iter().zip(&segs) {
        match p.split_once('*') {
            None if p == s => {}
            None => return None,
            Some((pre, post)) => {
                if s.len() < pre.len() + post.len() || !s.starts_with(pre) || !s.ends_with(post) {
                    return None;
                }
                let hit = &s[pre.len()..s.len() - post.len()];
                if hit.is_empty() {
                    return None;
                }
                family.get_or_insert_with(|| hit.trim_end_matches(".tsv").to_string());
            }
        }
    }
    Some(family.unwrap_or_else(|| segs.last().unwrap_or(&"data").trim_end_matches(".tsv").to_string()))
}

fn convert(text: &str, family: &str, format: Format, source: &Source) -> Result<Dataset> {
    let mut d = match format {
        Format::Wide => Dataset::parse(text, family)?,
        Format::Wordlist => Dataset::from_wordlist(text, family)?,
    };
    if let Some(proto) = source.proto_languages.get(&family.to_lowercase()) {
        if detect_proto(std::slice::from_ref(proto)).is_none() {
            d.rename_language(proto, &format!("Proto-{proto}"))?;
        } else {
            d.set_proto(proto)?;
        }
    }
    Ok(d)
}

/// Convert the members of one gzipped tarball into `out`. Returns the
/// written paths relative to `out`.
pub fn unpack(archive: &[u8], source: &Source, out: &Path) -> Result<Vec<String>> {
    let mut tar = tar::Archive::new(GzDecoder::new(archive));
    let mut written = Vec::new();
    let entries = tar
        .entries()
        .map_err(|e| CliError::Fetch(format!("{}: {e}", source.name)))?;
    for entry in entries {
        let mut entry = entry.map_err(|e| CliError::Fetch(format!("{}: {e}", source.name)))?;
        if !entry.header().entry_type().is_file() {
            continue;
        }
        let full = entry
            .path()
            .map_err(|e| CliError::Fetch(format!("{}: {e}", source.name)))?
            .to_string_lossy()
            .into_owned();
        let inner = full.split_once('/').map_or(full.as_str(), |(_, rest)| rest).to_string();
        let Some((member, family)) = source
            .members
            .iter()
            .find_map(|m| match_member(&m.pattern, &inner).map(|f| (m, f)))
        else {
            continue;
        };
        let mut text = String::new();
        entry
            .read_to_string(&mut text)
            .map_err(|e| CliError::Fetch(format!("{full}: {e}")))?;
        let dataset = convert(&text, &family, member.format, source)?;
        let rel = format!("{}/{family}.tsv", member.dest.trim_end_matches('/'));
        save_tsv(&dataset, &out.join(&rel))?;
        log::info!("{full} -> {rel}: {} cognate sets", dataset.sets.len());
        written.push(rel);
    }
    if written.is_empty() {
        return Err(CliError::Fetch(format!("{}: no archive member matched the manifest", source.name)));
    }
    written.sort();
    Ok(written)
}

/// Fetch every source, from the network or from a local tarball given in
/// `local`, verify pinned hashes and write the converted corpora.
pub fn fetch(manifest: &Manifest, out: &Path, local: &BTreeMap<String, PathBuf>) -> Result<Vec<String>> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut locked = Vec::new();
    let mut all = Vec::new();
    for source in &manifest.sources {
        let bytes = match local.get(&source.name) {
            Some(path) => fs::read(path).map_err(io_err(path))?,
            None => {
                log::info!("downloading {}", source.url);
                download(&source.url)?
            }
        };
        let actual = sha256_hex(&bytes);
        match &source.sha256 {
            Some(expected) if !expected.eq_ignore_ascii_case(&actual) => {
                return Err(CliError::Checksum {
                    name: source.name.clone(),
                    expected: expected.clone(),
                    actual,
                })
            }
            Some(_) => {}
            None => log::warn!("{}: no pinned hash; got sha256 {actual}", source.name),
        }
        let files = unpack(&bytes, source, out)?;
        all.extend(files.iter().cloned());
        locked.push(Locked {
            name: source.name.clone(),
            url: source.url.clone(),
            sha256: actual,
            files,
        });
    }
    let lock = out.join(LOCK_FILE);
    let json = serde_json::to_string_pretty(&locked).expect("lock serializes") + "\n";
    fs::write(&lock, json).map_err(io_err(lock))?;
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn member_patterns() {
        assert_eq!(match_member("data/*/cognates.tsv", "data/bai/cognates.tsv").as_deref(), Some("bai"));
        assert_eq!(match_member("data/*.tsv", "data/romance.tsv").as_deref(), Some("romance"));
        assert_eq!(match_member("data/*/cognates.tsv", "data-surprise/bai/cognates.tsv"), None);
        assert_eq!(match_member("data/*/cognates.tsv", "data/bai/solutions.tsv"), None);
        assert_eq!(match_member("data/*.tsv", "data/sub/x.tsv"), None);
    }

    #[test]
    fn default_manifest_parses() {
        let m = Manifest::parse(DEFAULT_MANIFEST, Path::new("default")).unwrap();
        assert_eq!(m.sources.len(), 2);
        assert!(m.sources.iter().all(|s| !s.members.is_empty()));
        assert_eq!(m.sources[1].proto_languages["romance"], "Latin");
    }
}
