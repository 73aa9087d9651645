//! JSONL behavior logs and CTR impressions.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::vocab::Vocabulary;
use crate::error::{Error, Result};

/// One line of a behavior log before tokenization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawUser {
    pub user_id: String,
    pub behaviors: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub labels: BTreeMap<String, usize>,
}

/// One line of a CTR impression log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawImpression {
    pub user_id: String,
    pub ad_title: String,
    pub ad_desc: String,
    pub click: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Behavior {
    pub tokens: Vec<u32>,
    /// 0-based index in the user's (truncated) sequence.
    pub position: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserRecord {
    pub user_id: String,
    pub behaviors: Vec<Behavior>,
    pub labels: BTreeMap<String, usize>,
}

impl UserRecord {
    pub fn len(&self) -> usize {
        self.behaviors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.behaviors.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Impression {
    pub user_id: String,
    /// Ad title tokens followed by ad description tokens.
    pub ad_tokens: Vec<u32>,
    pub click: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLimits {
    pub max_title_len: usize,
    pub max_behaviors: usize,
}

impl Default for SequenceLimits {
    fn default() -> Self {
        SequenceLimits {
            max_title_len: 30,
            max_behaviors: 100,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Ingested {
    pub records: Vec<UserRecord>,
    /// Lines skipped because no non-empty behavior remained.
    pub rejected: usize,
}

fn truncate_title(vocab: &Vocabulary, title: &str, max_len: usize) -> Vec<u32> {
    let mut ids = vocab.encode(title);
    ids.truncate(max_len);
    ids
}

/// Tokenizes one raw user. Empty titles are dropped; the most recent
/// `max_behaviors` behaviors are kept. Returns `None` if nothing remains.
pub fn to_record(raw: &RawUser, vocab: &Vocabulary, limits: SequenceLimits) -> Option<UserRecord> {
    let titles: Vec<Vec<u32>> = raw
        .behaviors
        .iter()
        .map(|t| truncate_title(vocab, t, limits.max_title_len))
        .filter(|t| !t.is_empty())
        .collect();
    let skip = titles.len().saturating_sub(limits.max_behaviors);
    let behaviors: Vec<Behavior> = titles
        .into_iter()
        .skip(skip)
        .enumerate()
        .map(|(position, tokens)| Behavior { tokens, position })
        .collect();
    if behaviors.is_empty() {
        return None;
    }
    Some(UserRecord {
        user_id: raw.user_id.clone(),
        behaviors,
        labels: raw.labels.clone(),
    })
}

pub fn to_impression(raw: &RawImpression, vocab: &Vocabulary, limits: SequenceLimits) -> Impression {
    let mut ad_tokens = truncate_title(vocab, &raw.ad_title, limits.max_title_len);
    ad_tokens.extend(truncate_title(vocab, &raw.ad_desc, limits.max_title_len));
    Impression {
        user_id: raw.user_id.clone(),
        ad_tokens,
        click: raw.click != 0,
    }
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_raw_users(path: &Path) -> Result<Vec<RawUser>> {
    read_jsonl(path)
}

pub fn read_raw_impressions(path: &Path) -> Result<Vec<RawImpression>> {
    read_jsonl(path)
}

/// Reads a behavior log, tokenizing with `vocab` and applying `limits`.
pub fn ingest_jsonl(path: &Path, vocab: &Vocabulary, limits: SequenceLimits) -> Result<Ingested> {
    let raw = read_raw_users(path)?;
    let mut records = Vec::with_capacity(raw.len());
    let mut rejected = 0;
    for r in &raw {
        match to_record(r, vocab, limits) {
            Some(rec) => records.push(rec),
            None => rejected += 1,
        }
    }
    if rejected > 0 {
        log::warn!("{}: rejected {rejected} users with no behaviors", path.display());
    }
    Ok(Ingested { records, rejected })
}

pub fn ingest_impressions(path: &Path, vocab: &Vocabulary, limits: SequenceLimits) -> Result<Vec<Impression>> {
    let raw = read_raw_impressions(path)?;
    let mut out = Vec::with_capacity(raw.len());
    for (i, r) in raw.iter().enumerate() {
        if r.click > 1 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("click must be 0 or 1, got {}", r.click),
            });
        }
        out.push(to_impression(r, vocab, limits));
    }
    Ok(out)
}
