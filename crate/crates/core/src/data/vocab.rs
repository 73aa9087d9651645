use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
const PAD_TOKEN: &str = "[PAD]";
const UNK_TOKEN: &str = "[UNK]";

/// Lowercased whitespace tokenization.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(|t| t.to_lowercase())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    min_frequency: usize,
}

impl Vocabulary {
    /// Keeps tokens with count >= `min_frequency`, assigning ids from 2 by
    /// descending count, ties broken lexicographically.
    pub fn from_counts(counts: HashMap<String, usize>, min_frequency: usize) -> Self {
        let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_frequency).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t), min_frequency)
    }

    fn from_tokens(tokens: impl IntoIterator<Item = String>, min_frequency: usize) -> Self {
        let mut id_to_token = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        id_to_token.extend(tokens);
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token,
            min_frequency,
        }
    }

    /// Counts tokens over `texts` and builds the vocabulary.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_frequency: usize) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut any = false;
        for text in texts {
            any = true;
            for tok in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if !any || counts.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        Ok(Self::from_counts(counts, min_frequency))
    }

    /// Builds from one or more behavior-log JSONL files.
    pub fn build_from_files<P: AsRef<Path>>(paths: &[P], min_frequency: usize) -> Result<Self> {
        let mut titles = Vec::new();
        for p in paths {
            for raw in super::ingest::read_raw_users(p.as_ref())? {
                titles.extend(raw.behaviors);
            }
        }
        Self::build(titles.iter().map(String::as_str), min_frequency)
    }

    /// Total ids including the two reserved ones.
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.len() <= 2
    }

    pub fn min_frequency(&self) -> usize {
        self.min_frequency
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).map(|t| self.id(&t)).collect()
    }

    /// One token per line; line `i` (0-based) has id `i + 2`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for tok in &self.id_to_token[2..] {
            writeln!(out, "{tok}").expect("writing to a Vec cannot fail");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut tokens = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let tok = line.trim_end_matches('\r').to_string();
            if tok.is_empty() || tok.contains(char::is_whitespace) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("invalid vocabulary token {tok:?}"),
                });
            }
            tokens.push(tok);
        }
        let vocab = Self::from_tokens(tokens, 0);
        if vocab.token_to_id.len() + 2 != vocab.id_to_token.len() {
            return Err(Error::Data(format!("{}: duplicate tokens", path.display())));
        }
        Ok(vocab)
    }
}
