//! Review text normalization, word-level vocabulary and fixed-length
//! tokenization with `[CLS]` / `[SEP]` / `[PAD]` framing.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

fn punctuation() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\p{P}").expect("valid regex"))
}

/// Lowercases, strips Unicode punctuation and collapses whitespace runs.
pub fn normalize_text(raw: &str) -> String {
    let lowered = raw.to_lowercase();
    let stripped = punctuation().replace_all(&lowered, "");
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    pub max_size: usize,
    pub min_count: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            max_size: 2000,
            min_count: 1,
        }
    }
}

/// Token/id mapping. Ids 0..4 are the reserved specials.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from whitespace tokens of the normalized corpus,
    /// most frequent first, ties broken lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S], cfg: VocabConfig) -> Result<Self> {
        if cfg.max_size < RESERVED.len() {
            return Err(Error::Parameter(format!(
                "vocabulary max_size {} is below the {} reserved ids",
                cfg.max_size,
                RESERVED.len()
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for doc in corpus {
            for tok in normalize_text(doc.as_ref()).split(' ').filter(|t| !t.is_empty()) {
                *counts.entry(tok.to_string()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(tok, c)| *c >= cfg.min_count && !RESERVED.contains(&tok.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(cfg.max_size - RESERVED.len());
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t))
    }

    /// Vocabulary from its non-reserved tokens in id order.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let mut index = HashMap::with_capacity(all.len());
        for (id, tok) in all.iter().enumerate() {
            if tok.is_empty() || tok.contains(char::is_whitespace) {
                return Err(Error::Format(format!("invalid vocabulary token {tok:?}")));
            }
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Vocabulary { tokens: all, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn learned_tokens(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    /// One token per line; line `i` holds id `i + 4`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        for tok in self.learned_tokens() {
            body.push_str(tok);
            body.push('\n');
        }
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(body.lines().map(str::to_string))
    }

    /// Frames `text` as `[CLS] tokens.. [SEP]`, truncating the token tail to
    /// fit `max_len`, then pads with `[PAD]`.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<TokenizedReview> {
        if max_len < 3 {
            return Err(Error::Parameter(format!(
                "max_len {max_len} leaves no room for a token between [CLS] and [SEP]"
            )));
        }
        let normalized = normalize_text(text);
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS);
        ids.extend(
            normalized
                .split(' ')
                .filter(|t| !t.is_empty())
                .take(max_len - 2)
                .map(|t| self.id(t)),
        );
        ids.push(SEP);
        let true_length = ids.len();
        ids.resize(max_len, PAD);
        let mask = (0..max_len).map(|i| u8::from(i < true_length)).collect();
        Ok(TokenizedReview {
            ids,
            mask,
            true_length,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedReview {
    pub ids: Vec<usize>,
    pub mask: Vec<u8>,
    pub true_length: usize,
}
