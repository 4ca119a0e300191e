//! Text ingestion and the word-level vocabulary.
//!
//! Tokenization is lowercase + whitespace splitting. The five reserved ids
//! occupy the bottom of the id space in a fixed order; every other id maps
//! one-to-one onto a corpus word.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GemError, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;
/// The special embedding token. All special slots of a sequence share it.
pub const EMB: TokenId = 4;

pub const RESERVED: [&str; 5] = ["<pad>", "<unk>", "<bos>", "<eos>", "<emb>"];
pub const DEFAULT_VOCAB_CAP: usize = 8192;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
}

/// Loads one document per non-blank line.
///
/// A file whose first non-blank line starts with `{` is read as JSONL and
/// every line must then carry a `"text"` field.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| GemError::io(path, e))?;
    parse_corpus(&raw)
}

pub fn parse_corpus(raw: &str) -> Result<Vec<Document>> {
    let jsonl = raw
        .lines()
        .find(|l| !l.trim().is_empty())
        .map(|l| l.trim_start().starts_with('{'))
        .unwrap_or(false);

    #[derive(Deserialize)]
    struct Row {
        id: Option<String>,
        text: String,
    }

    let mut docs = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (id, text) = if jsonl {
            let row: Row = serde_json::from_str(line).map_err(|e| GemError::JsonLine {
                line: line_no,
                message: e.to_string(),
            })?;
            (row.id, row.text)
        } else {
            (None, line.to_string())
        };
        if text.trim().is_empty() {
            continue;
        }
        docs.push(Document {
            id: id.unwrap_or_else(|| format!("line-{line_no}")),
            text,
        });
    }
    Ok(docs)
}

/// Lowercased whitespace tokenization.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(|w| w.to_lowercase())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    cap: usize,
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    cap: usize,
    tokens: Vec<String>,
}

impl Vocab {
    /// Builds a vocabulary from an id-ordered token list whose first five
    /// entries must be the reserved names.
    pub fn from_tokens(cap: usize, tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(GemError::invalid("vocabulary must start with the reserved tokens"));
        }
        if tokens.len() > cap {
            return Err(GemError::invalid(format!(
                "vocabulary of {} tokens exceeds cap {cap}",
                tokens.len()
            )));
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate().skip(RESERVED.len()) {
            if token_to_id.insert(tok.clone(), id as TokenId).is_some() {
                return Err(GemError::invalid(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Self {
            cap,
            id_to_token: tokens,
            token_to_id,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Id of a non-reserved word.
    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.token_to_id.get(word).copied()
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        words(text)
            .map(|w| self.token_to_id.get(&w).copied().unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = self
                .id_to_token
                .get(id as usize)
                .ok_or(GemError::TokenOutOfRange {
                    id,
                    size: self.len(),
                })?;
            out.push(tok.as_str());
        }
        Ok(out.join(" "))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&VocabFile {
            cap: self.cap,
            tokens: self.id_to_token.clone(),
        })?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(json)?;
        Self::from_tokens(file.cap, file.tokens)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| GemError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| GemError::io(path, e))?;
        Self::from_json(&raw)
    }
}

/// Keeps the `cap - 5` most frequent words; ties go to the lexicographically
/// smaller word.
pub fn build_vocab(docs: &[Document], cap: usize) -> Result<Vocab> {
    if cap < RESERVED.len() + 1 {
        return Err(GemError::invalid(format!("vocab cap must be >= 6, got {cap}")));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for doc in docs {
        for w in words(&doc.text) {
            if RESERVED.contains(&w.as_str()) {
                continue;
            }
            *counts.entry(w).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(GemError::EmptyCorpus);
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(cap - RESERVED.len());

    let tokens = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().map(|(w, _)| w))
        .collect();
    Vocab::from_tokens(cap, tokens)
}
