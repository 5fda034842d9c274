//! Word-level tokenizer. Each distinct word, number literal or punctuation
//! mark is one token; "Yes" and "No" are guaranteed single tokens.

use std::collections::HashMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use sha2::{Digest, Sha256};

use crate::{CoreError, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const ECG_SLOT: u32 = 4;
pub const YES: u32 = 5;
pub const NO: u32 = 6;

pub const SPECIALS: [&str; 5] = ["<pad>", "<unk>", "<bos>", "<eos>", "<ecg>"];
pub const ANSWERS: [&str; 2] = ["Yes", "No"];
/// Specials plus the two answer tokens.
pub const RESERVED: usize = SPECIALS.len() + ANSWERS.len();

fn token_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"[0-9]+\.[0-9]+|[A-Za-z0-9]+(?:-[A-Za-z0-9]+)*|\S").expect("token pattern")
    })
}

/// Splits text into word, number and punctuation pieces.
pub fn pre_tokenize(text: &str) -> impl Iterator<Item = &str> {
    token_regex().find_iter(text).map(|m| m.as_str())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(CoreError::invalid(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < SPECIALS.len()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        pre_tokenize(text).map(|t| self.id(t).unwrap_or(UNK)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = self.token(id).ok_or_else(|| {
                CoreError::invalid(format!("token id {id} out of range for vocabulary of {}", self.len()))
            })?;
            if !Self::is_special(id) {
                out.push(tok);
            }
        }
        Ok(out.join(" "))
    }

    /// File form: one token per line, line number = id.
    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        let expected = SPECIALS.iter().chain(ANSWERS.iter());
        if tokens.len() < RESERVED || tokens.iter().zip(expected).any(|(a, b)| a != b) {
            return Err(CoreError::invalid("vocabulary does not start with the reserved tokens"));
        }
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::parse(&text).map_err(|e| CoreError::format(path, e.to_string()))
    }

    /// Hex SHA-256 of the file form.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_file_string().as_bytes()))
    }
}

/// Builds a vocabulary of at most `max_size` entries: the reserved tokens
/// first, then corpus tokens by descending frequency, ties broken
/// lexicographically.
pub fn build_vocab<I, S>(corpus: I, max_size: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if max_size < RESERVED {
        return Err(CoreError::invalid(format!(
            "max vocabulary size {max_size} is below the {RESERVED} reserved tokens"
        )));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    let mut docs = 0usize;
    for doc in corpus {
        docs += 1;
        for t in pre_tokenize(doc.as_ref()) {
            *counts.entry(t.to_string()).or_default() += 1;
        }
    }
    if docs == 0 {
        return Err(CoreError::invalid("empty corpus"));
    }
    for r in SPECIALS.iter().chain(ANSWERS.iter()) {
        counts.remove(*r);
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens: Vec<String> = SPECIALS
        .iter()
        .chain(ANSWERS.iter())
        .map(|s| s.to_string())
        .chain(ranked.into_iter().map(|(t, _)| t))
        .take(max_size)
        .collect();
    Vocab::from_tokens(tokens)
}
