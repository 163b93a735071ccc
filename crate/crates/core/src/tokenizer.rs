//! Closed-vocabulary word-level tokenizer.
//!
//! Text is lower-cased and split on whitespace and on the punctuation set
//! `. , ? ! ' :`, with punctuation kept as tokens. The literal markers
//! `[CLS]`, `[SEP]`, `[MASK]`, `[PAD]` and `[UNK]` map to the special ids.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const CLS: usize = 0;
pub const SEP: usize = 1;
pub const MASK: usize = 2;
pub const PAD: usize = 3;
pub const UNK: usize = 4;
pub const N_SPECIAL: usize = 5;
pub const SPECIAL_TOKENS: [&str; N_SPECIAL] = ["[CLS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]"];

const PUNCT: [char; 6] = ['.', ',', '?', '!', '\'', ':'];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-pad positions (pads are always a suffix).
    pub fn content_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    /// Ids with the padding suffix removed.
    pub fn content(&self) -> &[usize] {
        &self.ids[..self.content_len()]
    }
}

/// Splits normalized text into token strings.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut rest = chunk;
        while !rest.is_empty() {
            if let Some(sp) = SPECIAL_TOKENS
                .iter()
                .find(|s| rest.get(..s.len()).is_some_and(|p| p.eq_ignore_ascii_case(s)))
            {
                out.push(sp.to_string());
                rest = &rest[sp.len()..];
                continue;
            }
            let mut chars = rest.char_indices();
            let (_, c) = chars.next().expect("non-empty");
            if PUNCT.contains(&c) {
                out.push(c.to_string());
                rest = &rest[c.len_utf8()..];
                continue;
            }
            let end = rest
                .char_indices()
                .find(|&(i, c)| PUNCT.contains(&c) || (i > 0 && c == '['))
                .map_or(rest.len(), |(i, _)| i);
            out.push(rest[..end].to_lowercase());
            rest = &rest[end..];
        }
    }
    out
}

/// Normal form of a sentence: its tokens joined by single spaces.
pub fn normalize(text: &str) -> String {
    pre_tokenize(text).join(" ")
}

impl Vocabulary {
    /// Specials, then every word seen at least `min_count` times ordered by
    /// descending count and then lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Vocab("empty corpus".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in corpus {
            for tok in pre_tokenize(line.as_ref()) {
                if !SPECIAL_TOKENS.contains(&tok.as_str()) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count.max(1))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < N_SPECIAL + 1 {
            return Err(Error::Vocab(format!(
                "vocabulary needs at least {} tokens, got {}",
                N_SPECIAL + 1,
                tokens.len()
            )));
        }
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens[i] != *s {
                return Err(Error::Vocab(format!("id {i} must be {s}, found {}", tokens[i])));
            }
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), i).is_some() {
                return Err(Error::Vocab(format!("duplicate token `{t}`")));
            }
        }
        Ok(Self {
            token_to_id,
            id_to_token: tokens,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(|s| s.as_str())
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn is_special(id: usize) -> bool {
        id < N_SPECIAL
    }

    /// Token ids of `text` without truncation or padding.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        pre_tokenize(text)
            .iter()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    pub fn encode(&self, text: &str, max_len: usize) -> TokenSequence {
        let mut ids = self.tokenize(text);
        ids.truncate(max_len);
        let n = ids.len();
        ids.resize(max_len, PAD);
        let mut attention_mask = vec![1u8; n];
        attention_mask.resize(max_len, 0);
        TokenSequence { ids, attention_mask }
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            if id >= self.len() {
                return Err(Error::TokenId {
                    id,
                    size: self.len(),
                });
            }
            if id != PAD {
                words.push(self.id_to_token[id].as_str());
            }
        }
        Ok(words.join(" "))
    }

    /// One token per line; the line number is the id.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        for t in &self.id_to_token {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let tokens = r.lines().collect::<std::io::Result<Vec<_>>>()?;
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
