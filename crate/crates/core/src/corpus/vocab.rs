//! Lowercasing whitespace/punctuation tokenizer and the shared vocabulary.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

/// A surface token with its character span `[begin, end)` in the source text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub id: usize,
    pub text: String,
    pub begin: usize,
    pub end: usize,
}

/// Splits text into lowercase tokens: runs of alphanumeric characters, and
/// every other non-space character on its own. Offsets count characters.
pub fn segment(text: &str) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    let mut current: Option<(String, usize)> = None;
    let flush = |cur: &mut Option<(String, usize)>, end: usize, out: &mut Vec<_>| {
        if let Some((s, b)) = cur.take() {
            out.push((s, b, end));
        }
    };
    let mut n = 0;
    for (i, ch) in text.chars().enumerate() {
        n = i + 1;
        if ch.is_alphanumeric() {
            match &mut current {
                Some((s, _)) => s.extend(ch.to_lowercase()),
                None => current = Some((ch.to_lowercase().collect(), i)),
            }
        } else {
            flush(&mut current, i, &mut out);
            if !ch.is_whitespace() {
                out.push((ch.to_lowercase().collect(), i, i + 1));
            }
        }
    }
    flush(&mut current, n, &mut out);
    out
}

/// Token-to-id map with reserved ids `[PAD]=0, [UNK]=1, [CLS]=2, [SEP]=3`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    reserved: BTreeMap<String, usize>,
    tokens: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub const PAD_ID: usize = 0;
    pub const UNK_ID: usize = 1;
    pub const CLS_ID: usize = 2;
    pub const SEP_ID: usize = 3;
    const RESERVED: [&'static str; 4] = [PAD, UNK, CLS, SEP];

    /// Vocabulary over every token of `texts`, ids assigned in sorted order.
    pub fn build<'t>(texts: impl IntoIterator<Item = &'t str>) -> Self {
        let mut words = BTreeSet::new();
        for t in texts {
            for (w, _, _) in segment(t) {
                words.insert(w);
            }
        }
        let mut tokens: Vec<String> = Self::RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().filter(|w| !Self::RESERVED.contains(&w.as_str())));
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Self::UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Vec<Token> {
        segment(text)
            .into_iter()
            .map(|(text, begin, end)| Token {
                id: self.id(&text),
                text,
                begin,
                end,
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            reserved: Self::RESERVED
                .iter()
                .enumerate()
                .map(|(i, s)| (s.to_string(), i))
                .collect(),
            tokens: self
                .tokens
                .iter()
                .enumerate()
                .skip(Self::RESERVED.len())
                .map(|(i, t)| (t.clone(), i))
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("vocabulary serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(s)?;
        for (i, name) in Self::RESERVED.iter().enumerate() {
            if file.reserved.get(*name) != Some(&i) {
                return Err(Error::Schema {
                    path: format!("reserved.{name}"),
                    message: format!("expected id {i}"),
                });
            }
        }
        let n = Self::RESERVED.len() + file.tokens.len();
        let mut tokens = vec![None; n];
        for (i, name) in Self::RESERVED.iter().enumerate() {
            tokens[i] = Some(name.to_string());
        }
        for (t, &id) in &file.tokens {
            match tokens.get_mut(id) {
                Some(slot @ None) => *slot = Some(t.clone()),
                _ => {
                    return Err(Error::Schema {
                        path: format!("tokens.{t}"),
                        message: format!("id {id} is duplicated or not dense"),
                    })
                }
            }
        }
        let tokens: Vec<String> = tokens.into_iter().map(|t| t.expect("dense ids")).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Vocabulary { tokens, index })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_json(&s)
    }
}

/// Minimal inclusive token range covering characters
/// `[char_start, char_start + len)`.
pub fn align_answer(tokens: &[Token], char_start: usize, len: usize) -> Result<(usize, usize)> {
    let char_end = char_start + len;
    let first = tokens.iter().position(|t| t.end > char_start && t.begin < char_end);
    let last = tokens.iter().rposition(|t| t.end > char_start && t.begin < char_end);
    match (first, last) {
        (Some(s), Some(e)) => Ok((s, e)),
        _ => Err(Error::Alignment(format!(
            "no token overlaps characters {char_start}..{char_end}"
        ))),
    }
}
