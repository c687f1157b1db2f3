//! Word-level tokenization, vocabulary, and sentence segmentation.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const NEXT_HEADING: usize = 4;
pub const END_ARTICLE: usize = 5;
pub const UNK: usize = 6;
pub const NUM_RESERVED: usize = 7;

pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["<pad>", "<s>", "</s>", "<sep>", "<next>", "<end_article>", "<unk>"];

/// Lowercased words and single punctuation characters.
///
/// Letters, digits, apostrophes and inner hyphens stay inside a word;
/// every other non-space character becomes its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        let chars: Vec<char> = chunk.chars().collect();
        for (i, &c) in chars.iter().enumerate() {
            let inner_join =
                (c == '\'' || c == '-') && !word.is_empty() && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
            if c.is_alphanumeric() || inner_join {
                word.extend(c.to_lowercase());
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(c.to_lowercase().collect());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Count of whitespace-delimited tokens.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Split after `.`, `!` or `?` when followed by whitespace and an uppercase
/// letter, or by the end of the text. Inter-sentence whitespace is dropped;
/// every other character is kept.
pub fn sentence_split(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut start = 0usize;
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if matches!(c, '.' | '!' | '?') {
            let end = pos + c.len_utf8();
            let mut j = i + 1;
            while j < chars.len() && chars[j].1.is_whitespace() {
                j += 1;
            }
            let at_end = j == chars.len();
            let boundary = at_end || (j > i + 1 && chars[j].1.is_uppercase());
            if boundary {
                let s = text[start..end].trim_start();
                if !s.is_empty() {
                    out.push(s.to_string());
                }
                start = if at_end { text.len() } else { chars[j].0 };
                i = j;
                continue;
            }
        }
        i += 1;
    }
    let rest = text[start..].trim();
    if !rest.is_empty() {
        out.push(text[start..].trim_start().trim_end().to_string());
    }
    out
}

/// Render tokens as readable text: punctuation attaches to the preceding
/// word and sentence starts are capitalised.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut capitalize = true;
    for tok in tokens {
        let t = tok.as_ref();
        let attach = matches!(t, "." | "," | "!" | "?" | ";" | ":" | ")");
        if !out.is_empty() && !attach && !out.ends_with('(') {
            out.push(' ');
        }
        if capitalize && t.chars().next().is_some_and(char::is_alphabetic) {
            let mut cs = t.chars();
            out.extend(cs.next().unwrap().to_uppercase());
            out.push_str(cs.as_str());
            capitalize = false;
        } else {
            out.push_str(t);
            if t.chars().next().is_some_and(char::is_alphanumeric) {
                capitalize = false;
            }
        }
        if matches!(t, "." | "!" | "?") {
            capitalize = true;
        }
    }
    out
}

/// Token ↔ id bijection. Ids `0..7` are the reserved tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, r) in RESERVED_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::VocabMismatch(format!("id {i} must be reserved token {r}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::VocabMismatch(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Most frequent tokens first, ties broken lexicographically.
    pub fn build<S: AsRef<str>>(texts: &[S], max_size: usize) -> Result<Self> {
        if max_size <= NUM_RESERVED {
            return Err(Error::InvalidInput(format!("vocabulary size must exceed {NUM_RESERVED}, got {max_size}")));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for tok in tokenize(t.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        for r in RESERVED_TOKENS {
            counts.remove(r);
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().take(max_size - NUM_RESERVED).map(|(t, _)| t));
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t).unwrap_or(UNK)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        Ok(self.decode_tokens(ids)?.join(" "))
    }

    pub fn decode_tokens(&self, ids: &[usize]) -> Result<Vec<&str>> {
        ids.iter().map(|&id| self.token(id).ok_or(Error::TokenOutOfRange { id, size: self.len() })).collect()
    }

    /// Readable text for generated ids, skipping reserved markers.
    pub fn render(&self, ids: &[usize]) -> Result<String> {
        let toks = self.decode_tokens(ids)?;
        let words: Vec<&str> =
            ids.iter().zip(toks).filter(|(&id, _)| id >= NUM_RESERVED || id == UNK).map(|(_, t)| t).collect();
        Ok(detokenize(&words))
    }

    /// One token per line; the line index is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path)?;
        Self::from_lines(&s)
    }

    pub fn from_lines(s: &str) -> Result<Self> {
        Self::from_tokens(s.lines().map(str::to_string).collect())
    }

    /// Stable content fingerprint (FNV-1a over the token list).
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tokens {
            for b in t.bytes().chain(std::iter::once(b'\n')) {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}
