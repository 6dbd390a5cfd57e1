//! Sentences, hashed vocabularies and tokenization.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Non-empty (after trimming) UTF-8 text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Sentence(String);

impl Sentence {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::Invalid("sentence is empty after trimming".into()));
        }
        Ok(Self(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Sentence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for Sentence {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HashScheme {
    Fnv1a64,
}

/// What happens to tokens that carry no alphanumeric character
/// (stray symbols, emoji).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnknownPolicy {
    /// Hash them like any other token.
    Hash,
    /// Map them to id 0 and hash everything else into `[1, V)`.
    ReserveZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub scheme: HashScheme,
    pub size: usize,
    pub unknown: UnknownPolicy,
}

impl Vocabulary {
    pub fn new(size: usize) -> Result<Self> {
        Self::with_policy(size, UnknownPolicy::Hash)
    }

    pub fn with_policy(size: usize, unknown: UnknownPolicy) -> Result<Self> {
        let min = match unknown {
            UnknownPolicy::Hash => 1,
            UnknownPolicy::ReserveZero => 2,
        };
        if size < min {
            return Err(Error::Invalid(format!("vocabulary size must be at least {min}, got {size}")));
        }
        Ok(Self {
            scheme: HashScheme::Fnv1a64,
            size,
            unknown,
        })
    }

    pub fn token_id(&self, token: &str) -> usize {
        let h = match self.scheme {
            HashScheme::Fnv1a64 => fnv1a64(token.as_bytes()),
        };
        match self.unknown {
            UnknownPolicy::Hash => (h % self.size as u64) as usize,
            UnknownPolicy::ReserveZero => {
                if token.chars().any(char::is_alphanumeric) {
                    1 + (h % (self.size as u64 - 1)) as usize
                } else {
                    0
                }
            }
        }
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn is_separator(c: char) -> bool {
    c.is_whitespace()
        || c.is_ascii_punctuation()
        || matches!(c, '\u{2000}'..='\u{206F}' | '\u{3000}'..='\u{303F}' | '\u{00A1}' | '\u{00BF}')
}

/// Lowercased tokens split on whitespace and punctuation.
pub fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(is_separator)
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn tokenize(sentence: &Sentence, vocab: &Vocabulary) -> Result<Vec<usize>> {
    let ids: Vec<usize> = words(sentence.as_str()).iter().map(|w| vocab.token_id(w)).collect();
    if ids.is_empty() {
        return Err(Error::Invalid(format!("sentence {:?} contains no tokens", sentence.as_str())));
    }
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hello_world_two_ids_in_range() {
        let v = Vocabulary::new(8).unwrap();
        let ids = tokenize(&Sentence::new("Hello, world").unwrap(), &v).unwrap();
        assert_eq!(ids.len(), 2);
        assert!(ids.iter().all(|&i| i < 8));
    }

    #[test]
    fn deterministic_and_case_insensitive() {
        let v = Vocabulary::new(1000).unwrap();
        let a = tokenize(&Sentence::new("The cat sat.").unwrap(), &v).unwrap();
        let b = tokenize(&Sentence::new("The cat sat.").unwrap(), &v).unwrap();
        let c = tokenize(&Sentence::new("the CAT sat").unwrap(), &v).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn repeated_token_repeated_id() {
        let v = Vocabulary::new(64).unwrap();
        let ids = tokenize(&Sentence::new("a a a").unwrap(), &v).unwrap();
        assert_eq!(ids.len(), 3);
        assert!(ids.iter().all(|&i| i == ids[0]));
    }

    #[test]
    fn empty_sentences_rejected() {
        assert!(Sentence::new("   \t").is_err());
        let v = Vocabulary::new(8).unwrap();
        assert!(tokenize(&Sentence::new("?!...").unwrap(), &v).is_err());
    }

    #[test]
    fn reserve_zero_policy() {
        let v = Vocabulary::with_policy(16, UnknownPolicy::ReserveZero).unwrap();
        let ids = tokenize(&Sentence::new("word \u{1F600} other").unwrap(), &v).unwrap();
        assert_eq!(ids.len(), 3);
        assert_eq!(ids[1], 0);
        assert!(ids[0] >= 1 && ids[2] >= 1);
        assert!(Vocabulary::with_policy(1, UnknownPolicy::ReserveZero).is_err());
    }

    #[test]
    fn known_fnv_vector() {
        // Reference value of 64-bit FNV-1a for "a".
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }
}
