//! Word-level vocabulary and dialogue tokenization.
//!
//! Text is lowercased and split into runs of alphanumeric characters; every
//! other non-whitespace character is its own token. A dialogue becomes
//!
//! ```text
//! <s> <A> w w w </t> <B> w w </t> ...
//! ```
//!
//! truncated to the first `limit` tokens.

use std::collections::HashMap;

use crate::corpus::{Dialogue, Speaker, Turn};
use crate::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const START_OF_DIALOGUE: u32 = 2;
pub const TURN_SEP: u32 = 3;
pub const SPEAKER_A: u32 = 4;
pub const SPEAKER_B: u32 = 5;

const RESERVED: [&str; 6] = ["<pad>", "<unk>", "<s>", "</t>", "<A>", "<B>"];

pub const DEFAULT_MAX_TYPES: usize = 8000;

pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            cur.push(ch);
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Reserved markers only.
    pub fn reserved() -> Self {
        Self::from_tokens(RESERVED.iter().map(|s| s.to_string()).collect())
            .expect("reserved markers are valid")
    }

    /// Builds a vocabulary of the `max_types` most frequent words of `texts`
    /// (ties broken lexicographically) after the reserved markers.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_types: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for w in split_words(t) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !RESERVED.contains(&w.as_str()))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().take(max_types).map(|(w, _)| w));
        Self::from_tokens(tokens).expect("built vocab is valid")
    }

    pub fn from_dialogues<'a>(dialogues: impl IntoIterator<Item = &'a Dialogue>, max_types: usize) -> Self {
        Self::build(
            dialogues
                .into_iter()
                .flat_map(|d| d.turns().iter().map(|t| t.text.as_str())),
            max_types,
        )
    }

    /// Restores a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Checkpoint("vocabulary lacks reserved markers".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Checkpoint(format!("duplicate vocabulary entry `{t}`")));
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

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn checksum(&self) -> String {
        crate::seed::sha256_hex(self.tokens.join("\n").as_bytes())
    }

    fn push_turn(&self, out: &mut Vec<u32>, turn: &Turn) {
        out.push(match turn.speaker {
            Speaker::A => SPEAKER_A,
            Speaker::B => SPEAKER_B,
        });
        out.extend(split_words(&turn.text).iter().map(|w| self.id(w)));
        out.push(TURN_SEP);
    }

    /// Whole-dialogue token sequence, keeping the first `limit` tokens.
    pub fn tokenize(&self, d: &Dialogue, limit: usize) -> Vec<u32> {
        assert!(limit >= 4, "token limit must be at least 4");
        let mut out = vec![START_OF_DIALOGUE];
        for t in d.turns() {
            if out.len() >= limit {
                break;
            }
            self.push_turn(&mut out, t);
        }
        out.truncate(limit);
        out
    }

    /// A single turn encoded as its own sequence, with its own start marker.
    pub fn tokenize_turn(&self, turn: &Turn, limit: usize) -> Vec<u32> {
        assert!(limit >= 4, "token limit must be at least 4");
        let mut out = vec![START_OF_DIALOGUE];
        self.push_turn(&mut out, turn);
        out.truncate(limit);
        out
    }
}
