//! Dialogue corpora in canonical JSONL form.
//!
//! One dialogue per line:
//!
//! ```text
//! {"id":"d1","turns":[{"speaker":"A","text":"hi"},{"speaker":"B","text":"hello"}]}
//! ```
//!
//! A dialogue of `n` rounds has `2n` turns alternating `A`, `B`, starting with `A`.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Speaker {
    A,
    B,
}

impl Speaker {
    /// Speaker expected at turn position `index` (0-based).
    pub fn at(index: usize) -> Speaker {
        if index.is_multiple_of(2) {
            Speaker::A
        } else {
            Speaker::B
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

impl Turn {
    pub fn new(speaker: Speaker, text: impl Into<String>) -> Self {
        Turn {
            speaker,
            text: text.into(),
        }
    }
}

/// A record as it appears on disk, before validation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawDialogue {
    pub id: String,
    pub turns: Vec<Turn>,
}

/// A validated dialogue. Construct through [`validate_dialogue`] or
/// [`Dialogue::new`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    id: String,
    turns: Vec<Turn>,
}

impl Dialogue {
    pub fn new(id: impl Into<String>, turns: Vec<Turn>) -> Result<Self> {
        validate_dialogue(RawDialogue {
            id: id.into(),
            turns,
        })
    }

    /// Builds a dialogue from plain texts, assigning alternating speakers.
    pub fn from_texts<S: AsRef<str>>(id: impl Into<String>, texts: &[S]) -> Result<Self> {
        let turns = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Turn::new(Speaker::at(i), t.as_ref()))
            .collect();
        Self::new(id, turns)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    pub fn n_rounds(&self) -> usize {
        self.turns.len() / 2
    }

    /// The `(A, B)` turns of round `r` (1-based).
    pub fn round(&self, r: usize) -> (&Turn, &Turn) {
        (&self.turns[2 * (r - 1)], &self.turns[2 * (r - 1) + 1])
    }

    pub fn with_id(&self, id: impl Into<String>) -> Dialogue {
        Dialogue {
            id: id.into(),
            turns: self.turns.clone(),
        }
    }

    pub fn to_raw(&self) -> RawDialogue {
        RawDialogue {
            id: self.id.clone(),
            turns: self.turns.clone(),
        }
    }

    /// Canonical JSONL line, without the trailing newline.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&self.to_raw()).expect("dialogue serializes")
    }
}

pub fn validate_dialogue(raw: RawDialogue) -> Result<Dialogue> {
    let invalid = |reason: String| Error::InvalidDialogue {
        id: raw.id.clone(),
        reason,
    };
    if raw.turns.is_empty() {
        return Err(invalid("no turns".into()));
    }
    if !raw.turns.len().is_multiple_of(2) {
        return Err(invalid("odd turn count".into()));
    }
    for (i, turn) in raw.turns.iter().enumerate() {
        if turn.speaker != Speaker::at(i) {
            return Err(invalid(format!(
                "wrong speaker order at turn {i}: expected {:?}, got {:?}",
                Speaker::at(i),
                turn.speaker
            )));
        }
        if turn.text.trim().is_empty() {
            return Err(invalid(format!("empty turn text at turn {i}")));
        }
    }
    Ok(Dialogue {
        id: raw.id,
        turns: raw.turns,
    })
}

/// An ordered collection of dialogues with distinct ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    dialogues: Vec<Dialogue>,
}

impl Corpus {
    pub fn new(dialogues: Vec<Dialogue>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(dialogues.len());
        for d in &dialogues {
            if !seen.insert(d.id()) {
                return Err(Error::DuplicateId(d.id().to_owned()));
            }
        }
        Ok(Corpus { dialogues })
    }

    pub fn dialogues(&self) -> &[Dialogue] {
        &self.dialogues
    }

    pub fn len(&self) -> usize {
        self.dialogues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dialogues.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Dialogue> {
        self.dialogues.iter().find(|d| d.id() == id)
    }

    pub fn split_at(&self, mid: usize) -> (Corpus, Corpus) {
        let (a, b) = self.dialogues.split_at(mid.min(self.len()));
        (
            Corpus {
                dialogues: a.to_vec(),
            },
            Corpus {
                dialogues: b.to_vec(),
            },
        )
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for d in &self.dialogues {
            out.push_str(&d.to_json_line());
            out.push('\n');
        }
        out
    }

    /// SHA-256 of the canonical serialization.
    pub fn checksum(&self) -> String {
        crate::seed::sha256_hex(self.to_jsonl().as_bytes())
    }

    pub fn parse_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut dialogues = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawDialogue = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            dialogues.push(validate_dialogue(raw)?);
        }
        Corpus::new(dialogues)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Corpus::parse_jsonl(BufReader::new(f))
}
