//! Seeded synthetic corpora with disjoint topic vocabularies.
//!
//! Every dialogue stays on one topic, so a turn pulled in from another
//! dialogue is usually off-topic and detectable from word identity alone.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::corpus::{Corpus, Dialogue};
use crate::seed;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub dialogues: usize,
    pub topics: usize,
    pub words_per_topic: usize,
    pub min_rounds: usize,
    pub max_rounds: usize,
    pub min_turn_words: usize,
    pub max_turn_words: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            dialogues: 2000,
            topics: 20,
            words_per_topic: 24,
            min_rounds: 2,
            max_rounds: 4,
            min_turn_words: 3,
            max_turn_words: 6,
            seed: 0,
        }
    }
}

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

/// `topics` disjoint word lists of `words_per_topic` pseudo-words each.
pub fn topic_vocabularies(topics: usize, words_per_topic: usize, seed: u64) -> Vec<Vec<String>> {
    let mut rng = seed::rng(seed, &[b"topic-vocab"]);
    let mut used = BTreeSet::new();
    (0..topics)
        .map(|_| {
            let mut words = Vec::with_capacity(words_per_topic);
            while words.len() < words_per_topic {
                let syllables = rng.gen_range(2..=3);
                let w: String = (0..syllables)
                    .map(|_| {
                        format!(
                            "{}{}",
                            ONSETS.choose(&mut rng).expect("non-empty"),
                            VOWELS.choose(&mut rng).expect("non-empty")
                        )
                    })
                    .collect();
                if used.insert(w.clone()) {
                    words.push(w);
                }
            }
            words
        })
        .collect()
}

pub fn synthetic_corpus(cfg: &SyntheticConfig) -> Result<Corpus> {
    if cfg.topics == 0 || cfg.words_per_topic == 0 {
        return Err(Error::Config("need at least one topic and one word".into()));
    }
    if cfg.min_rounds == 0 || cfg.min_rounds > cfg.max_rounds {
        return Err(Error::Config("bad round range".into()));
    }
    if cfg.min_turn_words == 0 || cfg.min_turn_words > cfg.max_turn_words {
        return Err(Error::Config("bad turn length range".into()));
    }
    let vocab = topic_vocabularies(cfg.topics, cfg.words_per_topic, cfg.seed);
    let mut rng = seed::rng(cfg.seed, &[b"synthetic-corpus"]);
    let width = cfg.dialogues.max(1).to_string().len();
    let dialogues = (0..cfg.dialogues)
        .map(|i| {
            let topic = &vocab[rng.gen_range(0..cfg.topics)];
            let rounds = rng.gen_range(cfg.min_rounds..=cfg.max_rounds);
            let texts: Vec<String> = (0..2 * rounds)
                .map(|_| {
                    let len = rng.gen_range(cfg.min_turn_words..=cfg.max_turn_words);
                    (0..len)
                        .map(|_| topic.choose(&mut rng).expect("non-empty").as_str())
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect();
            Dialogue::from_texts(format!("syn-{i:0width$}"), &texts)
        })
        .collect::<Result<Vec<_>>>()?;
    Corpus::new(dialogues)
}
