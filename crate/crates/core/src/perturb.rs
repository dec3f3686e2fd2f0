//! Multi-level perturbed datasets.
//!
//! A variant of an `n`-round dialogue at level `i` has `i` of its rounds
//! corrupted by turns sampled from other dialogues, and carries the reference
//! score `(n - i) / n`. Level 0 is the untouched dialogue with score 1.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Dialogue, Turn};
use crate::kv::KvFile;
use crate::seed::{self, Rng};
use crate::{par, Error, Result};

pub const DEFAULT_CAP: usize = 8;

/// Exact reference score `kept / rounds`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RefScore {
    pub kept: u32,
    pub rounds: u32,
}

impl RefScore {
    pub fn value(self) -> f64 {
        self.kept as f64 / self.rounds as f64
    }
}

impl fmt::Display for RefScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.kept, self.rounds)
    }
}

pub fn reference_score(n: usize, i: usize) -> Result<RefScore> {
    if n == 0 || i > n {
        return Err(Error::Domain(format!(
            "reference score needs n >= 1 and 0 <= i <= n, got n={n}, i={i}"
        )));
    }
    Ok(RefScore {
        kept: (n - i) as u32,
        rounds: n as u32,
    })
}

/// Number of distinct level-`i` variants of an `n`-round dialogue, `C(n, i)`.
pub fn count_variants(n: usize, i: usize) -> Result<u128> {
    if i > n {
        return Err(Error::Domain(format!("C({n}, {i}) with i > n")));
    }
    let k = i.min(n - i) as u128;
    let n = n as u128;
    let mut acc: u128 = 1;
    for j in 0..k {
        // acc * (n - j) is divisible by (j + 1) at every step
        acc = acc
            .checked_mul(n - j)
            .ok_or_else(|| Error::Domain(format!("C({n}, {i}) overflows")))?
            / (j + 1);
    }
    Ok(acc)
}

/// Which turns of a chosen round get replaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReplaceUnit {
    /// The `B` turn only.
    #[default]
    ResponderTurn,
    /// Both turns of the round.
    WholeRound,
}

impl ReplaceUnit {
    fn slots(self, round: usize) -> Range<usize> {
        let a = 2 * (round - 1);
        match self {
            ReplaceUnit::ResponderTurn => a + 1..a + 2,
            ReplaceUnit::WholeRound => a..a + 2,
        }
    }
}

impl fmt::Display for ReplaceUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReplaceUnit::ResponderTurn => "responder_turn",
            ReplaceUnit::WholeRound => "whole_round",
        })
    }
}

impl FromStr for ReplaceUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "responder_turn" => Ok(ReplaceUnit::ResponderTurn),
            "whole_round" => Ok(ReplaceUnit::WholeRound),
            _ => Err(Error::Config(format!("unknown replace unit `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolEntry {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub text: String,
}

/// All turns of a corpus, grouped by dialogue so that one dialogue's turns
/// can be excluded in O(1) while sampling.
#[derive(Debug, Clone, Default)]
pub struct ReplacementPool {
    entries: Vec<PoolEntry>,
    ranges: HashMap<String, Range<usize>>,
}

impl ReplacementPool {
    pub fn from_corpus(corpus: &Corpus) -> Self {
        let mut pool = ReplacementPool::default();
        for d in corpus.dialogues() {
            let start = pool.entries.len();
            pool.entries
                .extend(d.turns().iter().enumerate().map(|(i, t)| PoolEntry {
                    dialogue_id: d.id().to_owned(),
                    turn_index: i,
                    text: t.text.clone(),
                }));
            pool.ranges
                .insert(d.id().to_owned(), start..pool.entries.len());
        }
        pool
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn excluded(&self, id: &str) -> Range<usize> {
        self.ranges.get(id).cloned().unwrap_or(0..0)
    }

    /// Number of entries not belonging to dialogue `id`.
    pub fn available_for(&self, id: &str) -> usize {
        self.entries.len() - self.excluded(id).len()
    }

    /// Uniform draw over entries from dialogues other than `exclude_id`.
    pub fn sample(&self, exclude_id: &str, rng: &mut Rng) -> Result<&PoolEntry> {
        let skip = self.excluded(exclude_id);
        let available = self.entries.len() - skip.len();
        if available == 0 {
            return Err(Error::EmptyPool(exclude_id.to_owned()));
        }
        let mut idx = rng.gen_range(0..available);
        if idx >= skip.start {
            idx += skip.len();
        }
        Ok(&self.entries[idx])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Source {
    pub dialogue_id: String,
    pub turn_index: usize,
}

/// One perturbed copy of a base dialogue. Serializes to the dataset JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbedVariant {
    pub base_id: String,
    pub level: usize,
    /// 1-based, ascending.
    pub replaced_rounds: Vec<usize>,
    /// Sources in slot order: one per replaced turn.
    pub sources: Vec<Source>,
    pub score: f64,
    pub turns: Vec<Turn>,
}

impl PerturbedVariant {
    pub fn n_rounds(&self) -> usize {
        self.turns.len() / 2
    }

    pub fn reference_score(&self) -> RefScore {
        RefScore {
            kept: (self.n_rounds() - self.level) as u32,
            rounds: self.n_rounds() as u32,
        }
    }

    /// The variant as a standalone dialogue with id `<base_id>#<level>.<k>`.
    pub fn to_dialogue(&self, k: usize) -> Dialogue {
        Dialogue::new(
            format!("{}#{}.{}", self.base_id, self.level, k),
            self.turns.clone(),
        )
        .expect("variants keep the base dialogue's shape")
    }
}

/// All `k`-subsets of `1..=n` in lexicographic order.
fn all_subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (1..=k).collect();
    loop {
        out.push(cur.clone());
        // advance the rightmost position that still has room
        let Some(pos) = (0..k).rev().find(|&p| cur[p] < n - (k - 1 - p)) else {
            return out;
        };
        cur[pos] += 1;
        for q in pos + 1..k {
            cur[q] = cur[q - 1] + 1;
        }
    }
}

const ENUMERATE_LIMIT: u128 = 1 << 16;

fn choose_round_subsets(n: usize, level: usize, cap: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let total = count_variants(n, level).unwrap_or(u128::MAX);
    if total <= cap as u128 {
        return all_subsets(n, level);
    }
    if total <= ENUMERATE_LIMIT {
        let all = all_subsets(n, level);
        let mut picked = index::sample(rng, all.len(), cap).into_vec();
        picked.sort_unstable();
        return picked.into_iter().map(|i| all[i].clone()).collect();
    }
    let mut chosen = BTreeSet::new();
    while chosen.len() < cap {
        let mut s: Vec<usize> = index::sample(rng, n, level)
            .into_iter()
            .map(|r| r + 1)
            .collect();
        s.sort_unstable();
        chosen.insert(s);
    }
    chosen.into_iter().collect()
}

/// Replaces the slots of `rounds` in `d` with pool draws.
pub fn replace_rounds(
    d: &Dialogue,
    rounds: &[usize],
    unit: ReplaceUnit,
    pool: &ReplacementPool,
    rng: &mut Rng,
) -> Result<(Vec<Turn>, Vec<Source>)> {
    let mut turns = d.turns().to_vec();
    let mut sources = Vec::new();
    for &r in rounds {
        for slot in unit.slots(r) {
            let e = pool.sample(d.id(), rng)?;
            turns[slot].text.clone_from(&e.text);
            sources.push(Source {
                dialogue_id: e.dialogue_id.clone(),
                turn_index: e.turn_index,
            });
        }
    }
    Ok((turns, sources))
}

/// Up to `cap` distinct level-`level` variants of `d`.
///
/// Output depends only on `(d, level, pool, seed, cap, unit)`; the stream is
/// keyed by the dialogue id and level, not by position in a corpus.
pub fn generate_variants(
    d: &Dialogue,
    level: usize,
    pool: &ReplacementPool,
    seed: u64,
    cap: usize,
    unit: ReplaceUnit,
) -> Result<Vec<PerturbedVariant>> {
    if cap < 1 {
        return Err(Error::Config("cap must be at least 1".into()));
    }
    let n = d.n_rounds();
    let score = reference_score(n, level)?.value();
    if level == 0 {
        return Ok(vec![PerturbedVariant {
            base_id: d.id().to_owned(),
            level: 0,
            replaced_rounds: Vec::new(),
            sources: Vec::new(),
            score,
            turns: d.turns().to_vec(),
        }]);
    }
    if pool.available_for(d.id()) == 0 {
        return Err(Error::EmptyPool(d.id().to_owned()));
    }
    let mut rng = seed::rng(seed, &[b"variants", d.id().as_bytes(), &(level as u64).to_le_bytes()]);
    let subsets = choose_round_subsets(n, level, cap, &mut rng);
    subsets
        .into_iter()
        .map(|rounds| {
            let (turns, sources) = replace_rounds(d, &rounds, unit, pool, &mut rng)?;
            Ok(PerturbedVariant {
                base_id: d.id().to_owned(),
                level,
                replaced_rounds: rounds,
                sources,
                score,
                turns,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum LevelSelection {
    All,
    Only(BTreeSet<usize>),
}

impl LevelSelection {
    fn levels_for(&self, n: usize) -> Vec<usize> {
        match self {
            LevelSelection::All => (0..=n).collect(),
            LevelSelection::Only(set) => set.iter().copied().filter(|&i| i <= n).collect(),
        }
    }

    fn wants_replacement(&self) -> bool {
        match self {
            LevelSelection::All => true,
            LevelSelection::Only(set) => set.iter().any(|&i| i >= 1),
        }
    }
}

impl fmt::Display for LevelSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LevelSelection::All => f.write_str("all"),
            LevelSelection::Only(set) => {
                let parts: Vec<String> = set.iter().map(|i| i.to_string()).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl FromStr for LevelSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "all" {
            return Ok(LevelSelection::All);
        }
        let set = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad level `{p}`")))
            })
            .collect::<Result<BTreeSet<_>>>()?;
        if set.is_empty() {
            return Err(Error::Config("empty level selection".into()));
        }
        Ok(LevelSelection::Only(set))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationConfig {
    pub seed: u64,
    pub cap: usize,
    pub levels: LevelSelection,
    pub replace_unit: ReplaceUnit,
    /// Fraction of dialogues routed to the `valid` split. Zero writes only `train`.
    pub valid_fraction: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            seed: 0,
            cap: DEFAULT_CAP,
            levels: LevelSelection::All,
            replace_unit: ReplaceUnit::ResponderTurn,
            valid_fraction: 0.0,
        }
    }
}

impl GenerationConfig {
    pub fn to_kv(&self, kv: &mut KvFile) {
        kv.set("seed", self.seed);
        kv.set("cap", self.cap);
        kv.set("levels", &self.levels);
        kv.set("replace_unit", self.replace_unit);
        kv.set("valid_fraction", self.valid_fraction);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSummary {
    pub name: String,
    pub path: PathBuf,
    pub dialogues: usize,
    pub records: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSummary {
    pub splits: Vec<SplitSummary>,
    /// Records per level, over all splits.
    pub level_counts: BTreeMap<usize, usize>,
    pub manifest: KvFile,
}

impl DatasetSummary {
    pub fn total_records(&self) -> usize {
        self.splits.iter().map(|s| s.records).sum()
    }
}

pub const MANIFEST_FILE: &str = "manifest.txt";

fn split_of(seed: u64, id: &str, valid_fraction: f64) -> &'static str {
    if valid_fraction <= 0.0 {
        return "train";
    }
    let u = seed::derive(seed, &[b"split", id.as_bytes()]) as f64 / u64::MAX as f64;
    if u < valid_fraction {
        "valid"
    } else {
        "train"
    }
}

/// All variants of `d` for the configured levels, in level order.
pub fn variants_for(
    d: &Dialogue,
    pool: &ReplacementPool,
    cfg: &GenerationConfig,
) -> Result<Vec<PerturbedVariant>> {
    let mut out = Vec::new();
    for level in cfg.levels.levels_for(d.n_rounds()) {
        out.extend(generate_variants(
            d,
            level,
            pool,
            cfg.seed,
            cfg.cap,
            cfg.replace_unit,
        )?);
    }
    Ok(out)
}

/// Materializes the perturbed dataset for `corpus` under `out_dir`.
///
/// Writes `train.jsonl` (and `valid.jsonl` when `valid_fraction > 0`), with
/// records grouped by base dialogue in corpus order, plus `manifest.txt`.
pub fn build_dataset(corpus: &Corpus, cfg: &GenerationConfig, out_dir: &Path) -> Result<DatasetSummary> {
    if corpus.is_empty() {
        return Err(Error::Config("corpus is empty".into()));
    }
    if cfg.cap < 1 {
        return Err(Error::Config("cap must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&cfg.valid_fraction) {
        return Err(Error::Config("valid_fraction must be in [0, 1)".into()));
    }
    let pool = ReplacementPool::from_corpus(corpus);
    if cfg.levels.wants_replacement() {
        if let Some(d) = corpus
            .dialogues()
            .iter()
            .find(|d| pool.available_for(d.id()) == 0)
        {
            return Err(Error::EmptyPool(d.id().to_owned()));
        }
    }

    let per_dialogue = par::map(corpus.dialogues(), |d| variants_for(d, &pool, cfg));

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let split_names: &[&str] = if cfg.valid_fraction > 0.0 {
        &["train", "valid"]
    } else {
        &["train"]
    };
    let mut buffers: BTreeMap<&str, (String, usize, usize)> =
        split_names.iter().map(|s| (*s, (String::new(), 0, 0))).collect();
    let mut level_counts = BTreeMap::new();
    for (d, variants) in corpus.dialogues().iter().zip(per_dialogue) {
        let variants = variants?;
        let buf = buffers
            .get_mut(split_of(cfg.seed, d.id(), cfg.valid_fraction))
            .expect("split exists");
        buf.1 += 1;
        for v in &variants {
            *level_counts.entry(v.level).or_insert(0) += 1;
            buf.0.push_str(&serde_json::to_string(v)?);
            buf.0.push('\n');
            buf.2 += 1;
        }
    }

    let mut manifest = KvFile::new();
    manifest.set("format", "dialeval-dataset");
    manifest.set("format_version", 1);
    cfg.to_kv(&mut manifest);
    manifest.set("corpus_sha256", corpus.checksum());
    manifest.set("corpus_dialogues", corpus.len());
    for (level, count) in &level_counts {
        manifest.set(format!("count.level.{level}"), count);
    }
    let mut splits = Vec::new();
    for (name, (text, dialogues, records)) in buffers {
        let path = out_dir.join(format!("{name}.jsonl"));
        std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
        let sha256 = seed::sha256_hex(text.as_bytes());
        manifest.set(format!("split.{name}.dialogues"), dialogues);
        manifest.set(format!("split.{name}.records"), records);
        manifest.set(format!("split.{name}.sha256"), &sha256);
        splits.push(SplitSummary {
            name: name.to_owned(),
            path,
            dialogues,
            records,
            sha256,
        });
    }
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(DatasetSummary {
        splits,
        level_counts,
        manifest,
    })
}

/// The variants of one base dialogue, keyed by level.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantGroup {
    pub base_id: String,
    pub n_rounds: usize,
    pub levels: BTreeMap<usize, Vec<PerturbedVariant>>,
}

impl VariantGroup {
    /// True when every level `0..=n` has at least one variant.
    pub fn is_complete(&self) -> bool {
        (0..=self.n_rounds).all(|l| self.levels.get(&l).is_some_and(|v| !v.is_empty()))
    }

    pub fn original(&self) -> Option<Dialogue> {
        self.levels
            .get(&0)
            .and_then(|v| v.first())
            .map(|v| Dialogue::new(self.base_id.clone(), v.turns.clone()).expect("valid"))
    }
}

pub fn group_variants(records: Vec<PerturbedVariant>) -> Vec<VariantGroup> {
    let mut groups: Vec<VariantGroup> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for v in records {
        let gi = *index.entry(v.base_id.clone()).or_insert_with(|| {
            groups.push(VariantGroup {
                base_id: v.base_id.clone(),
                n_rounds: v.n_rounds(),
                levels: BTreeMap::new(),
            });
            groups.len() - 1
        });
        groups[gi].levels.entry(v.level).or_default().push(v);
    }
    groups
}

pub fn read_variants(path: &Path) -> Result<Vec<PerturbedVariant>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: PerturbedVariant = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !v.turns.len().is_multiple_of(2) || v.turns.is_empty() || v.level > v.n_rounds() {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("variant of {} has inconsistent shape", v.base_id),
            });
        }
        out.push(v);
    }
    Ok(out)
}

/// A dataset directory written by [`build_dataset`].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: KvFile,
    pub train: Vec<VariantGroup>,
    pub valid: Vec<VariantGroup>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = KvFile::read(&dir.join(MANIFEST_FILE))?;
        let train = group_variants(read_variants(&dir.join("train.jsonl"))?);
        let valid_path = dir.join("valid.jsonl");
        let valid = if valid_path.exists() {
            group_variants(read_variants(&valid_path)?)
        } else {
            Vec::new()
        };
        Ok(Dataset {
            manifest,
            train,
            valid,
        })
    }

    pub fn from_groups(train: Vec<VariantGroup>, valid: Vec<VariantGroup>) -> Self {
        Dataset {
            manifest: KvFile::new(),
            train,
            valid,
        }
    }
}

/// Original dialogues of `groups`, in order.
pub fn originals(groups: &[VariantGroup]) -> Result<Corpus> {
    Corpus::new(groups.iter().filter_map(VariantGroup::original).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dialogue(id: &str, rounds: usize) -> Dialogue {
        let texts: Vec<String> = (0..2 * rounds).map(|t| format!("{id} turn {t}")).collect();
        Dialogue::from_texts(id, &texts).unwrap()
    }

    fn corpus(n_dialogues: usize, rounds: usize) -> Corpus {
        Corpus::new((0..n_dialogues).map(|i| dialogue(&format!("d{i}"), rounds)).collect()).unwrap()
    }

    #[test]
    fn reference_score_examples() {
        assert_eq!(reference_score(8, 4).unwrap().value(), 0.5);
        assert_eq!(reference_score(8, 5).unwrap().value(), 0.375);
        assert_eq!(reference_score(5, 0).unwrap().value(), 1.0);
        assert!(reference_score(3, 4).is_err());
        assert!(reference_score(0, 0).is_err());
    }

    #[test]
    fn count_variants_examples() {
        assert_eq!(count_variants(2, 1).unwrap(), 2);
        assert_eq!(count_variants(4, 2).unwrap(), 6);
        assert_eq!(count_variants(9, 0).unwrap(), 1);
        assert_eq!(count_variants(27, 13).unwrap(), 20_058_300);
        assert!(count_variants(2, 3).is_err());
    }

    #[test]
    fn subsets_are_lexicographic_and_complete() {
        let s = all_subsets(4, 2);
        assert_eq!(s, vec![vec![1, 2], vec![1, 3], vec![1, 4], vec![2, 3], vec![2, 4], vec![3, 4]]);
        assert_eq!(all_subsets(3, 0), vec![Vec::<usize>::new()]);
        assert_eq!(all_subsets(3, 3), vec![vec![1, 2, 3]]);
    }

    #[test]
    fn level_zero_is_the_original() {
        let c = corpus(3, 3);
        let pool = ReplacementPool::from_corpus(&c);
        let d = &c.dialogues()[0];
        let v = generate_variants(d, 0, &pool, 1, 5, ReplaceUnit::ResponderTurn).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].turns, d.turns());
        assert_eq!(v[0].score, 1.0);
        assert!(v[0].replaced_rounds.is_empty());
    }

    #[test]
    fn two_rounds_one_replacement_covers_both_subsets() {
        let c = corpus(3, 2);
        let pool = ReplacementPool::from_corpus(&c);
        let v = generate_variants(&c.dialogues()[0], 1, &pool, 7, 10, ReplaceUnit::ResponderTurn).unwrap();
        let rounds: Vec<_> = v.iter().map(|v| v.replaced_rounds.clone()).collect();
        assert_eq!(rounds, vec![vec![1], vec![2]]);
        assert!(v.iter().all(|v| v.score == 0.5));
    }

    #[test]
    fn capped_generation_is_seed_deterministic() {
        let c = corpus(6, 4);
        let pool = ReplacementPool::from_corpus(&c);
        let d = &c.dialogues()[2];
        let a = generate_variants(d, 2, &pool, 7, 3, ReplaceUnit::ResponderTurn).unwrap();
        let b = generate_variants(d, 2, &pool, 7, 3, ReplaceUnit::ResponderTurn).unwrap();
        let other = generate_variants(d, 2, &pool, 8, 3, ReplaceUnit::ResponderTurn).unwrap();
        assert_eq!(a.len(), 3);
        let json = |v: &[PerturbedVariant]| serde_json::to_string(v).unwrap();
        assert_eq!(json(&a), json(&b));
        assert_ne!(json(&a), json(&other));
    }

    #[test]
    fn sources_never_come_from_the_base_dialogue() {
        let c = corpus(2, 3);
        let pool = ReplacementPool::from_corpus(&c);
        for d in c.dialogues() {
            for level in 1..=3 {
                for v in generate_variants(d, level, &pool, 3, 8, ReplaceUnit::WholeRound).unwrap() {
                    assert_eq!(v.sources.len(), 2 * level);
                    assert!(v.sources.iter().all(|s| s.dialogue_id != d.id()));
                }
            }
        }
    }

    #[test]
    fn whole_round_replaces_both_slots() {
        let c = corpus(4, 2);
        let pool = ReplacementPool::from_corpus(&c);
        let d = &c.dialogues()[0];
        let v = generate_variants(d, 2, &pool, 1, 1, ReplaceUnit::WholeRound).unwrap();
        assert!(v[0].turns.iter().zip(d.turns()).all(|(a, b)| a.text != b.text));
        assert!(v[0].turns.iter().zip(d.turns()).all(|(a, b)| a.speaker == b.speaker));
    }

    #[test]
    fn empty_pool_and_zero_cap_are_errors() {
        let c = corpus(1, 2);
        let pool = ReplacementPool::from_corpus(&c);
        let d = &c.dialogues()[0];
        assert!(matches!(
            generate_variants(d, 1, &pool, 0, 3, ReplaceUnit::ResponderTurn),
            Err(Error::EmptyPool(_))
        ));
        assert!(generate_variants(d, 1, &pool, 0, 0, ReplaceUnit::ResponderTurn).is_err());
        assert!(generate_variants(d, 0, &pool, 0, 3, ReplaceUnit::ResponderTurn).is_ok());
    }

    #[test]
    fn large_dialogues_use_rejection_sampling() {
        let c = corpus(3, 27);
        let pool = ReplacementPool::from_corpus(&c);
        let v = generate_variants(&c.dialogues()[0], 13, &pool, 5, 8, ReplaceUnit::ResponderTurn).unwrap();
        assert_eq!(v.len(), 8);
        let distinct: BTreeSet<_> = v.iter().map(|v| v.replaced_rounds.clone()).collect();
        assert_eq!(distinct.len(), 8);
        assert!(v.iter().all(|v| v.replaced_rounds.len() == 13));
    }

    #[test]
    fn build_dataset_counts() {
        let dir = tempfile::tempdir().unwrap();
        let c = corpus(10, 2);
        let cfg = GenerationConfig {
            cap: 10,
            ..Default::default()
        };
        let s = build_dataset(&c, &cfg, dir.path()).unwrap();
        assert_eq!(s.total_records(), 40);
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.train.len(), 10);
        assert!(ds.train.iter().all(|g| g.levels.values().map(Vec::len).sum::<usize>() == 4));

        let cfg1 = GenerationConfig {
            cap: 1,
            ..Default::default()
        };
        let s1 = build_dataset(&c, &cfg1, dir.path()).unwrap();
        assert_eq!(s1.total_records(), 10 * 3);
    }

    #[test]
    fn build_dataset_is_reproducible() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let c = corpus(10, 3);
        let cfg = GenerationConfig {
            seed: 42,
            cap: 2,
            valid_fraction: 0.3,
            ..Default::default()
        };
        let sa = build_dataset(&c, &cfg, a.path()).unwrap();
        let sb = build_dataset(&c, &cfg, b.path()).unwrap();
        assert_eq!(sa.manifest, sb.manifest);
        for name in ["train.jsonl", "valid.jsonl", "manifest.txt"] {
            assert_eq!(
                std::fs::read(a.path().join(name)).unwrap(),
                std::fs::read(b.path().join(name)).unwrap()
            );
        }
    }

    #[test]
    fn single_dialogue_corpus_cannot_be_perturbed() {
        let dir = tempfile::tempdir().unwrap();
        let c = corpus(1, 2);
        let err = build_dataset(&c, &GenerationConfig::default(), dir.path()).unwrap_err();
        assert!(matches!(err, Error::EmptyPool(_)));
        let only_zero = GenerationConfig {
            levels: "0".parse().unwrap(),
            ..Default::default()
        };
        assert!(build_dataset(&c, &only_zero, dir.path()).is_ok());
    }

    #[test]
    fn level_selection_parses() {
        assert_eq!("all".parse::<LevelSelection>().unwrap(), LevelSelection::All);
        assert_eq!(
            "0, 2".parse::<LevelSelection>().unwrap().to_string(),
            "0,2"
        );
        assert!("x".parse::<LevelSelection>().is_err());
    }
}
