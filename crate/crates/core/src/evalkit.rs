//! Evaluation: correlation with human ratings, permutation significance,
//! replacement-level ranking accuracy and the turn/dialogue protocol adapters.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Dialogue, Speaker, Turn};
use crate::perturb::{replace_rounds, ReplaceUnit, ReplacementPool};
use crate::{par, seed, Error, Result};

fn check_inputs(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Domain(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::Degenerate("need at least 2 pairs".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite value".into()));
    }
    Ok(())
}

/// Product-moment correlation. Zero variance in either input is an error.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_inputs(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; ties share the average of the ranks they span.
pub fn fractional_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_inputs(x, y)?;
    pearson(&fractional_ranks(x), &fractional_ranks(y))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    Pearson,
    Spearman,
}

pub const DEFAULT_PERMUTATION_TRIALS: usize = 10_000;

/// Two-sided permutation p-value, `(hits + 1) / (trials + 1)`, where a hit is
/// a shuffle of `y` whose |statistic| reaches the observed one.
pub fn permutation_p_value(x: &[f64], y: &[f64], statistic: Statistic, trials: usize, seed: u64) -> Result<f64> {
    if trials == 0 {
        return Err(Error::Config("permutation test needs trials >= 1".into()));
    }
    let (x, mut y) = match statistic {
        Statistic::Pearson => (x.to_vec(), y.to_vec()),
        Statistic::Spearman => {
            check_inputs(x, y)?;
            (fractional_ranks(x), fractional_ranks(y))
        }
    };
    let observed = pearson(&x, &y)?.abs();
    let mut rng = seed::rng(seed, &[b"permutation"]);
    let mut hits = 0usize;
    for _ in 0..trials {
        y.shuffle(&mut rng);
        if pearson(&x, &y)?.abs() >= observed - 1e-12 {
            hits += 1;
        }
    }
    Ok((hits + 1) as f64 / (trials + 1) as f64)
}

// --- replacement-level ranking ------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct HarnessConfig {
    pub seed: u64,
    pub triples_per_dialogue: usize,
    pub replace_unit: ReplaceUnit,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            seed: 0,
            triples_per_dialogue: 1,
            replace_unit: ReplaceUnit::ResponderTurn,
        }
    }
}

/// Original, one replaced round, and `k` replaced rounds with `k` uniform in `2..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Triple {
    pub rep0: Dialogue,
    pub rep1: Dialogue,
    pub rep2: Dialogue,
    pub rep2_count: usize,
}

pub fn build_triple(
    d: &Dialogue,
    pool: &ReplacementPool,
    cfg: &HarnessConfig,
    index_in_dialogue: usize,
) -> Result<Triple> {
    let n = d.n_rounds();
    if n < 2 {
        return Err(Error::Domain(format!("dialogue {} has fewer than 2 rounds", d.id())));
    }
    let mut rng = seed::rng(
        cfg.seed,
        &[b"rank-triple", d.id().as_bytes(), &(index_in_dialogue as u64).to_le_bytes()],
    );
    let one = [rng.gen_range(1..=n)];
    let k = rng.gen_range(2..=n);
    let mut many: Vec<usize> = index::sample(&mut rng, n, k).into_iter().map(|r| r + 1).collect();
    many.sort_unstable();
    let (t1, _) = replace_rounds(d, &one, cfg.replace_unit, pool, &mut rng)?;
    let (t2, _) = replace_rounds(d, &many, cfg.replace_unit, pool, &mut rng)?;
    let id = |tag: &str| format!("{}#{tag}.{index_in_dialogue}", d.id());
    Ok(Triple {
        rep0: d.with_id(id("rep0")),
        rep1: Dialogue::new(id("rep1"), t1)?,
        rep2: Dialogue::new(id("rep2"), t2)?,
        rep2_count: k,
    })
}

/// Which of the three levels sit at their ground-truth rank position
/// (Rep-0 first, Rep-1 second, Rep-2 third). Any tie involving a level makes
/// that level incorrect.
pub fn positional_correctness(scores: [f64; 3]) -> [bool; 3] {
    let mut out = [false; 3];
    for (i, slot) in out.iter_mut().enumerate() {
        let others = (0..3).filter(|&j| j != i).map(|j| scores[j]);
        let mut greater = 0;
        let mut tied = false;
        for s in others {
            if s > scores[i] {
                greater += 1;
            } else if s == scores[i] {
                tied = true;
            }
        }
        *slot = !tied && greater == i;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub rep0: f64,
    pub rep1: f64,
    pub rep2: f64,
    pub overall: f64,
    pub n_triples: usize,
    pub skipped_dialogues: usize,
}

impl RankReport {
    pub fn table(&self) -> String {
        format!(
            "{:<8} {:>8}\n{:<8} {:>8.4}\n{:<8} {:>8.4}\n{:<8} {:>8.4}\n{:<8} {:>8.4}\n{:<8} {:>8}\n",
            "level", "accuracy", "Rep-0", self.rep0, "Rep-1", self.rep1, "Rep-2", self.rep2, "overall",
            self.overall, "triples", self.n_triples
        )
    }
}

/// Scores one triple per dialogue (or `triples_per_dialogue`) and reports
/// per-level positional accuracy. Dialogues with fewer than two rounds are
/// skipped.
pub fn rank_accuracy<F>(score: F, corpus: &Corpus, pool: &ReplacementPool, cfg: &HarnessConfig) -> Result<RankReport>
where
    F: Fn(&Dialogue) -> Result<f64> + Sync + Send,
{
    let eligible: Vec<&Dialogue> = corpus.dialogues().iter().filter(|d| d.n_rounds() >= 2).collect();
    let skipped = corpus.len() - eligible.len();
    if skipped > 0 {
        log::warn!("rank accuracy: skipped {skipped} dialogues with fewer than 2 rounds");
    }
    let jobs: Vec<(&Dialogue, usize)> = eligible
        .iter()
        .flat_map(|d| (0..cfg.triples_per_dialogue).map(move |t| (*d, t)))
        .collect();
    let results = par::map(&jobs, |(d, t)| -> Result<[bool; 3]> {
        let tr = build_triple(d, pool, cfg, *t)?;
        let s = [score(&tr.rep0)?, score(&tr.rep1)?, score(&tr.rep2)?];
        Ok(positional_correctness(s))
    });
    let mut correct = [0usize; 3];
    for r in results {
        for (c, ok) in correct.iter_mut().zip(r?) {
            *c += usize::from(ok);
        }
    }
    let n = jobs.len();
    if n == 0 {
        return Err(Error::Degenerate("no dialogue has at least 2 rounds".into()));
    }
    let acc = correct.map(|c| c as f64 / n as f64);
    Ok(RankReport {
        rep0: acc[0],
        rep1: acc[1],
        rep2: acc[2],
        overall: (acc[0] + acc[1] + acc[2]) / 3.0,
        n_triples: n,
        skipped_dialogues: skipped,
    })
}

/// Reference-quality oracle: the fraction of turns identical to the original
/// dialogue whose id prefixes the variant id (`<id>#...`).
pub fn oracle_scorer(corpus: &Corpus) -> impl Fn(&Dialogue) -> Result<f64> + Sync + Send + '_ {
    let by_id: HashMap<&str, &Dialogue> = corpus.dialogues().iter().map(|d| (d.id(), d)).collect();
    move |d: &Dialogue| {
        let base_id = d.id().split('#').next().unwrap_or_default();
        let base = by_id
            .get(base_id)
            .ok_or_else(|| Error::Domain(format!("oracle has no original for {}", d.id())))?;
        let same = base.turns().iter().zip(d.turns()).filter(|(a, b)| a == b).count();
        Ok(same as f64 / d.turns().len() as f64)
    }
}

// --- correlation with human ratings -------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub id: String,
    /// Defaults to `overall` when absent.
    #[serde(default = "default_aspect")]
    pub aspect: String,
    #[serde(alias = "score")]
    pub human_score: f64,
}

fn default_aspect() -> String {
    "overall".to_owned()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub id: String,
    #[serde(alias = "human_score")]
    pub score: f64,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn read_ratings(path: &Path) -> Result<Vec<RatingRecord>> {
    read_jsonl(path)
}

pub fn read_model_scores(path: &Path) -> Result<Vec<ModelScore>> {
    read_jsonl(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub aspect: String,
    pub n_pairs: usize,
    pub pearson_r: Option<f64>,
    pub spearman_rho: Option<f64>,
    pub p_value_pearson: Option<f64>,
    pub p_value_spearman: Option<f64>,
    /// Set when the aspect could not be evaluated.
    pub degenerate: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub rows: Vec<CorrelationRow>,
}

impl CorrelationReport {
    pub fn row(&self, aspect: &str) -> Option<&CorrelationRow> {
        self.rows.iter().find(|r| r.aspect == aspect)
    }

    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_owned(), |v| format!("{v:.4}"));
        let mut out = format!(
            "{:<20} {:>7} {:>9} {:>9} {:>9} {:>9}\n",
            "aspect", "pairs", "pearson", "p", "spearman", "p"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<20} {:>7} {:>9} {:>9} {:>9} {:>9}{}\n",
                r.aspect,
                r.n_pairs,
                fmt(r.pearson_r),
                fmt(r.p_value_pearson),
                fmt(r.spearman_rho),
                fmt(r.p_value_spearman),
                r.degenerate.as_ref().map(|m| format!("  ({m})")).unwrap_or_default()
            ));
        }
        out
    }
}

/// Joins model scores with human ratings per aspect, in order of first
/// appearance of each aspect.
pub fn correlate_with_human(
    model: &[ModelScore],
    ratings: &[RatingRecord],
    trials: usize,
    seed: u64,
) -> Result<CorrelationReport> {
    let mut scores: HashMap<&str, f64> = HashMap::with_capacity(model.len());
    for m in model {
        if scores.insert(m.id.as_str(), m.score).is_some() {
            return Err(Error::Domain(format!("duplicate model score for id {}", m.id)));
        }
    }
    let mut seen = BTreeSet::new();
    let mut aspects: Vec<&str> = Vec::new();
    for r in ratings {
        if !seen.insert((r.id.as_str(), r.aspect.as_str())) {
            return Err(Error::Domain(format!("duplicate rating for ({}, {})", r.id, r.aspect)));
        }
        if !aspects.contains(&r.aspect.as_str()) {
            aspects.push(&r.aspect);
        }
    }
    let rows = aspects
        .into_iter()
        .map(|aspect| {
            let (x, y): (Vec<f64>, Vec<f64>) = ratings
                .iter()
                .filter(|r| r.aspect == aspect)
                .filter_map(|r| scores.get(r.id.as_str()).map(|&s| (s, r.human_score)))
                .unzip();
            let mut row = CorrelationRow {
                aspect: aspect.to_owned(),
                n_pairs: x.len(),
                pearson_r: None,
                spearman_rho: None,
                p_value_pearson: None,
                p_value_spearman: None,
                degenerate: None,
            };
            let aspect_seed = seed::derive(seed, &[aspect.as_bytes()]);
            let computed = (|| -> Result<(f64, f64, f64, f64)> {
                Ok((
                    pearson(&x, &y)?,
                    spearman(&x, &y)?,
                    permutation_p_value(&x, &y, Statistic::Pearson, trials, aspect_seed)?,
                    permutation_p_value(&x, &y, Statistic::Spearman, trials, aspect_seed)?,
                ))
            })();
            match computed {
                Ok((r, rho, pr, ps)) => {
                    row.pearson_r = Some(r);
                    row.spearman_rho = Some(rho);
                    row.p_value_pearson = Some(pr);
                    row.p_value_spearman = Some(ps);
                }
                Err(e) => row.degenerate = Some(e.to_string()),
            }
            row
        })
        .collect();
    Ok(CorrelationReport { rows })
}

// --- protocol adapters --------------------------------------------------------

/// Dialogue-level score from a pair-level scorer: the mean score of every
/// context-response prefix (rounds `1..=r`) scored as a standalone dialogue.
pub fn dialogue_score_via_pairs<F>(score: F, d: &Dialogue) -> Result<f64>
where
    F: Fn(&Dialogue) -> Result<f64>,
{
    let n = d.n_rounds();
    let mut total = 0.0;
    for r in 1..=n {
        let prefix = Dialogue::new(format!("{}@{r}", d.id()), d.turns()[..2 * r].to_vec())?;
        total += score(&prefix)?;
    }
    Ok(total / n as f64)
}

/// A context-response pair as a one-round dialogue.
pub fn pair_as_dialogue(id: impl Into<String>, context: &str, response: &str) -> Result<Dialogue> {
    Dialogue::new(
        id,
        vec![Turn::new(Speaker::A, context), Turn::new(Speaker::B, response)],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!(matches!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::Degenerate(_))));
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn spearman_examples() {
        let x = [0.1, 0.5, 2.0, 7.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| v.exp()).collect();
        assert!((spearman(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let rev: Vec<f64> = x.iter().rev().copied().collect();
        assert!((spearman(&x, &rev).unwrap() + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!(matches!(spearman(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(fractional_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn permutation_examples() {
        let x: Vec<f64> = (0..20).map(f64::from).collect();
        let p = permutation_p_value(&x, &x, Statistic::Pearson, 10_000, 1).unwrap();
        assert!(p <= 0.001, "{p}");
        assert!(permutation_p_value(&x, &x, Statistic::Spearman, 0, 1).is_err());
    }

    #[test]
    fn positional_rules() {
        assert_eq!(positional_correctness([0.9, 0.5, 0.1]), [true, true, true]);
        assert_eq!(positional_correctness([0.5, 0.5, 0.5]), [false, false, false]);
        assert_eq!(positional_correctness([0.1, 0.5, 0.9]), [false, true, false]);
        assert_eq!(positional_correctness([0.9, 0.1, 0.1]), [true, false, false]);
    }

    #[test]
    fn positional_accuracy_of_all_orderings_is_one_third() {
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let mut hits = [0; 3];
        for p in perms {
            let s = p.map(|r| 3.0 - r as f64);
            for (h, ok) in hits.iter_mut().zip(positional_correctness(s)) {
                *h += usize::from(ok);
            }
        }
        assert_eq!(hits, [2, 2, 2]);
    }

    #[test]
    fn pair_adapter_on_one_round_is_identity() {
        let d = pair_as_dialogue("p", "how are you", "fine").unwrap();
        let s = |x: &Dialogue| Ok(x.turns().iter().map(|t| t.text.len()).sum::<usize>() as f64);
        assert_eq!(dialogue_score_via_pairs(s, &d).unwrap(), s(&d).unwrap());
        let long = Dialogue::from_texts("l", &["a", "b", "c", "d", "e", "f"]).unwrap();
        assert_eq!(dialogue_score_via_pairs(|_| Ok(0.5), &long).unwrap(), 0.5);
    }
}
