//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export takes and returns JSON strings, so the same functions are
//! callable (and tested) natively.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use dialeval::corpus::{Corpus, Dialogue};
use dialeval::evalkit::{self, Statistic};
use dialeval::mlcl::{self, LevelGroup, MarginConfig};
use dialeval::perturb::{self, ReplaceUnit, ReplacementPool};

#[derive(Debug, Deserialize)]
pub struct PreviewRequest {
    /// Corpus as JSONL text.
    pub corpus: String,
    /// Dialogue to perturb; the first one when absent.
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_cap")]
    pub cap: usize,
    #[serde(default)]
    pub replace_unit: Option<String>,
}

fn default_cap() -> usize {
    perturb::DEFAULT_CAP
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PreviewVariant {
    pub level: usize,
    pub score: f64,
    pub replaced_rounds: Vec<usize>,
    pub turns: Vec<String>,
    /// Per turn: whether the text came from another dialogue.
    pub replaced: Vec<bool>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PreviewLevel {
    pub level: usize,
    pub reference_score: f64,
    pub possible: String,
    pub variants: Vec<PreviewVariant>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Preview {
    pub id: String,
    pub n_rounds: usize,
    pub levels: Vec<PreviewLevel>,
}

pub fn preview(req: &PreviewRequest) -> Result<Preview, String> {
    let corpus = Corpus::parse_jsonl(req.corpus.as_bytes()).map_err(|e| e.to_string())?;
    let d: &Dialogue = match &req.id {
        Some(id) => corpus.get(id).ok_or_else(|| format!("no dialogue with id {id}"))?,
        None => corpus.dialogues().first().ok_or("the corpus is empty")?,
    };
    let unit: ReplaceUnit = match &req.replace_unit {
        Some(u) => u.parse().map_err(|e: dialeval::Error| e.to_string())?,
        None => ReplaceUnit::default(),
    };
    let pool = ReplacementPool::from_corpus(&corpus);
    let n = d.n_rounds();
    let levels = (0..=n)
        .map(|level| {
            let vs = perturb::generate_variants(d, level, &pool, req.seed, req.cap, unit).map_err(|e| e.to_string())?;
            let variants = vs
                .into_iter()
                .map(|v| {
                    let replaced = (0..v.turns.len())
                        .map(|i| slot_replaced(&v.replaced_rounds, unit, i))
                        .collect();
                    PreviewVariant {
                        level,
                        score: v.score,
                        replaced_rounds: v.replaced_rounds,
                        turns: v.turns.into_iter().map(|t| t.text).collect(),
                        replaced,
                    }
                })
                .collect();
            Ok(PreviewLevel {
                level,
                reference_score: perturb::reference_score(n, level).map_err(|e| e.to_string())?.value(),
                possible: perturb::count_variants(n, level).map_err(|e| e.to_string())?.to_string(),
                variants,
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    Ok(Preview {
        id: d.id().to_owned(),
        n_rounds: n,
        levels,
    })
}

fn slot_replaced(rounds: &[usize], unit: ReplaceUnit, turn: usize) -> bool {
    let round = turn / 2 + 1;
    rounds.contains(&round) && (unit == ReplaceUnit::WholeRound || turn % 2 == 1)
}

#[derive(Debug, Deserialize)]
pub struct LossRequest {
    /// Predicted scores per level, level 0 first.
    pub scores: Vec<Vec<f64>>,
    #[serde(default)]
    pub mu: Option<f64>,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub strict_paper_eq1: bool,
    /// Second-pass scores (flattened in level order) for the consistency term.
    #[serde(default)]
    pub second_pass: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LossReport {
    pub lambda: f64,
    pub mu: f64,
    pub centroids: Vec<f64>,
    pub sep: f64,
    pub com: f64,
    pub mlr: f64,
    pub drop: f64,
    #[serde(rename = "final")]
    pub final_: f64,
    /// d loss / d score, same shape as the input.
    pub grad: Vec<Vec<f64>>,
    /// Separation hinge terms that are active, as `[j, l]` pairs.
    pub active_pairs: Vec<[usize; 2]>,
}

pub fn explore_loss(req: &LossRequest) -> Result<LossReport, String> {
    let cfg = MarginConfig {
        lambda: req.lambda,
        mu: req.mu.unwrap_or(mlcl::DEFAULT_MU),
        strict_paper_eq1: req.strict_paper_eq1,
    };
    cfg.validate().map_err(|e| e.to_string())?;
    let dl = mlcl::dialogue_loss(&req.scores, &cfg).map_err(|e| e.to_string())?;
    let n = req.scores.len() - 1;
    let lambda = cfg.lambda(n).map_err(|e| e.to_string())?;
    let centroids: Vec<f64> = req
        .scores
        .iter()
        .enumerate()
        .map(|(j, s)| LevelGroup::new(j, s.clone()).map(|g| g.centroid))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let mut active_pairs = Vec::new();
    for j in 0..n {
        for l in j + 1..=n {
            let margin = (l - j) as f64 * lambda;
            let arg = if cfg.strict_paper_eq1 {
                margin + centroids[j] - centroids[l]
            } else {
                margin - (centroids[j] - centroids[l])
            };
            if arg > 0.0 {
                active_pairs.push([j, l]);
            }
        }
    }
    let mlr = mlcl::mlr_loss(&[(dl.sep, dl.com)]).map_err(|e| e.to_string())?;
    let drop = match &req.second_pass {
        Some(second) => {
            let first: Vec<f64> = req.scores.iter().flatten().copied().collect();
            mlcl::rdrop_loss(&first, second).map_err(|e| e.to_string())?
        }
        None => 0.0,
    };
    Ok(LossReport {
        lambda,
        mu: cfg.mu,
        centroids,
        sep: dl.sep,
        com: dl.com,
        mlr,
        drop,
        final_: mlcl::final_loss(mlr, drop),
        grad: dl.grad,
        active_pairs,
    })
}

#[derive(Debug, Deserialize)]
pub struct CorrelationRequest {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_trials() -> usize {
    2000
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub n: usize,
    pub pearson: f64,
    pub spearman: f64,
    pub p_pearson: f64,
    pub p_spearman: f64,
    pub ranks_x: Vec<f64>,
    pub ranks_y: Vec<f64>,
}

pub fn correlation(req: &CorrelationRequest) -> Result<CorrelationResult, String> {
    let (x, y) = (&req.x, &req.y);
    let s = |e: dialeval::Error| e.to_string();
    Ok(CorrelationResult {
        n: x.len(),
        pearson: evalkit::pearson(x, y).map_err(s)?,
        spearman: evalkit::spearman(x, y).map_err(s)?,
        p_pearson: evalkit::permutation_p_value(x, y, Statistic::Pearson, req.trials, req.seed).map_err(s)?,
        p_spearman: evalkit::permutation_p_value(x, y, Statistic::Spearman, req.trials, req.seed).map_err(s)?,
        ranks_x: evalkit::fractional_ranks(x),
        ranks_y: evalkit::fractional_ranks(y),
    })
}

fn run<Req, Resp>(input: &str, f: impl FnOnce(&Req) -> Result<Resp, String>) -> Result<String, String>
where
    Req: for<'de> Deserialize<'de>,
    Resp: Serialize,
{
    let req: Req = serde_json::from_str(input).map_err(|e| format!("bad request: {e}"))?;
    let resp = f(&req)?;
    serde_json::to_string(&resp).map_err(|e| e.to_string())
}

pub fn preview_json(request: &str) -> Result<String, String> {
    run(request, preview)
}

pub fn explore_loss_json(request: &str) -> Result<String, String> {
    run(request, explore_loss)
}

pub fn correlation_json(request: &str) -> Result<String, String> {
    run(request, correlation)
}

#[wasm_bindgen(js_name = previewPerturbations)]
pub fn preview_perturbations(request: &str) -> Result<String, JsValue> {
    preview_json(request).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = exploreLoss)]
pub fn explore_loss_js(request: &str) -> Result<String, JsValue> {
    explore_loss_json(request).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = correlate)]
pub fn correlate_js(request: &str) -> Result<String, JsValue> {
    correlation_json(request).map_err(|e| JsValue::from_str(&e))
}
