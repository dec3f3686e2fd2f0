//! Multi-level contrastive losses.
//!
//! For one base dialogue with `n` rounds, the predicted scores of its
//! variants are grouped by replacement level `j = 0..=n`. Each level has a
//! centroid (mean score). The separation loss asks every better level's
//! centroid to beat every worse level's by `(l - j) * lambda`; the compactness
//! loss keeps each score within `mu` of its level centroid. The ranking (mlr)
//! loss averages their sum over dialogues. The fine stage adds a consistency
//! term between two dropout passes.
//!
//! Gradients are returned with respect to the raw variant scores, flowing
//! through the centroids. At a hinge kink the zero branch is taken.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::seed::{self, Rng};
use crate::{Error, Result};

pub const DEFAULT_MU: f64 = 0.1;

/// Margin unit for an `n`-round dialogue: `1 / n`, the spacing of its
/// reference scores (`n + 1` levels).
pub fn lambda_for(n: usize) -> Result<f64> {
    if n < 1 {
        return Err(Error::Domain("lambda needs n >= 1".into()));
    }
    Ok(1.0 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginConfig {
    /// Fixed margin unit; `None` uses [`lambda_for`] per dialogue.
    pub lambda: Option<f64>,
    pub mu: f64,
    /// Use the hinge exactly as typeset, `max(0, w*lambda + S_j - S_l)`.
    /// Only for comparison; it is not minimized by correctly ordered scores.
    pub strict_paper_eq1: bool,
}

impl Default for MarginConfig {
    fn default() -> Self {
        MarginConfig {
            lambda: None,
            mu: DEFAULT_MU,
            strict_paper_eq1: false,
        }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.lambda {
            if l.is_nan() || l <= 0.0 {
                return Err(Error::Config("lambda must be > 0".into()));
            }
        }
        if self.mu.is_nan() || self.mu < 0.0 {
            return Err(Error::Config("mu must be >= 0".into()));
        }
        Ok(())
    }

    pub fn lambda(&self, n: usize) -> Result<f64> {
        match self.lambda {
            Some(l) => Ok(l),
            None => lambda_for(n),
        }
    }
}

/// Scores of one replacement level and their centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelGroup {
    pub level: usize,
    pub scores: Vec<f64>,
    pub centroid: f64,
}

impl LevelGroup {
    pub fn new(level: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Domain(format!("level {level} has no scores")));
        }
        let centroid = scores.iter().sum::<f64>() / scores.len() as f64;
        Ok(LevelGroup {
            level,
            scores,
            centroid,
        })
    }

    pub fn k(&self) -> usize {
        self.scores.len()
    }
}

/// Hinge argument for the pair `(j, l)`, `j < l`.
#[inline]
fn sep_arg(c: &[f64], j: usize, l: usize, lambda: f64, strict: bool) -> f64 {
    let margin = (l - j) as f64 * lambda;
    if strict {
        margin + c[j] - c[l]
    } else {
        margin - (c[j] - c[l])
    }
}

/// Separation loss over centroids indexed by level `0..=n`.
pub fn separation_loss(centroids: &[f64], lambda: f64) -> Result<f64> {
    separation_loss_with(centroids, lambda, false)
}

pub fn separation_loss_with(centroids: &[f64], lambda: f64, strict: bool) -> Result<f64> {
    if centroids.len() < 2 {
        return Err(Error::Domain("separation needs centroids for levels 0..=n, n >= 1".into()));
    }
    let n = centroids.len() - 1;
    let mut total = 0.0;
    for j in 0..n {
        for l in j + 1..=n {
            total += sep_arg(centroids, j, l, lambda, strict).max(0.0);
        }
    }
    Ok(total)
}

/// Gradient of the separation loss with respect to each centroid.
pub fn separation_grad(centroids: &[f64], lambda: f64, strict: bool) -> Vec<f64> {
    let n = centroids.len().saturating_sub(1);
    let mut g = vec![0.0; centroids.len()];
    for j in 0..n {
        for l in j + 1..=n {
            if sep_arg(centroids, j, l, lambda, strict) > 0.0 {
                let s = if strict { 1.0 } else { -1.0 };
                g[j] += s;
                g[l] -= s;
            }
        }
    }
    g
}

pub fn compactness_loss(groups: &[LevelGroup], mu: f64) -> f64 {
    groups
        .iter()
        .flat_map(|g| g.scores.iter().map(move |s| ((g.centroid - s).abs() - mu).max(0.0)))
        .sum()
}

/// Gradient of the compactness loss with respect to every raw score.
pub fn compactness_grad(groups: &[LevelGroup], mu: f64) -> Vec<Vec<f64>> {
    groups
        .iter()
        .map(|g| {
            let k = g.k() as f64;
            let mut grad = vec![0.0; g.k()];
            for (i, s) in g.scores.iter().enumerate() {
                let diff = g.centroid - s;
                if diff.abs() - mu > 0.0 {
                    let sign = diff.signum();
                    for gj in grad.iter_mut() {
                        *gj += sign / k;
                    }
                    grad[i] -= sign;
                }
            }
            grad
        })
        .collect()
}

/// Separation and compactness losses of one dialogue, with gradients w.r.t.
/// the raw scores (`grad[level][k]`).
#[derive(Debug, Clone, PartialEq)]
pub struct DialogueLoss {
    pub sep: f64,
    pub com: f64,
    pub grad: Vec<Vec<f64>>,
}

/// `scores[j]` holds the predicted scores of the level-`j` variants, `j = 0..=n`.
pub fn dialogue_loss(scores: &[Vec<f64>], cfg: &MarginConfig) -> Result<DialogueLoss> {
    if scores.len() < 2 {
        return Err(Error::Domain("a dialogue needs levels 0..=n with n >= 1".into()));
    }
    let n = scores.len() - 1;
    let groups = scores
        .iter()
        .enumerate()
        .map(|(j, s)| LevelGroup::new(j, s.clone()))
        .collect::<Result<Vec<_>>>()?;
    let centroids: Vec<f64> = groups.iter().map(|g| g.centroid).collect();
    let lambda = cfg.lambda(n)?;
    let sep = separation_loss_with(&centroids, lambda, cfg.strict_paper_eq1)?;
    let com = compactness_loss(&groups, cfg.mu);

    let dc = separation_grad(&centroids, lambda, cfg.strict_paper_eq1);
    let mut grad = compactness_grad(&groups, cfg.mu);
    for (j, g) in grad.iter_mut().enumerate() {
        let share = dc[j] / g.len() as f64;
        for v in g.iter_mut() {
            *v += share;
        }
    }
    Ok(DialogueLoss { sep, com, grad })
}

/// Mean over dialogues of `sep_m + com_m`.
pub fn mlr_loss(per_dialogue: &[(f64, f64)]) -> Result<f64> {
    if per_dialogue.is_empty() {
        return Err(Error::Domain("mlr loss over an empty batch".into()));
    }
    let sum: f64 = per_dialogue.iter().map(|(s, c)| s + c).sum();
    Ok(sum / per_dialogue.len() as f64)
}

/// Mean squared difference between two stochastic passes over the same inputs.
pub fn rdrop_loss(first: &[f64], second: &[f64]) -> Result<f64> {
    check_pair(first, second)?;
    let sum: f64 = first.iter().zip(second).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / first.len() as f64)
}

pub fn rdrop_grad(first: &[f64], second: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_pair(first, second)?;
    let n = first.len() as f64;
    let g1: Vec<f64> = first.iter().zip(second).map(|(a, b)| 2.0 * (a - b) / n).collect();
    let g2 = g1.iter().map(|g| -g).collect();
    Ok((g1, g2))
}

fn check_pair(first: &[f64], second: &[f64]) -> Result<()> {
    if first.len() != second.len() {
        return Err(Error::Domain(format!(
            "r-drop passes differ in length: {} vs {}",
            first.len(),
            second.len()
        )));
    }
    if first.is_empty() {
        return Err(Error::Domain("r-drop over an empty batch".into()));
    }
    Ok(())
}

pub fn final_loss(mlr: f64, drop: f64) -> f64 {
    mlr + drop
}

/// Batch-level loss values, as logged by the trainer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sep: f64,
    pub com: f64,
    pub mlr: f64,
    pub drop: f64,
    pub final_: f64,
}

// --- gradient verification ---------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Separation,
    Compactness,
    RDrop,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Separation, LossKind::Compactness, LossKind::RDrop];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Separation => "separation",
            LossKind::Compactness => "compactness",
            LossKind::RDrop => "rdrop",
        }
    }

    /// Largest relative error accepted by [`gradcheck`].
    pub fn bound(self) -> f64 {
        match self {
            LossKind::Separation | LossKind::Compactness => 1e-4,
            LossKind::RDrop => 1e-6,
        }
    }
}

pub const FD_STEP: f64 = 1e-5;
/// Instances with a hinge argument closer than this to zero are resampled,
/// so a central difference never straddles a kink.
pub const KINK_GUARD: f64 = 1e-3;
pub const REL_FLOOR: f64 = 1e-6;

/// A flat vector of scores plus the layout needed to evaluate a loss on it.
#[derive(Debug, Clone)]
struct Instance {
    kind: LossKind,
    x: Vec<f64>,
    /// Per-level sizes (margin losses) or the batch size twice (r-drop).
    sizes: Vec<usize>,
    mu: f64,
}

impl Instance {
    fn unflatten(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.sizes.len());
        let mut at = 0;
        for &k in &self.sizes {
            out.push(x[at..at + k].to_vec());
            at += k;
        }
        out
    }

    fn margin_cfg(&self) -> MarginConfig {
        MarginConfig {
            mu: self.mu,
            ..Default::default()
        }
    }

    fn loss(&self, x: &[f64]) -> f64 {
        let parts = self.unflatten(x);
        match self.kind {
            LossKind::Separation => dialogue_loss(&parts, &self.margin_cfg()).unwrap().sep,
            LossKind::Compactness => dialogue_loss(&parts, &self.margin_cfg()).unwrap().com,
            LossKind::RDrop => rdrop_loss(&parts[0], &parts[1]).unwrap(),
        }
    }

    fn grad(&self) -> Vec<f64> {
        let parts = self.unflatten(&self.x);
        match self.kind {
            LossKind::Separation => {
                let groups: Vec<LevelGroup> = parts
                    .iter()
                    .enumerate()
                    .map(|(j, s)| LevelGroup::new(j, s.clone()).unwrap())
                    .collect();
                let c: Vec<f64> = groups.iter().map(|g| g.centroid).collect();
                let lambda = lambda_for(c.len() - 1).unwrap();
                let dc = separation_grad(&c, lambda, false);
                groups
                    .iter()
                    .flat_map(|g| std::iter::repeat_n(dc[g.level] / g.k() as f64, g.k()))
                    .collect()
            }
            LossKind::Compactness => {
                let groups: Vec<LevelGroup> = parts
                    .iter()
                    .enumerate()
                    .map(|(j, s)| LevelGroup::new(j, s.clone()).unwrap())
                    .collect();
                compactness_grad(&groups, self.mu).concat()
            }
            LossKind::RDrop => {
                let (a, b) = rdrop_grad(&parts[0], &parts[1]).unwrap();
                [a, b].concat()
            }
        }
    }

    /// Smallest |hinge argument| at this point.
    fn kink_distance(&self) -> f64 {
        let parts = self.unflatten(&self.x);
        match self.kind {
            LossKind::RDrop => f64::INFINITY,
            LossKind::Separation | LossKind::Compactness => {
                let groups: Vec<LevelGroup> = parts
                    .iter()
                    .enumerate()
                    .map(|(j, s)| LevelGroup::new(j, s.clone()).unwrap())
                    .collect();
                let c: Vec<f64> = groups.iter().map(|g| g.centroid).collect();
                let mut best = f64::INFINITY;
                if self.kind == LossKind::Separation {
                    let n = c.len() - 1;
                    let lambda = lambda_for(n).unwrap();
                    for j in 0..n {
                        for l in j + 1..=n {
                            best = best.min(sep_arg(&c, j, l, lambda, false).abs());
                        }
                    }
                } else {
                    for g in &groups {
                        for s in &g.scores {
                            let d = g.centroid - s;
                            best = best.min(d.abs()).min((d.abs() - self.mu).abs());
                        }
                    }
                }
                best
            }
        }
    }
}

fn sample_instance(kind: LossKind, rng: &mut Rng) -> Instance {
    loop {
        let (sizes, mu) = match kind {
            LossKind::RDrop => {
                let n = rng.gen_range(1..=12);
                (vec![n, n], 0.0)
            }
            _ => {
                let n = rng.gen_range(1..=5);
                let sizes = (0..=n).map(|_| rng.gen_range(1..=4)).collect();
                (sizes, rng.gen_range(0.0..0.2))
            }
        };
        let total: usize = sizes.iter().sum();
        let x = (0..total).map(|_| rng.gen_range(0.0..1.0)).collect();
        let inst = Instance { kind, x, sizes, mu };
        if inst.kink_distance() >= KINK_GUARD {
            return inst;
        }
    }
}

/// Max relative error between analytic and central-difference gradients:
/// the largest componentwise difference over the larger gradient's max-norm
/// (floored at [`REL_FLOOR`]). Scaling by the whole gradient keeps exactly
/// cancelling components from turning round-off into a large ratio.
pub fn gradcheck_instance(kind: LossKind, rng: &mut Rng) -> f64 {
    let inst = sample_instance(kind, rng);
    let analytic = inst.grad();
    let mut x = inst.x.clone();
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + FD_STEP;
        let up = inst.loss(&x);
        x[i] = orig - FD_STEP;
        let down = inst.loss(&x);
        x[i] = orig;
        numeric.push((up - down) / (2.0 * FD_STEP));
    }
    let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let scale = max_abs(&analytic).max(max_abs(&numeric)).max(REL_FLOOR);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, b)| (a - b).abs() / scale)
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub loss: &'static str,
    pub trials: usize,
    pub max_rel_error: f64,
    pub bound: f64,
    pub passed: bool,
}

pub fn gradcheck(kind: LossKind, trials: usize, seed: u64) -> GradcheckReport {
    let mut rng = seed::rng(seed, &[b"gradcheck", kind.name().as_bytes()]);
    let max_rel_error = (0..trials)
        .map(|_| gradcheck_instance(kind, &mut rng))
        .fold(0.0, f64::max);
    GradcheckReport {
        loss: kind.name(),
        trials,
        max_rel_error,
        bound: kind.bound(),
        passed: max_rel_error < kind.bound(),
    }
}
