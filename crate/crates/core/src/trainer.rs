//! Two-stage training.
//!
//! The coarse stage minimizes the multi-level ranking loss alone at
//! `lr_coarse`; the fine stage continues at `lr_fine` and adds the
//! consistency loss between two dropout passes of every variant. Centroids are
//! computed from the variants sampled into the batch, and gradients flow
//! through them.
//!
//! Every random draw (batch order, variant choice, dropout masks) is keyed by
//! `(seed, step, dialogue, level, variant, pass)`, so a run is reproducible
//! regardless of thread count.

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::evalkit::{self, HarnessConfig};
use crate::kv::KvFile;
use crate::mlcl::{self, LossBreakdown, MarginConfig};
use crate::perturb::{self, GenerationConfig, LevelSelection, ReplacementPool, VariantGroup};
use crate::scorer::vocab::DEFAULT_MAX_TYPES;
use crate::scorer::{Checkpoint, EncoderConfig, Encoded, Mode, Scorer, Vocab};
use crate::{par, seed, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Coarse,
    Fine,
    Both,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Coarse => "coarse",
            Stage::Fine => "fine",
            Stage::Both => "both",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coarse" => Ok(Stage::Coarse),
            "fine" => Ok(Stage::Fine),
            "both" => Ok(Stage::Both),
            _ => Err(Error::Config(format!("unknown stage `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Multi-level ranking loss.
    Mlr,
    /// Binary original-vs-replaced cross-entropy (ablation).
    Bce,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Mlr => "mlr",
            Objective::Bce => "bce",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlr" => Ok(Objective::Mlr),
            "bce" => Ok(Objective::Bce),
            _ => Err(Error::Config(format!("unknown objective `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs_per_stage: usize,
    pub batch_dialogues: usize,
    pub variants_per_level_cap: usize,
    pub lr_coarse: f64,
    pub lr_fine: f64,
    pub dropout: f32,
    pub seed: u64,
    pub objective: Objective,
    /// Adds the dropout-consistency term in the fine stage.
    pub rdrop: bool,
    pub mu: f64,
    pub strict_paper_eq1: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Linear learning-rate warmup over the optimizer's first steps; 0 disables.
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// Regenerate the variants of every training dialogue at each epoch
    /// instead of reusing the materialized dataset.
    pub resample_each_epoch: bool,
    pub vocab_max_types: usize,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Both,
            epochs_per_stage: 5,
            batch_dialogues: 15,
            variants_per_level_cap: 4,
            lr_coarse: 0.005,
            lr_fine: 0.002,
            dropout: 0.5,
            seed: 0,
            objective: Objective::Mlr,
            rdrop: true,
            mu: mlcl::DEFAULT_MU,
            strict_paper_eq1: false,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            warmup_steps: 100,
            clip_norm: 1.0,
            resample_each_epoch: false,
            vocab_max_types: DEFAULT_MAX_TYPES,
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        if !(self.lr_coarse > 0.0 && self.lr_fine > 0.0) {
            return bad("learning rates must be > 0");
        }
        if self.batch_dialogues < 1 || self.variants_per_level_cap < 1 {
            return bad("batch_dialogues and variants_per_level_cap must be >= 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.clip_norm.is_nan() || self.clip_norm < 0.0 {
            return bad("clip_norm must be >= 0");
        }
        self.margin().validate()?;
        let mut enc = self.encoder;
        enc.dropout = self.dropout;
        enc.validate()
    }

    pub fn margin(&self) -> MarginConfig {
        MarginConfig {
            lambda: None,
            mu: self.mu,
            strict_paper_eq1: self.strict_paper_eq1,
        }
    }

    pub fn to_kv(&self, kv: &mut KvFile) {
        kv.set("stage", self.stage);
        kv.set("epochs_per_stage", self.epochs_per_stage);
        kv.set("batch_dialogues", self.batch_dialogues);
        kv.set("variants_per_level_cap", self.variants_per_level_cap);
        kv.set("lr_coarse", self.lr_coarse);
        kv.set("lr_fine", self.lr_fine);
        kv.set("dropout", self.dropout);
        kv.set("seed", self.seed);
        kv.set("objective", self.objective);
        kv.set("rdrop", self.rdrop);
        kv.set("mu", self.mu);
        kv.set("strict_paper_eq1", self.strict_paper_eq1);
        kv.set("beta1", self.beta1);
        kv.set("beta2", self.beta2);
        kv.set("adam_eps", self.adam_eps);
        kv.set("warmup_steps", self.warmup_steps);
        kv.set("clip_norm", self.clip_norm);
        kv.set("resample_each_epoch", self.resample_each_epoch);
        kv.set("vocab_max_types", self.vocab_max_types);
        let mut enc = KvFile::new();
        self.encoder.to_kv(&mut enc);
        for (k, v) in enc.iter() {
            if k != "dropout" {
                kv.set(k, v);
            }
        }
    }

    /// Overrides every field present in `kv`.
    pub fn update_from_kv(&mut self, kv: &KvFile) -> Result<()> {
        macro_rules! take {
            ($($field:ident),*) => {$(
                if let Some(v) = kv.parse_value(stringify!($field))? {
                    self.$field = v;
                }
            )*};
        }
        take!(
            stage,
            epochs_per_stage,
            batch_dialogues,
            variants_per_level_cap,
            lr_coarse,
            lr_fine,
            dropout,
            seed,
            objective,
            rdrop,
            mu,
            strict_paper_eq1,
            beta1,
            beta2,
            adam_eps,
            warmup_steps,
            clip_norm,
            resample_each_epoch,
            vocab_max_types
        );
        self.encoder.update_from_kv(kv)?;
        self.encoder.dropout = self.dropout;
        const KNOWN_ENCODER: [&str; 6] =
            ["d_model", "num_layers", "num_heads", "ffn_dim", "max_positions", "turn_pooling"];
        let mut known = KvFile::new();
        self.to_kv(&mut known);
        for (k, _) in kv.iter() {
            if known.get(k).is_none() && !KNOWN_ENCODER.contains(&k) {
                return Err(Error::Config(format!("unknown config key `{k}`")));
            }
        }
        Ok(())
    }
}

/// One optimizer step as logged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub stage: Stage,
    pub sep: f64,
    pub com: f64,
    pub mlr: f64,
    pub drop: f64,
    #[serde(rename = "final")]
    pub final_: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bce: Option<f64>,
}

impl StepLog {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            sep: self.sep,
            com: self.com,
            mlr: self.mlr,
            drop: self.drop,
            final_: self.final_,
        }
    }
}

pub fn log_to_jsonl(log: &[StepLog]) -> String {
    log.iter()
        .map(|l| serde_json::to_string(l).expect("log serializes") + "\n")
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Global optimizer step count.
    pub step: usize,
    /// Completed epochs across stages.
    pub epoch: usize,
    pub stage: Option<Stage>,
    /// Mean losses over the last completed epoch.
    pub running: LossBreakdown,
    pub best_valid: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let lr = if cfg.warmup_steps > 0 {
            lr * (self.t as f64 / cfg.warmup_steps as f64).min(1.0)
        } else {
            lr
        };
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let step = (lr * bc2.sqrt() / bc1) as f32;
        let eps = (cfg.adam_eps * bc2.sqrt()) as f32;
        let (b1, b2) = (b1 as f32, b2 as f32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            params[i] -= step * self.m[i] / (self.v[i].sqrt() + eps);
        }
    }
}

/// Selected variants of one dialogue: `levels[j]` indexes into the group's
/// level-`j` variants.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchItem {
    pub group: usize,
    pub levels: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub step: usize,
    pub epoch: usize,
    pub items: Vec<BatchItem>,
}

impl Batch {
    pub fn variant_count(&self) -> usize {
        self.items.iter().map(|i| i.levels.iter().map(Vec::len).sum::<usize>()).sum()
    }
}

pub fn steps_per_epoch(n_groups: usize, batch_dialogues: usize) -> usize {
    n_groups.div_ceil(batch_dialogues)
}

/// Batch `step` over `groups`: a seeded per-epoch shuffle of the dialogues cut
/// into chunks of `batch_dialogues`, with at most `variants_per_level_cap`
/// variants per level. Incomplete groups (a level missing) are skipped.
pub fn make_batch(groups: &[VariantGroup], cfg: &TrainConfig, step: usize) -> Batch {
    let usable: Vec<usize> = (0..groups.len()).filter(|&g| groups[g].is_complete()).collect();
    let spe = steps_per_epoch(usable.len(), cfg.batch_dialogues).max(1);
    let epoch = step / spe;
    let mut order = usable;
    order.shuffle(&mut seed::rng(cfg.seed, &[b"epoch-order", &(epoch as u64).to_le_bytes()]));
    let start = (step % spe) * cfg.batch_dialogues;
    let end = (start + cfg.batch_dialogues).min(order.len());
    let items = order[start.min(end)..end]
        .iter()
        .map(|&g| {
            let group = &groups[g];
            let levels = (0..=group.n_rounds)
                .map(|j| {
                    let available = group.levels[&j].len();
                    if available <= cfg.variants_per_level_cap {
                        return (0..available).collect();
                    }
                    let mut rng = seed::rng(
                        cfg.seed,
                        &[
                            b"batch-pick",
                            &(step as u64).to_le_bytes(),
                            group.base_id.as_bytes(),
                            &(j as u64).to_le_bytes(),
                        ],
                    );
                    let mut pick = index::sample(&mut rng, available, cfg.variants_per_level_cap).into_vec();
                    pick.sort_unstable();
                    pick
                })
                .collect();
            BatchItem { group: g, levels }
        })
        .collect();
    Batch { step, epoch, items }
}

struct DialogueStep {
    sep: f64,
    com: f64,
    bce: f64,
    drop_sum: f64,
    grads: Vec<f32>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub struct Trainer {
    cfg: TrainConfig,
    scorer: Scorer,
    groups: Vec<VariantGroup>,
    encoded: Vec<Vec<Vec<Encoded>>>,
    adam: Adam,
    state: TrainState,
    log: Vec<StepLog>,
    valid: Option<(Corpus, ReplacementPool)>,
    lineage: Option<Checkpoint>,
    resample: Option<(Corpus, ReplacementPool)>,
}

impl Trainer {
    /// Starts from `init` when given, otherwise from fresh parameters with a
    /// vocabulary built on the training originals.
    pub fn new(dataset: &perturb::Dataset, cfg: &TrainConfig, init: Option<Checkpoint>) -> Result<Self> {
        cfg.validate()?;
        let complete: Vec<VariantGroup> = dataset.train.iter().filter(|g| g.is_complete()).cloned().collect();
        let dropped = dataset.train.len() - complete.len();
        if dropped > 0 {
            log::warn!("skipping {dropped} training dialogues with a missing replacement level");
        }
        if complete.is_empty() {
            return Err(Error::Config("no training dialogue has every replacement level".into()));
        }
        let originals = perturb::originals(&complete)?;
        let (mut scorer, lineage) = match init {
            Some(ck) => (ck.scorer.clone(), Some(ck)),
            None => {
                let vocab = Vocab::from_dialogues(originals.dialogues(), cfg.vocab_max_types);
                let mut enc = cfg.encoder;
                enc.dropout = cfg.dropout;
                (Scorer::new(enc, vocab, cfg.seed)?, None)
            }
        };
        scorer.set_dropout(cfg.dropout)?;
        let valid = if dataset.valid.len() >= 2 {
            let c = perturb::originals(&dataset.valid)?;
            let pool = ReplacementPool::from_corpus(&c);
            Some((c, pool))
        } else {
            None
        };
        let resample = cfg.resample_each_epoch.then(|| {
            let pool = ReplacementPool::from_corpus(&originals);
            (originals, pool)
        });
        let mut t = Trainer {
            adam: Adam::new(scorer.num_params()),
            cfg: cfg.clone(),
            scorer,
            groups: Vec::new(),
            encoded: Vec::new(),
            state: TrainState::default(),
            log: Vec::new(),
            valid,
            lineage,
            resample,
        };
        t.set_groups(complete);
        Ok(t)
    }

    fn set_groups(&mut self, groups: Vec<VariantGroup>) {
        let scorer = &self.scorer;
        self.encoded = par::map(&groups, |g| {
            g.levels
                .values()
                .map(|vs| vs.iter().map(|v| scorer.prepare(&v.to_dialogue(0))).collect())
                .collect()
        });
        self.groups = groups;
    }

    pub fn scorer(&self) -> &Scorer {
        &self.scorer
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn log(&self) -> &[StepLog] {
        &self.log
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps_per_epoch(&self) -> usize {
        steps_per_epoch(self.groups.len(), self.cfg.batch_dialogues)
    }

    fn dialogue_step(&self, item: &BatchItem, fine: bool, n_variants: usize, n_dialogues: usize, step: usize) -> Result<DialogueStep> {
        let group = &self.groups[item.group];
        let two_pass = fine && self.cfg.rdrop;
        let passes = if two_pass { 2 } else { 1 };
        let mut caches = Vec::new();
        let mut logits: Vec<Vec<[f64; 2]>> = Vec::with_capacity(item.levels.len());
        for (j, picks) in item.levels.iter().enumerate() {
            let mut level = Vec::with_capacity(picks.len());
            for &k in picks {
                let enc = &self.encoded[item.group][j][k];
                let mut pair = [0.0; 2];
                for (pass, slot) in pair.iter_mut().enumerate().take(passes) {
                    let mut rng = seed::rng(
                        self.cfg.seed,
                        &[
                            b"dropout",
                            &(step as u64).to_le_bytes(),
                            group.base_id.as_bytes(),
                            &(j as u64).to_le_bytes(),
                            &(k as u64).to_le_bytes(),
                            &[pass as u8],
                        ],
                    );
                    let (logit, cache) = self.scorer.forward(enc, Some(&mut rng))?;
                    *slot = logit as f64;
                    caches.push((j, level.len(), pass, cache));
                }
                level.push(pair);
            }
            logits.push(level);
        }
        let scores: Vec<Vec<f64>> = logits.iter().map(|l| l.iter().map(|p| sigmoid(p[0])).collect()).collect();
        let dl = mlcl::dialogue_loss(&scores, &self.cfg.margin())?;

        // d loss / d logit for each (level, variant, pass)
        let mut d_logit: Vec<Vec<[f64; 2]>> = scores.iter().map(|l| vec![[0.0; 2]; l.len()]).collect();
        let mut bce = 0.0;
        match self.cfg.objective {
            Objective::Mlr => {
                for (j, level) in scores.iter().enumerate() {
                    for (k, &s) in level.iter().enumerate() {
                        d_logit[j][k][0] += dl.grad[j][k] / n_dialogues as f64 * s * (1.0 - s);
                    }
                }
            }
            Objective::Bce => {
                for (j, level) in logits.iter().enumerate() {
                    let y = if j == 0 { 1.0 } else { 0.0 };
                    for (k, p) in level.iter().enumerate() {
                        let z = p[0];
                        // numerically stable -[y log s + (1 - y) log(1 - s)]
                        bce += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
                        d_logit[j][k][0] += (sigmoid(z) - y) / n_variants as f64;
                    }
                }
            }
        }
        let mut drop_sum = 0.0;
        if two_pass {
            for (j, level) in logits.iter().enumerate() {
                for (k, p) in level.iter().enumerate() {
                    let (s1, s2) = (sigmoid(p[0]), sigmoid(p[1]));
                    drop_sum += (s1 - s2) * (s1 - s2);
                    let g = 2.0 * (s1 - s2) / n_variants as f64;
                    d_logit[j][k][0] += g * s1 * (1.0 - s1);
                    d_logit[j][k][1] -= g * s2 * (1.0 - s2);
                }
            }
        }

        let mut grads = vec![0.0f32; self.scorer.num_params()];
        for (j, k, pass, cache) in &caches {
            let g = d_logit[*j][*k][*pass];
            if g != 0.0 {
                self.scorer.backward(cache, g as f32, &mut grads);
            }
        }
        Ok(DialogueStep {
            sep: dl.sep,
            com: dl.com,
            bce,
            drop_sum,
            grads,
        })
    }

    fn train_step(&mut self, stage: Stage, lr: f64) -> Result<StepLog> {
        let step = self.state.step;
        let batch = make_batch(&self.groups, &self.cfg, step);
        let fine = stage == Stage::Fine;
        let n_variants = batch.variant_count();
        let n_dialogues = batch.items.len();
        let results = par::map(&batch.items, |item| self.dialogue_step(item, fine, n_variants, n_dialogues, step));

        let mut grads = vec![0.0f32; self.scorer.num_params()];
        let (mut sep, mut com, mut bce, mut drop_sum) = (0.0, 0.0, 0.0, 0.0);
        for r in results {
            let r = r?;
            sep += r.sep;
            com += r.com;
            bce += r.bce;
            drop_sum += r.drop_sum;
            for (a, b) in grads.iter_mut().zip(&r.grads) {
                *a += b;
            }
        }
        let m = n_dialogues as f64;
        let (sep, com) = (sep / m, com / m);
        let mlr = mlcl::mlr_loss(&[(sep, com)])?;
        let drop = if fine && self.cfg.rdrop { drop_sum / n_variants as f64 } else { 0.0 };
        let bce = (self.cfg.objective == Objective::Bce).then(|| bce / n_variants as f64);
        let final_ = mlcl::final_loss(bce.unwrap_or(mlr), drop);
        if !final_.is_finite() {
            return Err(Error::Diverged { step, what: "loss" });
        }
        let norm = grads.iter().map(|g| (*g as f64) * (*g as f64)).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Diverged { step, what: "gradient" });
        }
        if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            let s = (self.cfg.clip_norm / norm) as f32;
            grads.iter_mut().for_each(|g| *g *= s);
        }
        self.adam.step(self.scorer.params_mut(), &grads, lr, &self.cfg);
        self.state.step += 1;
        let entry = StepLog {
            step,
            stage,
            sep,
            com,
            mlr,
            drop,
            final_,
            bce,
        };
        self.log.push(entry.clone());
        Ok(entry)
    }

    fn maybe_resample(&mut self) -> Result<()> {
        let Some((corpus, pool)) = &self.resample else {
            return Ok(());
        };
        let gen = GenerationConfig {
            seed: seed::derive(self.cfg.seed, &[b"resample", &(self.state.epoch as u64).to_le_bytes()]),
            cap: self.cfg.variants_per_level_cap,
            levels: LevelSelection::All,
            ..Default::default()
        };
        let records = par::map(corpus.dialogues(), |d| perturb::variants_for(d, pool, &gen))
            .into_iter()
            .collect::<Result<Vec<_>>>()?
            .concat();
        self.set_groups(perturb::group_variants(records));
        Ok(())
    }

    /// Overall ranking accuracy on the validation split, if there is one.
    pub fn validate(&self) -> Result<Option<f64>> {
        let Some((corpus, pool)) = &self.valid else {
            return Ok(None);
        };
        let harness = HarnessConfig {
            seed: self.cfg.seed,
            ..Default::default()
        };
        let scorer = &self.scorer;
        let report = evalkit::rank_accuracy(
            |d| Ok(scorer.score(d, Mode::Deterministic)?.value()),
            corpus,
            pool,
            &harness,
        )?;
        Ok(Some(report.overall))
    }

    /// Runs `epochs` epochs of `stage` (`Coarse` or `Fine`). Returns the best
    /// validation accuracy seen and restores those parameters when a
    /// validation split exists.
    pub fn run_epochs(&mut self, stage: Stage, epochs: usize) -> Result<Option<f64>> {
        assert!(stage != Stage::Both, "run_epochs takes a single stage");
        let lr = match stage {
            Stage::Coarse => self.cfg.lr_coarse,
            _ => self.cfg.lr_fine,
        };
        self.state.stage = Some(stage);
        let mut best: Option<(f64, Vec<f32>)> = None;
        for _ in 0..epochs {
            self.maybe_resample()?;
            let spe = self.steps_per_epoch();
            let mut sum = LossBreakdown::default();
            for _ in 0..spe {
                let l = self.train_step(stage, lr)?;
                sum.sep += l.sep;
                sum.com += l.com;
                sum.mlr += l.mlr;
                sum.drop += l.drop;
                sum.final_ += l.final_;
            }
            let k = spe as f64;
            self.state.running = LossBreakdown {
                sep: sum.sep / k,
                com: sum.com / k,
                mlr: sum.mlr / k,
                drop: sum.drop / k,
                final_: sum.final_ / k,
            };
            self.state.epoch += 1;
            let acc = self.validate()?;
            log::info!(
                "epoch {} ({stage}): final {:.4} mlr {:.4} drop {:.5}{}",
                self.state.epoch,
                self.state.running.final_,
                self.state.running.mlr,
                self.state.running.drop,
                acc.map(|a| format!(" valid acc {a:.4}")).unwrap_or_default()
            );
            if let Some(a) = acc {
                if best.as_ref().is_none_or(|(b, _)| a > *b) {
                    best = Some((a, self.scorer.params().to_vec()));
                }
            }
        }
        Ok(best.map(|(a, params)| {
            self.scorer.params_mut().copy_from_slice(&params);
            self.state.best_valid = Some(a);
            a
        }))
    }

    fn checkpoint(&self, stage: Stage) -> Checkpoint {
        let tag = stage.to_string();
        let mut ck = match &self.lineage {
            Some(parent) => parent.descend(self.scorer.clone(), &tag),
            None => Checkpoint::new(self.scorer.clone(), &tag, self.cfg.seed),
        };
        self.cfg.to_kv(&mut ck.meta);
        ck.meta.set("steps", self.state.step);
        if let Some(b) = self.state.best_valid {
            ck.meta.set("best_valid_accuracy", b);
        }
        ck
    }

    /// Coarse stage: ranking loss only, at `lr_coarse`.
    pub fn train_coarse(&mut self) -> Result<Checkpoint> {
        self.run_epochs(Stage::Coarse, self.cfg.epochs_per_stage)?;
        let ck = self.checkpoint(Stage::Coarse);
        self.lineage = Some(ck.clone());
        Ok(ck)
    }

    /// Fine stage: ranking loss plus consistency loss, at `lr_fine`.
    pub fn train_fine(&mut self) -> Result<Checkpoint> {
        self.run_epochs(Stage::Fine, self.cfg.epochs_per_stage)?;
        let ck = self.checkpoint(Stage::Fine);
        self.lineage = Some(ck.clone());
        Ok(ck)
    }

    /// Checkpoint carrying optimizer moments and progress, for [`Trainer::resume`].
    pub fn save_state(&self) -> Result<Checkpoint> {
        let mut ck = self.checkpoint(self.state.stage.unwrap_or(Stage::Coarse));
        ck.meta.set("train_state", serde_json::to_string(&self.state)?);
        ck.meta.set("adam_t", self.adam.t);
        ck.extra.push(("adam.m".into(), self.adam.m.clone()));
        ck.extra.push(("adam.v".into(), self.adam.v.clone()));
        Ok(ck)
    }

    pub fn resume(dataset: &perturb::Dataset, cfg: &TrainConfig, ck: Checkpoint) -> Result<Self> {
        let state: TrainState = serde_json::from_str(
            ck.meta
                .get("train_state")
                .ok_or_else(|| Error::Checkpoint("no training state".into()))?,
        )?;
        let t: u64 = ck.meta.parse_value("adam_t")?.unwrap_or(0);
        let m = ck.extra("adam.m").ok_or_else(|| Error::Checkpoint("no adam.m".into()))?.to_vec();
        let v = ck.extra("adam.v").ok_or_else(|| Error::Checkpoint("no adam.v".into()))?.to_vec();
        let mut parent = ck;
        parent.extra.clear();
        let mut trainer = Trainer::new(dataset, cfg, Some(parent))?;
        if m.len() != trainer.scorer.num_params() || v.len() != m.len() {
            return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
        }
        trainer.adam = Adam { m, v, t };
        trainer.state = state;
        Ok(trainer)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub coarse: Option<Checkpoint>,
    pub fine: Option<Checkpoint>,
    pub log: Vec<StepLog>,
}

impl TrainOutcome {
    /// The checkpoint of the last stage that ran.
    pub fn last(&self) -> Option<&Checkpoint> {
        self.fine.as_ref().or(self.coarse.as_ref())
    }
}

/// Runs the configured stage(s); `both` runs coarse fully, then fine.
pub fn train(dataset: &perturb::Dataset, cfg: &TrainConfig, init: Option<Checkpoint>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(dataset, cfg, init)?;
    let coarse = matches!(cfg.stage, Stage::Coarse | Stage::Both)
        .then(|| trainer.train_coarse())
        .transpose()?;
    let fine = matches!(cfg.stage, Stage::Fine | Stage::Both)
        .then(|| trainer.train_fine())
        .transpose()?;
    Ok(TrainOutcome {
        coarse,
        fine,
        log: trainer.log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perturb::{build_dataset, Dataset};
    use crate::synthetic::{synthetic_corpus, SyntheticConfig};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs_per_stage: 1,
            batch_dialogues: 4,
            variants_per_level_cap: 2,
            dropout: 0.1,
            seed: 3,
            encoder: EncoderConfig {
                d_model: 16,
                num_layers: 1,
                num_heads: 2,
                ffn_dim: 16,
                max_positions: 128,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn dataset(dialogues: usize, cap: usize, valid_fraction: f64) -> Dataset {
        let corpus = synthetic_corpus(&SyntheticConfig {
            dialogues,
            topics: 4,
            words_per_topic: 8,
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        build_dataset(
            &corpus,
            &GenerationConfig {
                seed: 1,
                cap,
                valid_fraction,
                ..Default::default()
            },
            dir.path(),
        )
        .unwrap();
        Dataset::load(dir.path()).unwrap()
    }

    #[test]
    fn batch_examples() {
        let ds = dataset(30, 4, 0.0);
        let mut cfg = tiny_config();
        cfg.batch_dialogues = 15;
        cfg.variants_per_level_cap = 1;
        assert_eq!(steps_per_epoch(ds.train.len(), 15), 2);
        let b = make_batch(&ds.train, &cfg, 0);
        assert_eq!(b.items.len(), 15);
        for item in &b.items {
            let n = ds.train[item.group].n_rounds;
            assert_eq!(item.levels.len(), n + 1);
            assert!(item.levels.iter().all(|l| l.len() == 1));
        }
        assert_eq!(b, make_batch(&ds.train, &cfg, 0));
        let second = make_batch(&ds.train, &cfg, 1);
        let mut all: Vec<usize> = b.items.iter().chain(&second.items).map(|i| i.group).collect();
        all.sort_unstable();
        assert_eq!(all, (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn incomplete_groups_are_skipped() {
        let mut ds = dataset(6, 2, 0.0);
        ds.train[0].levels.remove(&1);
        let cfg = tiny_config();
        let b = make_batch(&ds.train, &cfg, 0);
        assert!(b.items.iter().all(|i| i.group != 0));
        assert_eq!(b.items.len(), 4);
        let t = Trainer::new(&ds, &cfg, None).unwrap();
        assert_eq!(t.groups.len(), 5);
    }

    #[test]
    fn zero_epochs_leave_parameters_untouched() {
        let ds = dataset(8, 2, 0.0);
        let mut cfg = tiny_config();
        cfg.epochs_per_stage = 0;
        let t = Trainer::new(&ds, &cfg, None).unwrap();
        let init = t.scorer().params().to_vec();
        let out = train(&ds, &cfg, None).unwrap();
        assert_eq!(out.fine.unwrap().scorer.params(), &init[..]);
        assert!(out.log.is_empty());
    }

    #[test]
    fn warmup_scales_the_first_update() {
        let ds = dataset(8, 2, 0.0);
        let max_move = |warmup_steps: usize| {
            let mut cfg = tiny_config();
            cfg.warmup_steps = warmup_steps;
            let mut t = Trainer::new(&ds, &cfg, None).unwrap();
            let before = t.scorer().params().to_vec();
            t.train_step(Stage::Coarse, cfg.lr_coarse).unwrap();
            let moved = t.scorer().params().iter().zip(&before).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            (moved as f64, cfg.lr_coarse)
        };
        let (full, lr) = max_move(0);
        assert!((full - lr).abs() < 0.01 * lr, "first Adam step moves by about lr: {full}");
        let (warm, _) = max_move(10);
        assert!((warm - lr / 10.0).abs() < 0.01 * lr, "{warm}");
    }

    #[test]
    fn without_dropout_the_consistency_term_vanishes() {
        let ds = dataset(8, 2, 0.0);
        let mut cfg = tiny_config();
        cfg.dropout = 0.0;
        cfg.stage = Stage::Fine;
        let out = train(&ds, &cfg, None).unwrap();
        for l in &out.log {
            assert_eq!(l.drop, 0.0);
            assert_eq!(l.final_, l.mlr);
        }
    }

    #[test]
    fn fine_stage_logs_nonnegative_drop_and_keeps_lineage() {
        let ds = dataset(8, 2, 0.0);
        let cfg = tiny_config();
        let out = train(&ds, &cfg, None).unwrap();
        let fine_logs: Vec<_> = out.log.iter().filter(|l| l.stage == Stage::Fine).collect();
        assert!(!fine_logs.is_empty());
        assert!(fine_logs.iter().all(|l| l.drop >= 0.0));
        assert!(fine_logs.iter().any(|l| l.drop > 0.0));
        let coarse = out.coarse.unwrap();
        let fine = out.fine.unwrap();
        assert_eq!(coarse.lineage, vec!["coarse"]);
        assert_eq!(fine.lineage, vec!["coarse", "fine"]);
        assert_eq!(fine.stage, "fine");
    }

    #[test]
    fn bce_objective_logs_its_loss() {
        let ds = dataset(8, 2, 0.0);
        let mut cfg = tiny_config();
        cfg.objective = Objective::Bce;
        cfg.stage = Stage::Coarse;
        let out = train(&ds, &cfg, None).unwrap();
        assert!(out.log.iter().all(|l| l.bce.is_some_and(|b| b > 0.0) && l.final_ == l.bce.unwrap()));
    }

    #[test]
    fn identical_runs_give_identical_logs() {
        let ds = dataset(10, 2, 0.0);
        let cfg = tiny_config();
        let a = train(&ds, &cfg, None).unwrap();
        let b = train(&ds, &cfg, None).unwrap();
        assert_eq!(log_to_jsonl(&a.log), log_to_jsonl(&b.log));
        assert_eq!(a.fine.unwrap().scorer.params(), b.fine.unwrap().scorer.params());
    }

    #[test]
    fn resume_reproduces_the_trajectory() {
        let ds = dataset(10, 2, 0.0);
        let cfg = tiny_config();
        let mut straight = Trainer::new(&ds, &cfg, None).unwrap();
        straight.run_epochs(Stage::Coarse, 2).unwrap();

        let mut first = Trainer::new(&ds, &cfg, None).unwrap();
        first.run_epochs(Stage::Coarse, 1).unwrap();
        let saved = Checkpoint::from_bytes(&first.save_state().unwrap().to_bytes()).unwrap();
        let mut resumed = Trainer::resume(&ds, &cfg, saved).unwrap();
        resumed.run_epochs(Stage::Coarse, 1).unwrap();

        assert_eq!(straight.scorer().params(), resumed.scorer().params());
        assert_eq!(straight.log()[first.log().len()..], resumed.log()[..]);
    }

    #[test]
    fn validation_split_drives_best_selection() {
        let ds = dataset(24, 2, 0.25);
        assert!(ds.valid.len() >= 2);
        let mut cfg = tiny_config();
        cfg.stage = Stage::Coarse;
        cfg.epochs_per_stage = 2;
        let out = train(&ds, &cfg, None).unwrap();
        let ck = out.coarse.unwrap();
        assert!(ck.meta.get("best_valid_accuracy").is_some());
    }

    #[test]
    fn resampling_regenerates_variants() {
        let ds = dataset(8, 2, 0.0);
        let mut cfg = tiny_config();
        cfg.resample_each_epoch = true;
        cfg.stage = Stage::Coarse;
        cfg.epochs_per_stage = 2;
        let out = train(&ds, &cfg, None).unwrap();
        assert_eq!(out.log.len(), 2 * steps_per_epoch(8, 4));
    }

    #[test]
    fn batch_gradient_matches_directional_difference() {
        let ds = dataset(6, 2, 0.0);
        for pooling in [crate::scorer::TurnPooling::Sum, crate::scorer::TurnPooling::Mean] {
            let mut cfg = tiny_config();
            cfg.dropout = 0.0;
            cfg.encoder.turn_pooling = pooling;
            let t = Trainer::new(&ds, &cfg, None).unwrap();
            let batch = make_batch(&t.groups, &cfg, 0);
            let n_var = batch.variant_count();
            let m = batch.items.len();
            let mut grads = vec![0.0f32; t.scorer.num_params()];
            for item in &batch.items {
                let r = t.dialogue_step(item, false, n_var, m, 0).unwrap();
                grads.iter_mut().zip(&r.grads).for_each(|(a, b)| *a += b);
            }
            let loss = |scorer: &Scorer| -> f64 {
                let per: Vec<(f64, f64)> = batch
                    .items
                    .iter()
                    .map(|item| {
                        let scores: Vec<Vec<f64>> = item
                            .levels
                            .iter()
                            .enumerate()
                            .map(|(j, ks)| {
                                ks.iter()
                                    .map(|&k| {
                                        let (z, _) = scorer.forward(&t.encoded[item.group][j][k], None).unwrap();
                                        sigmoid(z as f64)
                                    })
                                    .collect()
                            })
                            .collect();
                        let dl = mlcl::dialogue_loss(&scores, &cfg.margin()).unwrap();
                        (dl.sep, dl.com)
                    })
                    .collect();
                mlcl::mlr_loss(&per).unwrap()
            };
            let mut rng = seed::rng(5, &[b"dir"]);
            let dir: Vec<f32> = (0..grads.len()).map(|_| rand::Rng::gen_range(&mut rng, -1.0f32..1.0)).collect();
            let eps = 1e-3f32;
            let mut plus = t.scorer.clone();
            plus.params_mut().iter_mut().zip(&dir).for_each(|(p, d)| *p += eps * d);
            let mut minus = t.scorer.clone();
            minus.params_mut().iter_mut().zip(&dir).for_each(|(p, d)| *p -= eps * d);
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps as f64);
            let an: f64 = grads.iter().zip(&dir).map(|(g, d)| (*g as f64) * (*d as f64)).sum();
            assert!((fd - an).abs() <= 0.05 * an.abs().max(1e-3), "{pooling:?}: fd {fd} analytic {an}");
        }
    }

    #[test]
    fn config_roundtrips_through_kv() {
        let mut cfg = tiny_config();
        cfg.objective = Objective::Bce;
        cfg.rdrop = false;
        cfg.encoder.dropout = cfg.dropout;
        let mut kv = KvFile::new();
        cfg.to_kv(&mut kv);
        let mut back = TrainConfig::default();
        back.update_from_kv(&kv).unwrap();
        assert_eq!(back, cfg);
        let bogus = KvFile::parse("nonsense=1").unwrap();
        assert!(TrainConfig::default().update_from_kv(&bogus).is_err());
    }
}
