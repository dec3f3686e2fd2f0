//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`); exits non-zero if any line fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use dialeval::corpus::Dialogue;
use dialeval::evalkit::{self, HarnessConfig, RankReport};
use dialeval::mlcl::{self, LevelGroup, LossKind, MarginConfig};
use dialeval::perturb::{self, build_dataset, Dataset, GenerationConfig, ReplacementPool};
use dialeval::scorer::{EncoderConfig, Mode, Scorer, TurnPooling, Vocab};
use dialeval::synthetic::{synthetic_corpus, SyntheticConfig};
use dialeval::trainer::{self, log_to_jsonl, Objective, Stage, TrainConfig, TrainOutcome};
use rand::Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(a: f64, b: f64, tol: f64, what: &str) -> Result<(), String> {
    ensure((a - b).abs() <= tol, || format!("{what}: got {a}, expected {b}"))
}

fn files_equal(a: &Path, b: &Path) -> Result<(), String> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()));
    ensure(read(a)? == read(b)?, || format!("{} and {} differ", a.display(), b.display()))
}

fn data_construction() -> Check {
    let start = Instant::now();
    let corpus = synthetic_corpus(&SyntheticConfig {
        dialogues: 100,
        min_rounds: 4,
        max_rounds: 4,
        seed: 101,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let build = |name: &str, cap: usize| {
        let cfg = GenerationConfig {
            seed: 5,
            cap,
            ..Default::default()
        };
        build_dataset(&corpus, &cfg, &tmp.path().join(name)).map_err(|e| e.to_string())
    };
    build("a", 6)?;
    build("b", 6)?;
    build("wide", 9)?;
    for f in ["train.jsonl", perturb::MANIFEST_FILE] {
        files_equal(&tmp.path().join("a").join(f), &tmp.path().join("b").join(f))?;
    }
    let expected_scores = [1.0, 0.75, 0.5, 0.25, 0.0];
    for dir in ["a", "wide"] {
        let ds = Dataset::load(&tmp.path().join(dir)).map_err(|e| e.to_string())?;
        ensure(ds.train.len() == 100, || format!("{dir}: {} dialogues", ds.train.len()))?;
        for g in &ds.train {
            let counts: Vec<usize> = (0..=4).map(|i| g.levels.get(&i).map_or(0, Vec::len)).collect();
            ensure(counts == [1, 4, 6, 4, 1], || format!("{}: counts {counts:?}", g.base_id))?;
            for (level, vs) in &g.levels {
                let mut subsets: Vec<&Vec<usize>> = vs.iter().map(|v| &v.replaced_rounds).collect();
                subsets.sort();
                subsets.dedup();
                ensure(subsets.len() == vs.len(), || format!("{}: repeated subset", g.base_id))?;
                for v in vs {
                    ensure(v.score == expected_scores[*level], || {
                        format!("{} level {level}: score {}", g.base_id, v.score)
                    })?;
                }
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!("100 dialogues x (1,4,6,4,1), exact scores, byte-identical reruns, {elapsed:.2?}"))
}

fn loss_oracles() -> Check {
    const TOL: f64 = 1e-9;
    let sep = |c: &[f64]| mlcl::separation_loss(c, 0.5).map_err(|e| e.to_string());
    close(sep(&[1.0, 0.5, 0.0])?, 0.0, TOL, "separation met margins")?;
    close(sep(&[1.0, 1.0, 0.0])?, 0.5, TOL, "separation tied top levels")?;
    close(sep(&[0.5, 0.5, 0.5])?, 2.0, TOL, "separation all equal")?;

    let group = |scores: Vec<f64>| LevelGroup::new(0, scores).map_err(|e| e.to_string());
    close(mlcl::compactness_loss(&[group(vec![0.3, 0.3])?], 0.1), 0.0, TOL, "compactness at centroid")?;
    close(mlcl::compactness_loss(&[group(vec![0.4, 0.6])?], 0.1), 0.0, TOL, "compactness at mu")?;
    close(mlcl::compactness_loss(&[group(vec![0.35, 0.65])?], 0.1), 0.1, TOL, "compactness beyond mu")?;

    let drop = |a: &[f64], b: &[f64]| mlcl::rdrop_loss(a, b).map_err(|e| e.to_string());
    close(drop(&[0.3, 0.7], &[0.3, 0.7])?, 0.0, TOL, "r-drop identical")?;
    close(drop(&[0.6], &[0.5])?, 0.01, TOL, "r-drop single")?;
    close(drop(&[0.6, 0.2], &[0.5, 0.4])?, 0.025, TOL, "r-drop pair")?;

    for n in 2..=8usize {
        let lambda = mlcl::lambda_for(n).map_err(|e| e.to_string())?;
        close(lambda, 1.0 / n as f64, 0.0, "lambda")?;
        let ideal: Vec<f64> = (0..=n).map(|j| (n - j) as f64 / n as f64).collect();
        close(
            mlcl::separation_loss(&ideal, lambda).map_err(|e| e.to_string())?,
            0.0,
            TOL,
            &format!("ideal separation n={n}"),
        )?;
        let scores: Vec<Vec<f64>> = ideal.iter().map(|&c| vec![c; 3]).collect();
        let dl = mlcl::dialogue_loss(&scores, &MarginConfig::default()).map_err(|e| e.to_string())?;
        close(dl.sep + dl.com, 0.0, TOL, &format!("ideal mlr n={n}"))?;
    }
    Ok("9 worked examples within 1e-9; ideal solution gives zero loss for n=2..8".into())
}

fn gradient_verification() -> Check {
    let start = Instant::now();
    let mut parts = Vec::new();
    for kind in LossKind::ALL {
        let r = mlcl::gradcheck(kind, 100, 2024);
        ensure(r.trials == 100 && r.passed, || {
            format!("{}: max rel error {:.3e} (bound {:.0e})", r.loss, r.max_rel_error, r.bound)
        })?;
        parts.push(format!("{} {:.1e}<{:.0e}", r.loss, r.max_rel_error, r.bound));
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("{} ({elapsed:.2?})", parts.join(", ")))
}

fn correlation_oracles() -> Check {
    const TOL: f64 = 1e-12;
    let p = |x: &[f64], y: &[f64]| evalkit::pearson(x, y).map_err(|e| e.to_string());
    let s = |x: &[f64], y: &[f64]| evalkit::spearman(x, y).map_err(|e| e.to_string());
    close(p(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0])?, 1.0, TOL, "pearson linear")?;
    close(p(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0])?, -1.0, TOL, "pearson reversed")?;
    close(p(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0])?, 0.8, TOL, "pearson 0.8")?;
    close(s(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0])?, 0.8, TOL, "spearman 0.8")?;
    close(s(&[1.0, 2.0, 3.0, 4.0], &[1.0, 8.0, 27.0, 64.0])?, 1.0, TOL, "spearman monotone")?;
    close(s(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0])?, -1.0, TOL, "spearman reversed")?;
    ensure(evalkit::pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err(), || "zero variance accepted".into())?;
    ensure(evalkit::spearman(&[2.0, 2.0], &[1.0, 2.0]).is_err(), || "all-equal ranks accepted".into())?;

    let mut rng = dialeval::seed::rng(4, &[b"correlation-invariance"]);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let len = rng.gen_range(3..40);
        let x: Vec<f64> = (0..len).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let y: Vec<f64> = (0..len).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let a = rng.gen_range(0.1..10.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let c = rng.gen_range(0.1..10.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let (b, d) = (rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0));
        let ax: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let cy: Vec<f64> = y.iter().map(|v| c * v + d).collect();
        let r = p(&x, &y)?;
        let sign = (a * c).signum();
        worst = worst.max((p(&ax, &cy)? - sign * r).abs());
        worst = worst.max((p(&y, &x)? - r).abs());

        let rho = s(&x, &y)?;
        let gx: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        let hy: Vec<f64> = y.iter().map(|v| 2.5 * v + 1.0).collect();
        worst = worst.max((s(&gx, &hy)? - rho).abs());
        worst = worst.max((s(&y, &x)? - rho).abs());
        ensure(r.abs() <= 1.0 + TOL && rho.abs() <= 1.0 + TOL, || "coefficient out of bounds".into())?;
    }
    ensure(worst <= TOL, || format!("invariance violated by {worst:.3e}"))?;
    Ok(format!("oracle cases exact to 1e-12; 1000 random vectors, worst invariance gap {worst:.1e}"))
}

// --- trained-model criteria ---------------------------------------------------

const RANKING_SEED: u64 = 2023;
const HELD_OUT: usize = 400;

struct RankingRun {
    report: RankReport,
    outcome: TrainOutcome,
    elapsed: Duration,
}

fn ranking_config(objective: Objective) -> TrainConfig {
    let dropout = 0.1;
    TrainConfig {
        stage: Stage::Both,
        objective,
        seed: RANKING_SEED,
        dropout,
        encoder: EncoderConfig {
            dropout,
            turn_pooling: TurnPooling::Mean,
            ..EncoderConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn ranking_run(objective: Objective) -> Result<RankingRun, String> {
    let start = Instant::now();
    let corpus = synthetic_corpus(&SyntheticConfig {
        dialogues: 2000,
        topics: 20,
        min_rounds: 2,
        max_rounds: 4,
        seed: RANKING_SEED,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let (train_corpus, held_out) = corpus.split_at(corpus.len() - HELD_OUT);
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let gen = GenerationConfig {
        seed: RANKING_SEED,
        cap: 4,
        ..Default::default()
    };
    build_dataset(&train_corpus, &gen, tmp.path()).map_err(|e| e.to_string())?;
    let dataset = Dataset::load(tmp.path()).map_err(|e| e.to_string())?;
    let cfg = ranking_config(objective);
    let outcome = trainer::train(&dataset, &cfg, None).map_err(|e| e.to_string())?;
    let scorer = &outcome.last().ok_or("no checkpoint")?.scorer;
    let pool = ReplacementPool::from_corpus(&held_out);
    let report = evalkit::rank_accuracy(
        |d| Ok(scorer.score(d, Mode::Deterministic)?.value()),
        &held_out,
        &pool,
        &HarnessConfig {
            seed: RANKING_SEED,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    Ok(RankingRun {
        report,
        outcome,
        elapsed: start.elapsed(),
    })
}

fn epoch_mean_mlr(outcome: &TrainOutcome, stage: Stage) -> Vec<f64> {
    let mut per_epoch: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let logs: Vec<_> = outcome.log.iter().filter(|l| l.stage == stage).collect();
    let steps = logs.len();
    let epochs = ranking_config(Objective::Mlr).epochs_per_stage;
    for (i, l) in logs.iter().enumerate() {
        let e = per_epoch.entry(i * epochs / steps.max(1)).or_default();
        e.0 += l.mlr;
        e.1 += 1;
    }
    per_epoch.values().map(|(s, n)| s / *n as f64).collect()
}

fn ranking_analogue(run: &Result<RankingRun, String>) -> Check {
    let run = run.as_ref().map_err(Clone::clone)?;
    let r = &run.report;
    let summary = format!(
        "Rep-0 {:.3} Rep-1 {:.3} Rep-2 {:.3} overall {:.3} on {} held-out triples, {:.0?}",
        r.rep0, r.rep1, r.rep2, r.overall, r.n_triples, run.elapsed
    );
    let floor = 1.0 / 3.0 + 0.3;
    ensure(r.n_triples == HELD_OUT, || format!("{summary}; expected {HELD_OUT} triples"))?;
    ensure(r.overall >= 0.85, || format!("{summary}; overall below 0.85"))?;
    for (name, acc) in [("Rep-0", r.rep0), ("Rep-1", r.rep1), ("Rep-2", r.rep2)] {
        ensure(acc >= floor, || format!("{summary}; {name} below {floor:.3}"))?;
    }
    let coarse = epoch_mean_mlr(&run.outcome, Stage::Coarse);
    ensure(coarse.last() < coarse.first(), || format!("{summary}; coarse mlr did not decrease: {coarse:?}"))?;
    ensure(run.elapsed < Duration::from_secs(15 * 60), || format!("{summary}; over 15 min"))?;
    Ok(summary)
}

fn ablation_direction(mlr: &Result<RankingRun, String>, bce: &Result<RankingRun, String>) -> Check {
    let mlr = mlr.as_ref().map_err(Clone::clone)?;
    let bce = bce.as_ref().map_err(Clone::clone)?;
    let gap = mlr.report.overall - bce.report.overall;
    let summary = format!(
        "mlr {:.3} vs bce {:.3} (Rep-0/1/2 {:.3}/{:.3}/{:.3}), gap {gap:+.3}",
        mlr.report.overall, bce.report.overall, bce.report.rep0, bce.report.rep1, bce.report.rep2
    );
    ensure(gap >= 0.05, || format!("{summary}; below +0.05"))?;
    Ok(summary)
}

fn pipeline_once(dir: &Path) -> Result<(String, RankReport, Vec<u8>), String> {
    let corpus = synthetic_corpus(&SyntheticConfig {
        dialogues: 60,
        topics: 6,
        words_per_topic: 10,
        seed: 77,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let (train_corpus, eval_corpus) = corpus.split_at(45);
    let gen = GenerationConfig {
        seed: 77,
        cap: 3,
        valid_fraction: 0.2,
        ..Default::default()
    };
    build_dataset(&train_corpus, &gen, dir).map_err(|e| e.to_string())?;
    let dataset = Dataset::load(dir).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs_per_stage: 2,
        batch_dialogues: 8,
        variants_per_level_cap: 2,
        dropout: 0.2,
        seed: 77,
        encoder: EncoderConfig {
            d_model: 16,
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 32,
            max_positions: 128,
            dropout: 0.2,
            turn_pooling: TurnPooling::Sum,
        },
        ..Default::default()
    };
    let outcome = trainer::train(&dataset, &cfg, None).map_err(|e| e.to_string())?;
    let fine = outcome.fine.as_ref().ok_or("no fine checkpoint")?;
    let pool = ReplacementPool::from_corpus(&eval_corpus);
    let report = evalkit::rank_accuracy(
        |d| Ok(fine.scorer.score(d, Mode::Deterministic)?.value()),
        &eval_corpus,
        &pool,
        &HarnessConfig {
            seed: 77,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    Ok((log_to_jsonl(&outcome.log), report, fine.to_bytes()))
}

fn determinism() -> Check {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (log_a, rep_a, ck_a) = pipeline_once(a.path())?;
    let (log_b, rep_b, ck_b) = pipeline_once(b.path())?;
    for f in ["train.jsonl", "valid.jsonl", perturb::MANIFEST_FILE] {
        files_equal(&a.path().join(f), &b.path().join(f))?;
    }
    ensure(!log_a.is_empty() && log_a == log_b, || "training logs differ".into())?;
    ensure(rep_a == rep_b, || format!("reports differ: {rep_a:?} vs {rep_b:?}"))?;
    ensure(ck_a == ck_b, || "checkpoints differ".into())?;
    Ok(format!(
        "datasets, {} log lines, checkpoints and RankReport (overall {:.3}) identical across runs",
        log_a.lines().count(),
        rep_a.overall
    ))
}

fn protocol_adapters() -> Check {
    let corpus = synthetic_corpus(&SyntheticConfig {
        dialogues: 20,
        min_rounds: 1,
        max_rounds: 6,
        seed: 8,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let vocab = Vocab::from_dialogues(corpus.dialogues(), 1000);
    let scorer = Scorer::new(
        EncoderConfig {
            d_model: 16,
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 16,
            max_positions: 128,
            ..Default::default()
        },
        vocab,
        8,
    )
    .map_err(|e| e.to_string())?;
    let model = |d: &Dialogue| Ok(scorer.score(d, Mode::Deterministic)?.value());
    let mut one_round = 0;
    for d in corpus.dialogues().iter().filter(|d| d.n_rounds() == 1) {
        let direct = model(d).map_err(|e: dialeval::Error| e.to_string())?;
        let via = evalkit::dialogue_score_via_pairs(model, d).map_err(|e| e.to_string())?;
        ensure(via == direct, || format!("{}: {via} != {direct}", d.id()))?;
        one_round += 1;
    }
    let pair = evalkit::pair_as_dialogue("p", "how are you", "fine thanks").map_err(|e| e.to_string())?;
    let direct = model(&pair).map_err(|e: dialeval::Error| e.to_string())?;
    ensure(evalkit::dialogue_score_via_pairs(model, &pair).map_err(|e| e.to_string())? == direct, || {
        "pair adapter is not the identity".into()
    })?;
    one_round += 1;

    let mut lengths = std::collections::BTreeSet::new();
    for constant in [0.5, 0.123, 0.9] {
        for d in corpus.dialogues() {
            let v = evalkit::dialogue_score_via_pairs(|_: &Dialogue| Ok(constant), d).map_err(|e| e.to_string())?;
            ensure(v == constant, || format!("{}: constant {constant} became {v}", d.id()))?;
            lengths.insert(d.n_rounds());
        }
    }
    Ok(format!(
        "{one_round} one-round dialogues match exactly; constants preserved for lengths {:?}",
        lengths
    ))
}

fn run(id: u8, name: &str, f: impl FnOnce() -> Check) -> bool {
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    match &result {
        Ok(detail) => println!("PASS {id} {name}: {detail}"),
        Err(detail) => println!("FAIL {id} {name}: {detail}"),
    }
    result.is_ok()
}

fn main() {
    let mut ok = true;
    ok &= run(1, "data construction exactness", data_construction);
    ok &= run(2, "loss oracle suite", loss_oracles);
    ok &= run(3, "gradient verification", gradient_verification);
    ok &= run(4, "correlation oracle suite", correlation_oracles);
    let mlr = catch_unwind(|| ranking_run(Objective::Mlr)).unwrap_or_else(|_| Err("training panicked".into()));
    ok &= run(5, "desk-scale ranking analogue", || ranking_analogue(&mlr));
    let bce = catch_unwind(|| ranking_run(Objective::Bce)).unwrap_or_else(|_| Err("training panicked".into()));
    ok &= run(6, "ablation direction (mlr vs bce)", || ablation_direction(&mlr, &bce));
    ok &= run(7, "end-to-end determinism", determinism);
    ok &= run(8, "protocol adapters", protocol_adapters);
    if !ok {
        std::process::exit(1);
    }
}
