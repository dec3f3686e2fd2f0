use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use dialeval::corpus::{load_corpus, Corpus};
use dialeval::evalkit::{self, HarnessConfig, ModelScore, RankReport, DEFAULT_PERMUTATION_TRIALS};
use dialeval::kv::KvFile;
use dialeval::mlcl::{self, LossKind};
use dialeval::perturb::{self, Dataset, GenerationConfig, LevelSelection, ReplaceUnit, ReplacementPool};
use dialeval::scorer::{load_checkpoint, save_checkpoint, Checkpoint, Mode, Scorer};
use dialeval::seed::sha256_hex;
use dialeval::synthetic::{synthetic_corpus, SyntheticConfig};
use dialeval::trainer::{self, Objective, Stage, TrainConfig};

/// Self-supervised dialogue quality scoring.
#[derive(Parser)]
#[command(name = "dialeval", version)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a multi-level perturbed training set from a dialogue corpus.
    BuildData(BuildDataArgs),
    /// Train a scorer (coarse stage, fine stage, or both).
    Train(TrainArgs),
    /// Score every dialogue of a corpus.
    Score(ScoreArgs),
    /// Replacement-level ranking accuracy on original/1-replaced/multi-replaced triples.
    RankEval(RankEvalArgs),
    /// Correlate model scores with human ratings per aspect.
    Correlate(CorrelateArgs),
    /// Check analytic loss gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Write a seeded synthetic corpus with disjoint topic vocabularies.
    Synth(SynthArgs),
}

#[derive(Args)]
struct BuildDataArgs {
    /// Input corpus (JSONL, one dialogue per line).
    #[arg(long)]
    input: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Maximum variants per replacement level.
    #[arg(long, default_value_t = perturb::DEFAULT_CAP)]
    cap: usize,
    /// Replacement levels to emit: `all` or a list such as `0,1,3`.
    #[arg(long, default_value = "all")]
    levels: LevelSelection,
    /// `responder_turn` or `whole_round`.
    #[arg(long, default_value = "responder_turn")]
    replace_unit: ReplaceUnit,
    /// Fraction of dialogues routed to a validation split.
    #[arg(long, default_value_t = 0.0)]
    valid_fraction: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by `build-data`.
    #[arg(long)]
    data: PathBuf,
    /// Key-value config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// coarse, fine or both.
    #[arg(long)]
    stage: Option<Stage>,
    /// Output directory for checkpoints, log and manifest.
    #[arg(long)]
    out: PathBuf,
    /// Start from this checkpoint instead of fresh parameters.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// mlr or bce.
    #[arg(long)]
    objective: Option<Objective>,
    #[arg(long)]
    dropout: Option<f32>,
    #[arg(long)]
    lr_coarse: Option<f64>,
    #[arg(long)]
    lr_fine: Option<f64>,
    /// Disable the dropout-consistency term in the fine stage.
    #[arg(long)]
    no_rdrop: bool,
    /// Any config key, as `key=value` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus to score (JSONL).
    #[arg(long)]
    input: PathBuf,
    /// Output JSONL of {"id","score"}; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Score each dialogue as the mean of its context-response prefixes.
    #[arg(long)]
    via_pairs: bool,
}

#[derive(Args)]
struct RankEvalArgs {
    #[arg(long, required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Use the reference oracle (fraction of original turns) instead of a model.
    #[arg(long, conflicts_with = "checkpoint")]
    oracle: bool,
    /// Corpus of original dialogues (JSONL).
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    triples_per_dialogue: usize,
    #[arg(long, default_value = "responder_turn")]
    replace_unit: ReplaceUnit,
    /// Write the report as JSON.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct CorrelateArgs {
    /// JSONL of {"id","score"}.
    #[arg(long)]
    model_scores: PathBuf,
    /// JSONL of {"id","aspect","human_score"}.
    #[arg(long)]
    human: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PERMUTATION_TRIALS)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the report as JSON.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances per loss.
    #[arg(long, default_value_t = 100)]
    trials: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 2000)]
    dialogues: usize,
    #[arg(long, default_value_t = 20)]
    topics: usize,
    #[arg(long, default_value_t = 24)]
    words_per_topic: usize,
    #[arg(long, default_value_t = 2)]
    min_rounds: usize,
    #[arg(long, default_value_t = 4)]
    max_rounds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn write_manifest(path: &Path, command: &str, kv: &KvFile) -> anyhow::Result<()> {
    let mut m = KvFile::new();
    m.set("command", command);
    m.set("tool_version", env!("CARGO_PKG_VERSION"));
    for (k, v) in kv.iter() {
        m.set(k, v);
    }
    m.write(path)?;
    Ok(())
}

fn sibling_manifest(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.txt");
    output.with_file_name(name)
}

fn write_output(output: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match output {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn file_sha(path: &Path) -> anyhow::Result<String> {
    Ok(sha256_hex(&fs::read(path).with_context(|| format!("reading {}", path.display()))?))
}

fn build_data(a: BuildDataArgs) -> anyhow::Result<()> {
    let corpus = load_corpus(&a.input)?;
    let cfg = GenerationConfig {
        seed: a.seed,
        cap: a.cap,
        levels: a.levels,
        replace_unit: a.replace_unit,
        valid_fraction: a.valid_fraction,
    };
    let summary = perturb::build_dataset(&corpus, &cfg, &a.output)?;
    for s in &summary.splits {
        println!("{:<6} {:>6} dialogues {:>8} records  sha256 {}", s.name, s.dialogues, s.records, s.sha256);
    }
    for (level, count) in &summary.level_counts {
        println!("level {level}: {count}");
    }
    Ok(())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = TrainConfig::default();
    let mut kv = match &a.config {
        Some(p) => KvFile::read(p)?,
        None => KvFile::new(),
    };
    if let Some(v) = a.stage {
        kv.set("stage", v);
    }
    if let Some(v) = a.seed {
        kv.set("seed", v);
    }
    if let Some(v) = a.epochs {
        kv.set("epochs_per_stage", v);
    }
    if let Some(v) = a.objective {
        kv.set("objective", v);
    }
    if let Some(v) = a.dropout {
        kv.set("dropout", v);
    }
    if let Some(v) = a.lr_coarse {
        kv.set("lr_coarse", v);
    }
    if let Some(v) = a.lr_fine {
        kv.set("lr_fine", v);
    }
    if a.no_rdrop {
        kv.set("rdrop", false);
    }
    for o in &a.overrides {
        let Some((k, v)) = o.split_once('=') else {
            return Err(dialeval::Error::Config(format!("--set expects KEY=VALUE, got `{o}`")).into());
        };
        kv.set(k.trim(), v.trim());
    }
    cfg.update_from_kv(&kv)?;
    cfg.validate()?;

    let dataset = Dataset::load(&a.data)?;
    let init = a.init.as_deref().map(load_checkpoint).transpose()?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let outcome = trainer::train(&dataset, &cfg, init)?;

    let mut m = KvFile::new();
    m.set("data", a.data.display());
    if let Some(sha) = dataset.manifest.get("corpus_sha256") {
        m.set("data.corpus_sha256", sha);
    }
    for (k, v) in dataset.manifest.iter().filter(|(k, _)| k.ends_with(".sha256")) {
        m.set(format!("data.{k}"), v);
    }
    if let Some(p) = &a.init {
        m.set("init", p.display());
        m.set("init_sha256", file_sha(p)?);
    }
    let mut resolved = KvFile::new();
    cfg.to_kv(&mut resolved);
    for (k, v) in resolved.iter() {
        m.set(format!("config.{k}"), v);
    }
    let log_path = a.out.join("train_log.jsonl");
    fs::write(&log_path, trainer::log_to_jsonl(&outcome.log))?;
    m.set("log", "train_log.jsonl");
    m.set("log_sha256", file_sha(&log_path)?);
    m.set("steps", outcome.log.len());
    for ck in [&outcome.coarse, &outcome.fine].into_iter().flatten() {
        let name = format!("{}.ckpt", ck.stage);
        let path = a.out.join(&name);
        save_checkpoint(ck, &path)?;
        m.set(format!("checkpoint.{}", ck.stage), &name);
        m.set(format!("checkpoint.{}.sha256", ck.stage), file_sha(&path)?);
        println!("wrote {} (lineage {})", path.display(), ck.lineage.join(" -> "));
    }
    if let Some(last) = outcome.log.last() {
        println!(
            "last step {}: sep {:.4} com {:.4} mlr {:.4} drop {:.5} final {:.4}",
            last.step, last.sep, last.com, last.mlr, last.drop, last.final_
        );
    }
    write_manifest(&a.out.join("manifest.txt"), "train", &m)
}

fn model_score(scorer: &Scorer, d: &dialeval::corpus::Dialogue, via_pairs: bool) -> dialeval::Result<f64> {
    let one = |d: &dialeval::corpus::Dialogue| Ok(scorer.score(d, Mode::Deterministic)?.value());
    if via_pairs {
        evalkit::dialogue_score_via_pairs(one, d)
    } else {
        one(d)
    }
}

fn score(a: ScoreArgs) -> anyhow::Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let corpus = load_corpus(&a.input)?;
    let mut out = String::new();
    for d in corpus.dialogues() {
        let s = model_score(&ck.scorer, d, a.via_pairs)?;
        out.push_str(&serde_json::to_string(&ModelScore {
            id: d.id().to_owned(),
            score: s,
        })?);
        out.push('\n');
    }
    write_output(a.output.as_deref(), &out)?;
    if let Some(p) = &a.output {
        let mut m = KvFile::new();
        m.set("checkpoint", a.checkpoint.display());
        m.set("checkpoint_sha256", file_sha(&a.checkpoint)?);
        m.set("input", a.input.display());
        m.set("input_sha256", corpus.checksum());
        m.set("via_pairs", a.via_pairs);
        m.set("mode", "deterministic");
        m.set("output_sha256", sha256_hex(out.as_bytes()));
        write_manifest(&sibling_manifest(p), "score", &m)?;
    }
    Ok(())
}

fn rank_eval(a: RankEvalArgs) -> anyhow::Result<()> {
    let corpus = load_corpus(&a.input)?;
    let pool = ReplacementPool::from_corpus(&corpus);
    let cfg = HarnessConfig {
        seed: a.seed,
        triples_per_dialogue: a.triples_per_dialogue,
        replace_unit: a.replace_unit,
    };
    let report: RankReport = match &a.checkpoint {
        Some(path) => {
            let ck: Checkpoint = load_checkpoint(path)?;
            let scorer = &ck.scorer;
            evalkit::rank_accuracy(|d| model_score(scorer, d, false), &corpus, &pool, &cfg)?
        }
        None => evalkit::rank_accuracy(evalkit::oracle_scorer(&corpus), &corpus, &pool, &cfg)?,
    };
    print!("{}", report.table());
    if let Some(p) = &a.output {
        let json = serde_json::to_string_pretty(&report)? + "\n";
        fs::write(p, &json).with_context(|| format!("writing {}", p.display()))?;
        let mut m = KvFile::new();
        match &a.checkpoint {
            Some(c) => {
                m.set("checkpoint", c.display());
                m.set("checkpoint_sha256", file_sha(c)?);
            }
            None => m.set("scorer", "oracle"),
        }
        m.set("input", a.input.display());
        m.set("input_sha256", corpus.checksum());
        m.set("seed", a.seed);
        m.set("triples_per_dialogue", a.triples_per_dialogue);
        m.set("replace_unit", a.replace_unit);
        m.set("output_sha256", sha256_hex(json.as_bytes()));
        write_manifest(&sibling_manifest(p), "rank-eval", &m)?;
    }
    Ok(())
}

fn correlate(a: CorrelateArgs) -> anyhow::Result<()> {
    let model = evalkit::read_model_scores(&a.model_scores)?;
    let ratings = evalkit::read_ratings(&a.human)?;
    let report = evalkit::correlate_with_human(&model, &ratings, a.trials, a.seed)?;
    print!("{}", report.table());
    if let Some(p) = &a.output {
        let json = serde_json::to_string_pretty(&report)? + "\n";
        fs::write(p, &json).with_context(|| format!("writing {}", p.display()))?;
        let mut m = KvFile::new();
        m.set("model_scores", a.model_scores.display());
        m.set("model_scores_sha256", file_sha(&a.model_scores)?);
        m.set("human", a.human.display());
        m.set("human_sha256", file_sha(&a.human)?);
        m.set("trials", a.trials);
        m.set("seed", a.seed);
        m.set("output_sha256", sha256_hex(json.as_bytes()));
        write_manifest(&sibling_manifest(p), "correlate", &m)?;
    }
    Ok(())
}

/// Returns whether every bound held.
fn gradcheck(a: GradcheckArgs) -> bool {
    println!("{:<12} {:>7} {:>14} {:>10}  status", "loss", "trials", "max rel err", "bound");
    let mut ok = true;
    for kind in LossKind::ALL {
        let r = mlcl::gradcheck(kind, a.trials, a.seed);
        println!(
            "{:<12} {:>7} {:>14.3e} {:>10.0e}  {}",
            kind.name(),
            r.trials,
            r.max_rel_error,
            r.bound,
            if r.passed { "ok" } else { "FAIL" }
        );
        ok &= r.passed;
    }
    ok
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let cfg = SyntheticConfig {
        dialogues: a.dialogues,
        topics: a.topics,
        words_per_topic: a.words_per_topic,
        min_rounds: a.min_rounds,
        max_rounds: a.max_rounds,
        seed: a.seed,
        ..Default::default()
    };
    let corpus: Corpus = synthetic_corpus(&cfg)?;
    corpus.write(&a.output)?;
    println!("wrote {} dialogues to {}", corpus.len(), a.output.display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<dialeval::Error>() {
        Some(e) if !e.is_user_error() => 1,
        Some(_) => 2,
        None if err.downcast_ref::<std::io::Error>().is_some() => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();

    let result = match cli.command {
        Command::BuildData(a) => build_data(a),
        Command::Train(a) => train(a),
        Command::Score(a) => score(a),
        Command::RankEval(a) => rank_eval(a),
        Command::Correlate(a) => correlate(a),
        Command::Gradcheck(a) => {
            if gradcheck(a) {
                Ok(())
            } else {
                Err(anyhow::anyhow!("gradient check failed"))
            }
        }
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
