//! Command-line surface: argument parsing and the six subcommands.
//!
//! Every command loads and validates all of its inputs before it writes
//! anything. Exit status is 0 on success, 1 for usage or configuration
//! errors and 2 for data errors.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::RunConfig;
use crate::corpus::{read_corpus, read_labeled, Label, StudyRecord};
use crate::error::{Error, Result};
use crate::eval::{confusion, keyword_match, EvalReport, KeywordRuleSet};
use crate::model::Checkpoint;
use crate::synth::{synth_corpus, synth_unlabeled};
use crate::tokenizer::build_vocab;
use crate::train::{log_to_jsonl, train, Splits};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const UNLABELED_FILE: &str = "unlabeled.jsonl";
pub const TRUTH_FILE: &str = "unlabeled_truth.jsonl";

#[derive(Debug, Parser)]
#[command(name = "protolora", version, about = "Prototypical fine-tuning with low-rank adapters for rare-class text triage")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed overriding the configured one.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file, or output directory for `train` and `synth`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write its best checkpoint and the epoch log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a labeled split.
    Eval(EvalArgs),
    /// Rank an unlabeled corpus by positive-class probability.
    Predict(PredictArgs),
    /// Apply the keyword rule baseline.
    BaselineRules(RulesArgs),
    /// Write one tab-separated embedding row per record.
    ExportEmbeddings(ExportArgs),
    /// Generate a synthetic labeled corpus, optionally with an unlabeled pool.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub validation: Option<PathBuf>,
    #[arg(long)]
    pub prototype: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub prototype: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub prototype: Option<PathBuf>,
    /// Corpus to rank; defaults to `paths.unlabeled`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Records with `p_pos` at or above this are flagged.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct RulesArgs {
    /// Keyword rule file; defaults to `paths.keyword_rules`, then the bundled lists.
    #[arg(long)]
    pub rules: Option<PathBuf>,
    /// Corpus to match; defaults to `paths.test`.
    #[arg(long)]
    pub input: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Corpus to embed; defaults to `paths.test`.
    #[arg(long)]
    pub input: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 121)]
    pub n_pos: usize,
    #[arg(long, default_value_t = 995)]
    pub n_neg: usize,
    /// 1 = disjoint class vocabularies, 0 = identical distributions.
    #[arg(long, default_value_t = 0.8)]
    pub separation: f64,
    /// Also write an unlabeled corpus of this many records with hidden labels.
    #[arg(long)]
    pub unlabeled: Option<usize>,
    #[arg(long, default_value_t = 0.01)]
    pub positive_rate: f64,
}

/// One ranked triage line.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PredictionRecord {
    pub rank: usize,
    pub id: String,
    pub p_pos: f64,
    pub predicted_label: Label,
}

#[derive(Serialize)]
struct Summary {
    total: usize,
    flagged: usize,
    flagged_fraction: f64,
    threshold: f64,
}

#[derive(Serialize)]
struct SummaryLine {
    summary: Summary,
}

#[derive(Serialize)]
struct RuleFlag<'a> {
    id: &'a str,
    predicted_label: Label,
}

#[derive(Serialize)]
struct HiddenLabel<'a> {
    id: &'a str,
    label: Label,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { stdout.write_all(text.as_bytes()) } else { stderr.write_all(text.as_bytes()) };
            return code;
        }
    };
    match run(cli, stdout, stderr) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let ctx = Context { cli: &cli, cfg: &cfg };
    match &cli.command {
        Command::Train(a) => cmd_train(&ctx, a, stdout),
        Command::Eval(a) => cmd_eval(&ctx, a, stdout),
        Command::Predict(a) => cmd_predict(&ctx, a, stdout, stderr),
        Command::BaselineRules(a) => cmd_baseline_rules(&ctx, a, stdout),
        Command::ExportEmbeddings(a) => cmd_export_embeddings(&ctx, a, stdout),
        Command::Synth(a) => cmd_synth(&ctx, a, stdout),
    }
}

struct Context<'a> {
    cli: &'a Cli,
    cfg: &'a RunConfig,
}

impl Context<'_> {
    /// An explicit flag, else the configured path, else a config error.
    fn path(&self, flag: &Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
        flag.clone()
            .or_else(|| configured.clone())
            .ok_or_else(|| Error::Config(format!("no {what} given: pass --{what} or set paths.{}", what.replace('-', "_"))))
    }

    fn out_dir(&self) -> Result<PathBuf> {
        self.cli
            .out
            .clone()
            .or_else(|| self.cfg.paths.output.clone())
            .ok_or_else(|| Error::Config("no output directory: pass --out or set paths.output".into()))
    }

    fn out_file(&self) -> Option<PathBuf> {
        self.cli.out.clone().or_else(|| self.cfg.paths.output.clone())
    }
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, content).map_err(|e| Error::io(path, e))
}

/// Writes to `--out` when given, otherwise to stdout.
fn emit(out: Option<PathBuf>, content: &str, stdout: &mut dyn Write) -> Result<()> {
    match out {
        Some(p) => write_file(&p, content),
        None => stdout
            .write_all(content.as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

fn cmd_train(ctx: &Context, a: &TrainArgs, stdout: &mut dyn Write) -> Result<()> {
    let mut config = ctx.cfg.train_config()?;
    if let Some(seed) = ctx.cli.seed {
        config.seed = seed;
    }
    let out = ctx.out_dir()?;
    let paths = &ctx.cfg.paths;
    let train_set = read_labeled(ctx.path(&a.train, &paths.train, "train")?)?;
    let validation = read_labeled(ctx.path(&a.validation, &paths.validation, "validation")?)?;
    let prototype = read_labeled(ctx.path(&a.prototype, &paths.prototype, "prototype")?)?;
    let vocab_source = [train_set.as_slice(), prototype.as_slice(), validation.as_slice()].concat();
    let vocab = build_vocab(&vocab_source, ctx.cfg.encoder.min_token_frequency)?;
    let outcome = train(
        &config,
        &ctx.cfg.encoder_config(),
        &vocab,
        Splits {
            train: &train_set,
            validation: &validation,
            prototype: &prototype,
        },
    )?;
    let ck = &outcome.checkpoint;
    write_file(&out.join(CHECKPOINT_FILE), &ck.to_json())?;
    write_file(&out.join(LOG_FILE), &log_to_jsonl(&outcome.log))?;
    writeln!(
        stdout,
        "trained {:?} for {} epochs; best epoch {} with validation F1 {}",
        config.variant,
        outcome.log.len(),
        ck.epoch,
        ck.validation_f1.map_or("n/a".into(), |f| format!("{f:.4}"))
    )
    .map_err(|e| Error::io("<stdout>", e))
}

fn load_checkpoint(ctx: &Context, flag: &Option<PathBuf>) -> Result<Checkpoint> {
    Checkpoint::load(ctx.path(flag, &ctx.cfg.paths.checkpoint, "checkpoint")?)
}

/// The prototype set, read only when the checkpoint classifies by prototype.
fn prototype_set(ctx: &Context, ck: &Checkpoint, flag: &Option<PathBuf>) -> Result<Option<Vec<StudyRecord>>> {
    if !ck.variant.classifies_by_prototype() {
        return Ok(None);
    }
    Ok(Some(read_labeled(ctx.path(flag, &ctx.cfg.paths.prototype, "prototype")?)?))
}

fn cmd_eval(ctx: &Context, a: &EvalArgs, stdout: &mut dyn Write) -> Result<()> {
    let ck = load_checkpoint(ctx, &a.checkpoint)?;
    let protos = prototype_set(ctx, &ck, &a.prototype)?;
    let test = read_labeled(ctx.path(&a.test, &ctx.cfg.paths.test, "test")?)?;
    let report = crate::eval::evaluate_variant(&ck, protos.as_deref(), &test, None)?;
    emit(ctx.out_file(), &report.to_json(), stdout)
}

/// Sorted by `p_pos` descending, ties by id ascending; rank is 1-based.
pub fn rank_predictions(scored: Vec<(String, f64)>, threshold: f64) -> Vec<PredictionRecord> {
    let mut scored = scored;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored
        .into_iter()
        .enumerate()
        .map(|(i, (id, p_pos))| PredictionRecord {
            rank: i + 1,
            id,
            p_pos,
            predicted_label: if p_pos >= threshold { Label::Positive } else { Label::Negative },
        })
        .collect()
}

fn cmd_predict(ctx: &Context, a: &PredictArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    if !a.threshold.is_finite() {
        return Err(Error::Config(format!("threshold must be finite, got {}", a.threshold)));
    }
    let ck = load_checkpoint(ctx, &a.checkpoint)?;
    let protos = prototype_set(ctx, &ck, &a.prototype)?;
    let input = ctx.path(&a.input, &ctx.cfg.paths.unlabeled, "input")?;
    let mut corpus = read_corpus(&input)?;
    if corpus.is_empty() {
        return Err(Error::Data(format!("{} holds no records", input.display())));
    }
    let labeled = corpus.iter().filter(|r| r.label.is_some()).count();
    if labeled > 0 {
        let _ = writeln!(stderr, "warning: ignoring labels on {labeled} records in {}", input.display());
        corpus.iter_mut().for_each(|r| r.label = None);
    }
    let scorer = ck.scorer(protos.as_deref())?;
    let emb = ck.embed(&corpus)?;
    let scored = corpus
        .iter()
        .enumerate()
        .map(|(i, r)| Ok((r.id.clone(), scorer.probabilities(emb.row(i))?.0)))
        .collect::<Result<Vec<_>>>()?;
    let ranked = rank_predictions(scored, a.threshold);
    emit(ctx.out_file(), &predictions_to_jsonl(&ranked, a.threshold), stdout)
}

pub fn predictions_to_jsonl(ranked: &[PredictionRecord], threshold: f64) -> String {
    let mut out = String::new();
    for r in ranked {
        out.push_str(&serde_json::to_string(r).expect("prediction serializes"));
        out.push('\n');
    }
    let flagged = ranked.iter().filter(|r| r.predicted_label.is_positive()).count();
    out.push_str(&summary_line(ranked.len(), flagged, threshold));
    out
}

fn summary_line(total: usize, flagged: usize, threshold: f64) -> String {
    let line = SummaryLine {
        summary: Summary {
            total,
            flagged,
            flagged_fraction: if total == 0 { 0.0 } else { flagged as f64 / total as f64 },
            threshold,
        },
    };
    serde_json::to_string(&line).expect("summary serializes") + "\n"
}

fn cmd_baseline_rules(ctx: &Context, a: &RulesArgs, stdout: &mut dyn Write) -> Result<()> {
    let rules = match a.rules.clone().or_else(|| ctx.cfg.paths.keyword_rules.clone()) {
        Some(p) => KeywordRuleSet::load(p)?,
        None => KeywordRuleSet::builtin(),
    };
    let input = ctx.path(&a.input, &ctx.cfg.paths.test, "input")?;
    let corpus = read_corpus(&input)?;
    if corpus.is_empty() {
        return Err(Error::Data(format!("{} holds no records", input.display())));
    }
    let predicted = corpus
        .iter()
        .map(|r| keyword_match(r, &rules))
        .collect::<Result<Vec<_>>>()?;
    let text = if corpus.iter().all(|r| r.label.is_some()) {
        let truth: Vec<Label> = corpus.iter().filter_map(|r| r.label).collect();
        let report: EvalReport = confusion(&predicted, &truth)?;
        report.to_json()
    } else {
        let mut out = String::new();
        for (r, &label) in corpus.iter().zip(&predicted) {
            let flag = RuleFlag {
                id: &r.id,
                predicted_label: label,
            };
            out.push_str(&serde_json::to_string(&flag).expect("flag serializes"));
            out.push('\n');
        }
        let flagged = predicted.iter().filter(|l| l.is_positive()).count();
        out + &summary_line(corpus.len(), flagged, 1.0)
    };
    emit(ctx.out_file(), &text, stdout)
}

fn cmd_export_embeddings(ctx: &Context, a: &ExportArgs, stdout: &mut dyn Write) -> Result<()> {
    let ck = load_checkpoint(ctx, &a.checkpoint)?;
    let input = ctx.path(&a.input, &ctx.cfg.paths.test, "input")?;
    let corpus = read_corpus(&input)?;
    let emb = if corpus.is_empty() {
        None
    } else {
        Some(ck.embed(&corpus)?)
    };
    let mut out = String::new();
    for (i, r) in corpus.iter().enumerate() {
        out.push_str(&r.id);
        out.push('\t');
        if let Some(l) = r.label {
            out.push_str(&l.to_string());
        }
        for v in emb.as_ref().expect("non-empty corpus").row(i) {
            out.push('\t');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    emit(ctx.out_file(), &out, stdout)
}

fn cmd_synth(ctx: &Context, a: &SynthArgs, stdout: &mut dyn Write) -> Result<()> {
    let seed = ctx.cli.seed.unwrap_or(ctx.cfg.train.seed);
    let out = ctx.out_dir()?;
    let corpus = synth_corpus(seed, a.n_pos, a.n_neg, a.separation)?;
    let unlabeled = a
        .unlabeled
        .map(|n| synth_unlabeled(seed.wrapping_add(1), n, a.positive_rate, a.separation))
        .transpose()?;
    corpus.write(&out)?;
    if let Some((records, truth)) = unlabeled {
        crate::corpus::write_corpus(out.join(UNLABELED_FILE), &records)?;
        let text: String = records
            .iter()
            .zip(truth)
            .map(|(r, label)| serde_json::to_string(&HiddenLabel { id: &r.id, label }).expect("truth serializes") + "\n")
            .collect();
        write_file(&out.join(TRUTH_FILE), &text)?;
    }
    writeln!(stdout, "wrote synthetic corpus (seed {seed}) to {}", out.display()).map_err(|e| Error::io("<stdout>", e))
}
