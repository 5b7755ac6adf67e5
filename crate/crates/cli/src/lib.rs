//! The `star` command line: synthetic data generation, training, tracking,
//! evaluation and slot-correlation analysis.
//!
//! Every command accepts `--config <file.json>`; flags given on the command
//! line override values from the file. The resolved configuration is
//! written as `config.json` into every output directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use star_dst::context::HistoryWindow;
use star_dst::corpus::{generate_synthetic, load_corpus, CopyRule, Corpus, SyntheticConfig};
use star_dst::correlation::{analyze, render_bars, report_json, SampleUnit};
use star_dst::metrics::{Convention, MetricReport, ReportKind};
use star_dst::model::ModelConfig;
use star_dst::tracker::{read_predictions, write_predictions, PredictionHeader, TrackMode, Tracker};
use star_dst::train::{init_model, load_checkpoint, save_checkpoint, train, TrainConfig, TrainError};

/// Environment variable consulted when no seed is given.
pub const SEED_ENV: &str = "STAR_SEED";

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config files or input paths. Exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Failure after the inputs were validated. Exit code 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Runtime(_) => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "star", version, about = "Slot self-attentive dialogue state tracking")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus split 80/10/10 into train/valid/test.
    GenData(GenDataArgs),
    /// Train a tracker and save the best checkpoint.
    Train(TrainArgs),
    /// Run a checkpoint over a corpus and write predictions.
    Track(TrackArgs),
    /// Score a predictions file.
    Eval(EvalArgs),
    /// Rank slot pairs by normalized mutual information.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// JSON config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of dialogues [default: 500]
    #[arg(long)]
    pub dialogues: Option<usize>,
    /// Comma-separated subset of the built-in domains
    /// (restaurant, hotel, attraction, taxi).
    #[arg(long, value_delimiter = ',')]
    pub domains: Option<Vec<String>>,
    /// Copy rule `target=source`; repeat for several. Replaces the default
    /// rules when given.
    #[arg(long = "copy-rule")]
    pub copy_rules: Vec<String>,
    /// Random seed [default: $STAR_SEED, else 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training corpus file, or a gen-data directory holding train.json
    /// and valid.json.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Validation corpus file (required when --corpus is a file).
    #[arg(long)]
    pub valid: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Slot self-attention layers; 0 disables slot self-attention [default: 6]
    #[arg(long)]
    pub layers: Option<usize>,
    /// Attention heads [default: 4]
    #[arg(long)]
    pub heads: Option<usize>,
    /// Hidden size [default: 64]
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Previous turns kept in the context: a number or `full` [default: full]
    #[arg(long = "history-turns")]
    pub history_turns: Option<HistoryWindow>,
    /// Batch size [default: 16]
    #[arg(long)]
    pub batch: Option<usize>,
    /// Epochs [default: 30]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Peak encoder learning rate [default: 4e-5]
    #[arg(long = "lr-encoder")]
    pub lr_encoder: Option<f64>,
    /// Peak learning rate for everything after the encoder [default: 1e-4]
    #[arg(long = "lr-decoder")]
    pub lr_decoder: Option<f64>,
    /// Warmup proportion of total steps [default: 0.1]
    #[arg(long)]
    pub warmup: Option<f64>,
    /// Word dropout rate on history and current-turn tokens [default: 0.1]
    #[arg(long = "word-dropout")]
    pub word_dropout: Option<f64>,
    /// Upper bound on optimizer steps.
    #[arg(long = "max-steps")]
    pub max_steps: Option<usize>,
    /// Steps between validations; 0 validates once per epoch [default: 0]
    #[arg(long = "eval-every")]
    pub eval_every: Option<usize>,
    /// Validations without improvement before stopping [default: 5]
    #[arg(long)]
    pub patience: Option<usize>,
    /// Worker threads; 0 uses every core [default: 0]
    #[arg(long)]
    pub workers: Option<usize>,
    /// Random seed [default: $STAR_SEED, else 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    /// JSON config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint written by `star train`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Corpus file, or a gen-data directory (its test.json is used).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Output directory for predictions.jsonl.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Feed gold previous states instead of the model's own predictions.
    #[arg(long = "oracle-state")]
    pub oracle_state: bool,
    /// Previous turns kept in the context [default: the checkpoint's]
    #[arg(long = "history-turns")]
    pub history_turns: Option<HistoryWindow>,
    /// Worker threads; 0 uses every core [default: 0]
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// JSON config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Predictions file, or a track output directory.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// all | jga | per-turn | domain | slot [default: all]
    #[arg(long)]
    pub report: Option<ReportKind>,
    /// Slot accuracy denominator: all | domain-active [default: both]
    #[arg(long)]
    pub convention: Option<Convention>,
    /// Also write metrics.json and per_turn.csv into this directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// JSON config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus file, or a gen-data directory (its train.json is used).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Only rank partners of this slot [default: every slot]
    #[arg(long)]
    pub slot: Option<String>,
    /// Partners listed per slot [default: 5]
    #[arg(long)]
    pub k: Option<usize>,
    /// turn | final-state [default: turn]
    #[arg(long)]
    pub unit: Option<SampleUnit>,
    /// Also write correlation.json into this directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Resolved `gen-data` configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct GenDataConfig {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub synthetic: SyntheticConfig,
}


/// Resolved `train` configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRunConfig {
    pub corpus: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Resolved `track` configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackRunConfig {
    pub checkpoint: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub mode: TrackMode,
    pub history: Option<HistoryWindow>,
    /// 0 uses every core.
    pub workers: usize,
}

/// Resolved `eval` configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalRunConfig {
    pub predictions: Option<PathBuf>,
    pub report: ReportKind,
    pub convention: Option<Convention>,
    pub out: Option<PathBuf>,
}

impl Default for EvalRunConfig {
    fn default() -> Self {
        Self {
            predictions: None,
            report: ReportKind::All,
            convention: None,
            out: None,
        }
    }
}

/// Resolved `analyze` configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeRunConfig {
    pub corpus: Option<PathBuf>,
    pub slot: Option<String>,
    pub k: usize,
    pub unit: SampleUnit,
    pub out: Option<PathBuf>,
}

impl Default for AnalyzeRunConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            slot: None,
            k: 5,
            unit: SampleUnit::Turn,
            out: None,
        }
    }
}

#[derive(Serialize)]
struct Echo<'a, C> {
    command: &'a str,
    #[serde(flatten)]
    config: &'a C,
}

fn read_config<C: DeserializeOwned + Default>(path: Option<&Path>, command: &str) -> Result<C> {
    let Some(path) = path else {
        return Ok(C::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let bad = |e: serde_json::Error| usage(format!("config {}: {e}", path.display()));
    let value: serde_json::Value = serde_json::from_str(&text).map_err(bad)?;
    if let Some(n) = value.get("command").and_then(serde_json::Value::as_str) {
        if n != command {
            return Err(usage(format!(
                "config {} is for `{n}`, not `{command}`",
                path.display()
            )));
        }
    }
    parse_config(&text).map(|(_, cfg)| cfg).map_err(bad)
}

/// Parses a command config. Unknown keys are rejected, except a top-level
/// `"command"` string (as written into echoed `config.json` files), which is
/// returned alongside.
pub fn parse_config<C: DeserializeOwned>(
    text: &str,
) -> Result<(Option<String>, C), serde_json::Error> {
    let mut value: serde_json::Value = serde_json::from_str(text)?;
    let command = match value.as_object_mut() {
        Some(map) if map.get("command").is_some_and(serde_json::Value::is_string) => map
            .remove("command")
            .and_then(|v| v.as_str().map(str::to_string)),
        _ => None,
    };
    Ok((command, serde_json::from_value(value)?))
}

fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> Result<u64> {
    if let Some(s) = flag.or(file) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| usage(format!("missing required --{flag}")))
}

fn require_file(p: &Path, what: &str) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", p.display())))
    }
}

/// A corpus path may name a file or a gen-data directory.
fn corpus_file(p: &Path, split: &str) -> Result<PathBuf> {
    let file = if p.is_dir() { p.join(format!("{split}.json")) } else { p.to_path_buf() };
    require_file(&file, "corpus")?;
    Ok(file)
}

fn load(p: &Path) -> Result<Corpus> {
    load_corpus(p).map_err(|e| usage(format!("{}: {e}", p.display())))
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| runtime(format!("cannot create {}: {e}", p.display())))
}

fn write_file(p: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(p, contents).map_err(|e| runtime(format!("cannot write {}: {e}", p.display())))
}

fn echo_config<C: Serialize>(dir: &Path, command: &str, config: &C) -> Result<()> {
    let text = serde_json::to_string_pretty(&Echo { command, config }).expect("config serializes");
    write_file(&dir.join("config.json"), text + "\n")
}

fn say(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(runtime)
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Track(a) => track(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Analyze(a) => analyze_cmd(a, out),
    }
}

pub fn resolve_gen_data(a: &GenDataArgs) -> Result<GenDataConfig> {
    let mut cfg: GenDataConfig = read_config(a.config.as_deref(), "gen-data")?;
    if a.out.is_some() {
        cfg.out = a.out.clone();
    }
    cfg.seed = Some(resolve_seed(a.seed, cfg.seed)?);
    let syn = &mut cfg.synthetic;
    if let Some(n) = a.dialogues {
        syn.dialogues = n;
    }
    if let Some(keep) = &a.domains {
        let keep: Vec<String> = keep.iter().map(|d| d.trim().to_lowercase()).collect();
        for d in &keep {
            if !syn.domains.iter().any(|s| &s.name == d) {
                return Err(usage(format!("unknown domain {d:?}")));
            }
        }
        syn.domains.retain(|s| keep.contains(&s.name));
        let live = |slot: &str| keep.iter().any(|d| slot.starts_with(&format!("{d}-")));
        syn.copy_rules.retain(|r| live(&r.target) && live(&r.source));
        syn.max_domains = syn.max_domains.min(syn.domains.len()).max(1);
    }
    if !a.copy_rules.is_empty() {
        syn.copy_rules = a
            .copy_rules
            .iter()
            .map(|r| r.parse::<CopyRule>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| usage(e.to_string()))?;
    }
    syn.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn gen_data(a: GenDataArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve_gen_data(&a)?;
    let dir = require(&cfg.out, "out")?.to_path_buf();
    let seed = cfg.seed.expect("resolved");
    let corpus = generate_synthetic(&cfg.synthetic, seed).map_err(runtime)?;
    create_dir(&dir)?;
    let parts = corpus.split(&[0.8, 0.1, 0.1]);
    for (name, part) in ["train", "valid", "test"].iter().zip(&parts) {
        part.save(&dir.join(format!("{name}.json"))).map_err(runtime)?;
    }
    write_file(&dir.join("ontology.json"), corpus.ontology.to_export_json() + "\n")?;
    echo_config(&dir, "gen-data", &cfg)?;
    say(
        out,
        &format!(
            "wrote {} dialogues ({} / {} / {}) to {}\n",
            corpus.dialogues.len(),
            parts[0].dialogues.len(),
            parts[1].dialogues.len(),
            parts[2].dialogues.len(),
            dir.display()
        ),
    )
}

pub fn resolve_train(a: &TrainArgs) -> Result<TrainRunConfig> {
    let mut cfg: TrainRunConfig = read_config(a.config.as_deref(), "train")?;
    for (dst, src) in [
        (&mut cfg.corpus, &a.corpus),
        (&mut cfg.valid, &a.valid),
        (&mut cfg.out, &a.out),
    ] {
        if src.is_some() {
            *dst = src.clone();
        }
    }
    let seed = resolve_seed(a.seed, cfg.seed)?;
    cfg.seed = Some(seed);
    cfg.train.seed = seed;
    let m = &mut cfg.model;
    if let Some(v) = a.layers {
        m.layers = v;
    }
    if let Some(v) = a.heads {
        m.heads = v;
    }
    if let Some(v) = a.hidden {
        m.hidden = v;
    }
    let t = &mut cfg.train;
    if let Some(v) = a.history_turns {
        t.history = v;
    }
    if let Some(v) = a.batch {
        t.batch_size = v;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.lr_encoder {
        t.lr_encoder = v;
    }
    if let Some(v) = a.lr_decoder {
        t.lr_decoder = v;
    }
    if let Some(v) = a.warmup {
        t.warmup = v;
    }
    if let Some(v) = a.word_dropout {
        t.word_dropout = v;
    }
    if let Some(v) = a.eval_every {
        t.eval_every = v;
    }
    if let Some(v) = a.patience {
        t.patience = v;
    }
    if a.max_steps.is_some() {
        t.max_steps = a.max_steps;
    }
    if let Some(w) = a.workers {
        t.workers = w;
    }
    t.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve_train(&a)?;
    let corpus_path = require(&cfg.corpus, "corpus")?;
    let dir = require(&cfg.out, "out")?.to_path_buf();
    let train_file = corpus_file(corpus_path, "train")?;
    let valid_file = match (&cfg.valid, corpus_path.is_dir()) {
        (Some(v), _) => {
            require_file(v, "validation corpus")?;
            v.clone()
        }
        (None, true) => corpus_file(corpus_path, "valid")?,
        (None, false) => return Err(usage("--valid is required when --corpus is a file")),
    };
    let train_set = load(&train_file)?;
    let valid_set = load(&valid_file)?
        .with_ontology(&train_set.ontology)
        .map_err(|e| usage(format!("{}: {e}", valid_file.display())))?;
    let seed = cfg.seed.expect("resolved");
    let (vocab, mut model) = init_model(&train_set, cfg.model.clone(), seed).map_err(|e| match e {
        TrainError::Model(e) => usage(e.to_string()),
        e => runtime(e),
    })?;
    create_dir(&dir)?;
    echo_config(&dir, "train", &cfg)?;
    let mut log = String::new();
    let outcome = train(
        &mut model,
        &vocab,
        &train_set.ontology,
        &train_set.dialogues,
        &valid_set.dialogues,
        &cfg.train,
        &mut |r| {
            log.push_str(&serde_json::to_string(r).expect("record serializes"));
            log.push('\n');
            eprintln!(
                "step {:>6}  epoch {:>3}  loss {:.4}  valid jga {:.4}{}",
                r.step,
                r.epoch,
                r.train_loss,
                r.valid_jga,
                if r.best { "  *" } else { "" }
            );
        },
    )
    .map_err(runtime)?;
    write_file(&dir.join("train_log.jsonl"), &log)?;
    let (best_step, best_jga) = (outcome.best_step, outcome.best_jga);
    let ckpt = outcome.into_checkpoint(vocab, train_set.ontology.clone(), &cfg.train);
    save_checkpoint(&ckpt, &dir.join("checkpoint.star")).map_err(runtime)?;
    say(
        out,
        &format!(
            "best validation jga {best_jga:.4} at step {best_step}; checkpoint in {}\n",
            dir.display()
        ),
    )
}

pub fn resolve_track(a: &TrackArgs) -> Result<TrackRunConfig> {
    let mut cfg: TrackRunConfig = read_config(a.config.as_deref(), "track")?;
    for (dst, src) in [
        (&mut cfg.checkpoint, &a.checkpoint),
        (&mut cfg.corpus, &a.corpus),
        (&mut cfg.out, &a.out),
    ] {
        if src.is_some() {
            *dst = src.clone();
        }
    }
    if a.oracle_state {
        cfg.mode = TrackMode::GroundTruthPrevState;
    }
    if a.history_turns.is_some() {
        cfg.history = a.history_turns;
    }
    if let Some(w) = a.workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

fn track(a: TrackArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = resolve_track(&a)?;
    let ckpt_path = require(&cfg.checkpoint, "checkpoint")?;
    require_file(ckpt_path, "checkpoint")?;
    let corpus_path = corpus_file(require(&cfg.corpus, "corpus")?, "test")?;
    let dir = require(&cfg.out, "out")?.to_path_buf();
    let ckpt = load_checkpoint(ckpt_path).map_err(|e| usage(e.to_string()))?;
    let corpus = load(&corpus_path)?
        .with_ontology(&ckpt.ontology)
        .map_err(|e| usage(format!("{}: {e}", corpus_path.display())))?;
    let window = *cfg.history.get_or_insert(ckpt.history);
    let tracker = Tracker::new(&ckpt.model, &ckpt.vocab, &ckpt.ontology, window)
        .map_err(|e| usage(e.to_string()))?;
    let records = tracker
        .batch_track(&corpus.dialogues, cfg.mode, cfg.workers)
        .map_err(runtime)?;
    create_dir(&dir)?;
    echo_config(&dir, "track", &cfg)?;
    let path = dir.join("predictions.jsonl");
    let file = fs::File::create(&path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    let header = PredictionHeader::new(Some(cfg.mode), &ckpt.ontology);
    write_predictions(std::io::BufWriter::new(file), &header, &records).map_err(runtime)?;
    say(
        out,
        &format!("tracked {} turns into {}\n", records.len(), path.display()),
    )
}

pub fn resolve_eval(a: &EvalArgs) -> Result<EvalRunConfig> {
    let mut cfg: EvalRunConfig = read_config(a.config.as_deref(), "eval")?;
    if a.predictions.is_some() {
        cfg.predictions = a.predictions.clone();
    }
    if let Some(r) = a.report {
        cfg.report = r;
    }
    if a.convention.is_some() {
        cfg.convention = a.convention;
    }
    if a.out.is_some() {
        cfg.out = a.out.clone();
    }
    Ok(cfg)
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve_eval(&a)?;
    let p = require(&cfg.predictions, "predictions")?;
    let path = if p.is_dir() { p.join("predictions.jsonl") } else { p.to_path_buf() };
    require_file(&path, "predictions file")?;
    let file = fs::File::open(&path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let (header, records) = read_predictions(std::io::BufReader::new(file))
        .map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let report = MetricReport::compute(&records, &header.slots).map_err(runtime)?;
    if let Some(dir) = &cfg.out {
        create_dir(dir)?;
        echo_config(dir, "eval", &cfg)?;
        write_file(&dir.join("metrics.json"), report.to_json() + "\n")?;
        write_file(&dir.join("per_turn.csv"), report.per_turn_csv())?;
    }
    say(out, &report.render(cfg.report, cfg.convention))
}

pub fn resolve_analyze(a: &AnalyzeArgs) -> Result<AnalyzeRunConfig> {
    let mut cfg: AnalyzeRunConfig = read_config(a.config.as_deref(), "analyze")?;
    if a.corpus.is_some() {
        cfg.corpus = a.corpus.clone();
    }
    if a.slot.is_some() {
        cfg.slot = a.slot.clone();
    }
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(u) = a.unit {
        cfg.unit = u;
    }
    if a.out.is_some() {
        cfg.out = a.out.clone();
    }
    if cfg.k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    Ok(cfg)
}

fn analyze_cmd(a: AnalyzeArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve_analyze(&a)?;
    let path = corpus_file(require(&cfg.corpus, "corpus")?, "train")?;
    let corpus = load(&path)?;
    let rankings = analyze(&corpus, cfg.slot.as_deref(), cfg.k, cfg.unit).map_err(|e| usage(e.to_string()))?;
    if let Some(dir) = &cfg.out {
        create_dir(dir)?;
        echo_config(dir, "analyze", &cfg)?;
        write_file(&dir.join("correlation.json"), report_json(&rankings) + "\n")?;
    }
    for r in &rankings {
        for d in &r.diagnostics {
            eprintln!("note: {d}");
        }
    }
    say(out, &render_bars(&rankings, 40))
}
