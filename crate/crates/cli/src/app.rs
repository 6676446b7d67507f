//! Command definitions and their implementations.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use crfkit::features::{default_templates, parse_templates, FeatureTemplate, UnsupportedPolicy};
use crfkit::models::{
    load_model, save_model, tag, train_chain_crf, OptimizerChoice, SgdSchedule, TagMode, TrainConfig, TrainStatus,
};
use crfkit::objectives::{RegularizerSpec, DEFAULT_SIGMA2};
use crfkit::optimize::LbfgsConfig;
use crfkit::synth::{label_bias_corpus, synthetic_chain_task, LabelBiasConfig, SyntheticConfig};

use crate::bench::{bench_table, doubling_grid, doubling_ratio, run_bench, BenchConfig};
use crate::conll::{parse_conll, write_labeled, ConllCorpus, LineKind};
use crate::eval::evaluate;

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_PARSE: i32 = 2;
pub const EXIT_STALLED: i32 = 3;
pub const EXIT_FLAG_CONFLICT: i32 = 4;

/// A failed command and the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: anyhow::Error,
}

impl CliError {
    fn new(code: i32, error: impl Into<anyhow::Error>) -> Self {
        Self { code, error: error.into() }
    }

    fn parse(error: impl Into<anyhow::Error>) -> Self {
        Self::new(EXIT_PARSE, error)
    }
}

impl From<anyhow::Error> for CliError {
    fn from(error: anyhow::Error) -> Self {
        Self::new(EXIT_FAILURE, error)
    }
}

/// Malformed inputs map to the parse exit code, everything else to 1.
fn library(error: crfkit::Error, context: &str) -> CliError {
    use crfkit::Error as E;
    let code = match &error {
        E::Template { .. } | E::VersionMismatch { .. } | E::Checksum | E::Malformed { .. } | E::Corrupt(_) => EXIT_PARSE,
        _ => EXIT_FAILURE,
    };
    CliError::new(code, anyhow::Error::new(error).context(context.to_string()))
}

pub type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "crfkit", version, about = "Train, apply and evaluate linear-chain CRF taggers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a labeled CoNLL file.
    Train(TrainArgs),
    /// Append predicted labels to every token line of a CoNLL file.
    Tag(TagArgs),
    /// Score predictions against gold labels.
    Eval(EvalArgs),
    /// Summarize a model file.
    Inspect(InspectArgs),
    /// Time gradient evaluations over a label-count by length grid.
    Bench(BenchArgs),
    /// Write a seeded synthetic corpus.
    Fixture(FixtureArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Lbfgs,
    Sgd,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    /// Template file; a small word-feature set when omitted.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    #[arg(long)]
    pub model: PathBuf,
    /// Per-iteration trace; defaults to the model path with `.trace` appended.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "lbfgs")]
    pub optimizer: OptimizerArg,
    /// Gaussian prior variance (default 10).
    #[arg(long)]
    pub sigma2: Option<f64>,
    /// L1 strength; trains with proximal gradient steps.
    #[arg(long)]
    pub l1: Option<f64>,
    /// Add unsupported features whose gradient exceeds this after a first
    /// pass (0.1 when given without a value).
    #[arg(long, num_args = 0..=1, default_missing_value = "0.1")]
    pub epsilon_unsupported: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// SGD passes over the data.
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Viterbi,
    Marginal,
}

#[derive(Debug, Args)]
pub struct TagArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// `-` reads standard input.
    #[arg(long)]
    pub input: PathBuf,
    /// Defaults to standard output.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// `marginal` also appends the chosen label's posterior probability.
    #[arg(long, value_enum, default_value = "viterbi")]
    pub mode: ModeArg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    /// 1-based column of the predicted label in the prediction file.
    #[arg(long)]
    pub pred_column: Option<usize>,
    /// Also write `key<TAB>value` metrics here.
    #[arg(long)]
    pub tsv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Number of largest-magnitude weights to list.
    #[arg(long, default_value_t = 20)]
    pub top: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Smallest label count; the grid is M, 2M, 4M.
    #[arg(long, default_value_t = 8)]
    pub labels: usize,
    /// Shortest length; the grid is T, 2T, 4T.
    #[arg(long, default_value_t = 25)]
    pub length: usize,
    #[arg(long, default_value_t = 40)]
    pub instances: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FixtureKind {
    /// Two branches that differ only in their middle symbol.
    LabelBias,
    /// Sequences sampled from a random chain CRF.
    Synthetic,
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[arg(long, value_enum)]
    pub kind: FixtureKind,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sequences per split.
    #[arg(long, default_value_t = 200)]
    pub size: usize,
}

pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let result = match cli.command {
        Command::Train(a) => train(&a, out),
        Command::Tag(a) => tag_file(&a, out, err),
        Command::Eval(a) => eval(&a, out),
        Command::Inspect(a) => inspect(&a, out),
        Command::Bench(a) => bench(&a, out),
        Command::Fixture(a) => fixture(&a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {:#}", e.error);
            e.code
        }
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    if path == Path::new("-") {
        let mut s = String::new();
        io::stdin().read_to_string(&mut s).context("reading standard input")?;
        return Ok(s);
    }
    Ok(fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)
}

pub fn read_corpus(path: &Path) -> CliResult<ConllCorpus> {
    let text = read_text(path)?;
    parse_conll(&text).map_err(|e| CliError::parse(anyhow!("{}: {e}", path.display())))
}

fn read_templates(path: Option<&Path>) -> CliResult<Vec<FeatureTemplate>> {
    let Some(path) = path else {
        return Ok(default_templates());
    };
    let text = read_text(path)?;
    parse_templates(&text).map_err(|e| library(e, &path.display().to_string()))
}

fn io_err(e: io::Error) -> CliError {
    CliError::from(anyhow::Error::new(e))
}

pub fn train_config(args: &TrainArgs) -> CliResult<TrainConfig> {
    if args.l1.is_some() && args.sigma2.is_some() {
        return Err(CliError::new(
            EXIT_FLAG_CONFLICT,
            anyhow!("--l1 and --sigma2 select different regularizers; give only one"),
        ));
    }
    let regularizer = match (args.l1, args.sigma2) {
        (Some(alpha), _) => RegularizerSpec::L1 { alpha },
        (None, sigma2) => RegularizerSpec::L2 {
            sigma2: sigma2.unwrap_or(DEFAULT_SIGMA2),
        },
    };
    regularizer.validate().map_err(|e| library(e, "regularizer"))?;
    let mut lbfgs = LbfgsConfig::default();
    if let Some(n) = args.max_iters {
        lbfgs.max_iters = n;
    }
    let optimizer = match args.optimizer {
        OptimizerArg::Lbfgs => OptimizerChoice::Lbfgs(lbfgs),
        OptimizerArg::Sgd => OptimizerChoice::Sgd(SgdSchedule {
            epochs: args.epochs,
            ..SgdSchedule::default()
        }),
    };
    let mut config = TrainConfig {
        optimizer,
        regularizer,
        workers: args.workers.max(1),
        seed: args.seed,
        ..TrainConfig::default()
    };
    if let Some(n) = args.max_iters {
        config.prox.max_iters = n;
    }
    if let Some(epsilon) = args.epsilon_unsupported {
        config.unsupported = UnsupportedPolicy::Expand { epsilon };
    }
    Ok(config)
}

pub fn train(args: &TrainArgs, out: &mut dyn Write) -> CliResult {
    let config = train_config(args)?;
    let corpus = read_corpus(&args.train)?;
    let sequences = corpus
        .labeled()
        .map_err(|e| CliError::parse(anyhow!("{}: {e}", args.train.display())))?;
    let templates = read_templates(args.templates.as_deref())?;
    let start = Instant::now();
    let trained = train_chain_crf(&sequences, &templates, &config).map_err(|e| library(e, "training"))?;
    let elapsed = start.elapsed().as_secs_f64();
    let model = &trained.model;
    let summary = &trained.summary;
    let tokens: usize = sequences.iter().map(|s| s.len()).sum();
    let w = |r: io::Result<()>| r.map_err(io_err);
    w(writeln!(out, "sequences\t{}", sequences.len()))?;
    w(writeln!(out, "tokens\t{tokens}"))?;
    w(writeln!(out, "labels\t{}", model.space.num_labels()))?;
    w(writeln!(out, "features\t{}", model.space.observations().len()))?;
    w(writeln!(out, "parameters\t{}", model.weights.len()))?;
    for r in &summary.trace.records {
        w(writeln!(out, "iter {}\tobjective {}", r.iter, r.objective))?;
    }
    let nonzero = model.nonzero_weights();
    w(writeln!(out, "status\t{}", model.metadata.get("status").map_or("?", String::as_str)))?;
    w(writeln!(out, "objective\t{}", summary.objective))?;
    w(writeln!(out, "nonzero\t{nonzero}"))?;
    w(writeln!(
        out,
        "nonzero-fraction\t{:.4}",
        nonzero as f64 / model.weights.len().max(1) as f64
    ))?;
    w(writeln!(out, "seconds\t{elapsed:.3}"))?;
    save_model(model, &args.model).map_err(|e| library(e, "writing model"))?;
    let trace_path = args.trace.clone().unwrap_or_else(|| {
        let mut p = args.model.clone().into_os_string();
        p.push(".trace");
        PathBuf::from(p)
    });
    fs::write(&trace_path, summary.trace.to_text())
        .with_context(|| format!("writing {}", trace_path.display()))?;
    if summary.status == TrainStatus::Stalled {
        return Err(CliError::new(
            EXIT_STALLED,
            anyhow!(
                "line search stalled after {} iterations; the best iterate was written to {}",
                summary.iterations,
                args.model.display()
            ),
        ));
    }
    Ok(())
}

pub fn tag_text(model: &crfkit::models::LinearChainModel, text: &str, mode: TagMode) -> CliResult<String> {
    let corpus = parse_conll(text).map_err(|e| CliError::parse(anyhow!("{e}")))?;
    let tagged = corpus
        .sequences
        .iter()
        .enumerate()
        .map(|(i, s)| tag(model, &s.tokens(), mode).map_err(|e| library(e, &format!("sequence {}", i + 1))))
        .collect::<CliResult<Vec<_>>>()?;
    let mut result = String::with_capacity(text.len() * 2);
    for line in &corpus.lines {
        result.push_str(line.text.trim_end());
        if let LineKind::Token { sequence, position } = line.kind {
            let t = &tagged[sequence];
            result.push(' ');
            result.push_str(&t.labels[position]);
            if mode == TagMode::Marginal {
                result.push_str(&format!(" {:.6}", t.confidence[position]));
            }
        }
        result.push('\n');
    }
    Ok(result)
}

fn tag_file(args: &TagArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    let model = load_model(&args.model).map_err(|e| library(e, "loading model"))?;
    let text = read_text(&args.input)?;
    let mode = match args.mode {
        ModeArg::Viterbi => TagMode::Viterbi,
        ModeArg::Marginal => TagMode::Marginal,
    };
    let start = Instant::now();
    let tagged = tag_text(&model, &text, mode).map_err(|e| CliError {
        code: e.code,
        error: e.error.context(args.input.display().to_string()),
    })?;
    let _ = writeln!(err, "tagged in {:.3} s", start.elapsed().as_secs_f64());
    match &args.output {
        Some(p) => fs::write(p, tagged).with_context(|| format!("writing {}", p.display()))?,
        None => out.write_all(tagged.as_bytes()).map_err(io_err)?,
    }
    Ok(())
}

fn eval(args: &EvalArgs, out: &mut dyn Write) -> CliResult {
    let gold = read_corpus(&args.gold)?;
    let pred = read_corpus(&args.pred)?;
    let column = match args.pred_column {
        Some(0) => return Err(CliError::parse(anyhow!("--pred-column is 1-based"))),
        c => c.map(|c| c - 1),
    };
    let report = evaluate(&gold, &pred, column).map_err(|e| CliError::parse(anyhow!("{}: {e}", args.pred.display())))?;
    out.write_all(report.to_text().as_bytes()).map_err(io_err)?;
    if let Some(p) = &args.tsv {
        fs::write(p, report.to_tsv()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn inspect(args: &InspectArgs, out: &mut dyn Write) -> CliResult {
    let model = load_model(&args.model).map_err(|e| library(e, "loading model"))?;
    let mut text = String::new();
    let labels: Vec<&str> = model.space.labels().iter().collect();
    text.push_str(&format!("labels\t{}\n", labels.join(" ")));
    text.push_str(&format!("features\t{}\n", model.space.observations().len()));
    text.push_str(&format!("parameters\t{}\n", model.weights.len()));
    text.push_str(&format!("nonzero\t{}\n", model.nonzero_weights()));
    for t in &model.templates {
        text.push_str(&format!("template\t{}\n", t.to_line()));
    }
    for (k, v) in &model.metadata {
        text.push_str(&format!("meta.{k}\t{v}\n"));
    }
    let mut order: Vec<usize> = (0..model.weights.len()).collect();
    order.sort_by(|&a, &b| model.weights[b].abs().total_cmp(&model.weights[a].abs()).then(a.cmp(&b)));
    for &i in order.iter().take(args.top) {
        let key = model.space.feature_key(i).unwrap_or_default();
        text.push_str(&format!("weight\t{key}\t{}\n", model.weights[i]));
    }
    out.write_all(text.as_bytes()).map_err(io_err)
}

fn bench(args: &BenchArgs, out: &mut dyn Write) -> CliResult {
    let rows = run_bench(&BenchConfig {
        labels: doubling_grid(args.labels),
        lengths: doubling_grid(args.length),
        instances: args.instances,
        repeats: args.repeats,
        seed: args.seed,
    })?;
    let mut text = bench_table(&rows);
    if let Some(r) = doubling_ratio(&rows, false) {
        text.push_str(&format!("# length doubling ratio {r:.3}\n"));
    }
    if let Some(r) = doubling_ratio(&rows, true) {
        text.push_str(&format!("# label doubling ratio {r:.3}\n"));
    }
    out.write_all(text.as_bytes()).map_err(io_err)
}

fn fixture(args: &FixtureArgs, out: &mut dyn Write) -> CliResult {
    let (train, test) = match args.kind {
        FixtureKind::LabelBias => label_bias_corpus(&LabelBiasConfig {
            train: args.size,
            test: args.size,
            seed: args.seed,
            ..LabelBiasConfig::default()
        }),
        FixtureKind::Synthetic => {
            let task = synthetic_chain_task(&SyntheticConfig {
                train: args.size,
                test: args.size,
                seed: args.seed,
                ..SyntheticConfig::default()
            })
            .map_err(|e| library(e, "generating corpus"))?;
            (task.train, task.test)
        }
    };
    for (path, data) in [(&args.train, &train), (&args.test, &test)] {
        fs::write(path, write_labeled(data)).with_context(|| format!("writing {}", path.display()))?;
    }
    writeln!(out, "train\t{}\ntest\t{}", train.len(), test.len()).map_err(io_err)
}
