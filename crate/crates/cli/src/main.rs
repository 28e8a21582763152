//! `mta`: generate journeys, train the conversion model, evaluate it,
//! attribute conversions to clicks and compare channels with last-click.
//!
//! Results go to stdout as `key=value` lines; progress and diagnostics go
//! to stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use mta_core::attribution::{
    attribute_journey, load_records, save_records, AttributionError, AttributionOptions,
    AttributionRecord, AttributionResult, Method,
};
use mta_core::journey::{
    generate_synthetic, load_journeys, save_journeys, GeneratorConfig, JourneyError,
};
use mta_core::model::ModelError;
use mta_core::report::{aggregate_channels, emit_report, last_click_report, ReportFormat};
use mta_core::trainer::{
    evaluate_roc, train_with_progress, write_loss_history, write_roc_csv, Optimizer, TrainConfig,
    TrainError,
};
use mta_core::{Checkpoint, Vocabulary};

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_EVALUATION: u8 = 4;

#[derive(Parser)]
#[command(name = "mta", version, about = "Multi-touch attribution pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic journeys with a planted conversion rule.
    Gen(GenArgs),
    /// Train a conversion model and write a checkpoint.
    Train(TrainArgs),
    /// Step-level ROC of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Per-click attribution weights for every journey.
    Attribute(AttributeArgs),
    /// Per-channel GMV table against last-click.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    /// Vocabulary output; defaults to the journey path with extension `vocab.json`.
    #[arg(long)]
    vocab_out: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    journeys: usize,
    #[arg(long, default_value_t = 4)]
    channels: usize,
    #[arg(long, default_value_t = 3)]
    campaigns: usize,
    #[arg(long, default_value_t = 8)]
    max_len: usize,
    #[arg(long, default_value_t = 0)]
    key_channel: usize,
    #[arg(long, default_value_t = 0.6)]
    key_lift: f64,
    #[arg(long, default_value_t = 0.2)]
    base_rate: f64,
    #[arg(long, default_value_t = 48.0)]
    span_hours: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep journeys that did not convert.
    #[arg(long)]
    include_nonconverted: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Loss history CSV; defaults to `<out>.loss.csv`.
    #[arg(long)]
    loss_out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Use SGD with this momentum instead of plain SGD.
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    r_on_init: Option<f64>,
    #[arg(long)]
    max_seq_len: Option<usize>,
    #[arg(long)]
    validation_fraction: Option<f64>,
    /// Keep gate periods, shifts and open ratios at their initial values.
    #[arg(long)]
    freeze_timing: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    roc_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Ols,
    Kernel,
    ShapleyExact,
    ShapleySampled,
    Auto,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Ols => Method::Ols,
            MethodArg::Kernel => Method::KernelOls,
            MethodArg::ShapleyExact => Method::ShapleyExact,
            MethodArg::ShapleySampled => Method::ShapleySampled,
            MethodArg::Auto => Method::Auto,
        }
    }
}

#[derive(Args)]
struct AttributeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "auto")]
    method: MethodArg,
    /// Permutations for sampled Shapley.
    #[arg(long, default_value_t = mta_core::attribution::DEFAULT_SHAPLEY_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = mta_core::attribution::DEFAULT_EXACT_LIMIT)]
    exact_limit: usize,
    /// Fit the regression through the origin.
    #[arg(long)]
    no_intercept: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    attr: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    json: Option<PathBuf>,
}

/// An error tagged with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

type CliResult = Result<(), Failure>;

fn fail(code: u8, error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code,
        error: error.into(),
    }
}

fn journey_code(_: &JourneyError) -> u8 {
    EXIT_USAGE
}

fn model_code(e: &ModelError) -> u8 {
    match e {
        ModelError::NonFinite(_) => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

fn train_code(e: &TrainError) -> u8 {
    match e {
        TrainError::Diverged { .. } => EXIT_NUMERIC,
        TrainError::Model(m) => model_code(m),
        TrainError::Evaluation(_) | TrainError::NoSteps => EXIT_EVALUATION,
        _ => EXIT_USAGE,
    }
}

fn attribution_code(e: &AttributionError) -> u8 {
    match e {
        AttributionError::Numeric(_) => EXIT_NUMERIC,
        AttributionError::Model(m) => model_code(m),
        AttributionError::Train(t) => train_code(t),
        _ => EXIT_USAGE,
    }
}

fn from_journey(e: JourneyError) -> Failure {
    fail(journey_code(&e), e)
}

fn from_model(e: ModelError) -> Failure {
    fail(model_code(&e), e)
}

fn from_train(e: TrainError) -> Failure {
    fail(train_code(&e), e)
}

fn from_attribution(e: AttributionError) -> Failure {
    fail(attribution_code(&e), e)
}

fn default_vocab_path(out: &Path) -> PathBuf {
    out.with_extension("vocab.json")
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn gen(args: GenArgs) -> CliResult {
    let cfg = GeneratorConfig {
        n_journeys: args.journeys,
        n_channels: args.channels,
        n_campaigns: args.campaigns,
        max_len: args.max_len,
        key_channel_index: args.key_channel,
        key_lift: args.key_lift,
        base_rate: args.base_rate,
        time_span_hours: args.span_hours,
        include_nonconverted: args.include_nonconverted,
    };
    let (vocab, journeys) = generate_synthetic(&cfg, args.seed).map_err(from_journey)?;
    let vocab_path = args.vocab_out.unwrap_or_else(|| default_vocab_path(&args.out));
    save_journeys(&args.out, &journeys).map_err(from_journey)?;
    vocab.save(&vocab_path).map_err(from_journey)?;
    let converted = journeys.iter().filter(|j| j.converted).count();
    let rate = if journeys.is_empty() {
        0.0
    } else {
        converted as f64 / journeys.len() as f64
    };
    println!("journeys={}", journeys.len());
    println!("converted={converted}");
    println!("conversion_rate={rate}");
    println!("data={}", args.out.display());
    println!("vocab={}", vocab_path.display());
    Ok(())
}

fn train_config(args: &TrainArgs) -> TrainConfig {
    let mut cfg = match args.preset {
        Preset::Desk => TrainConfig::desk(),
        Preset::Paper => TrainConfig::paper(),
    };
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.hidden {
        cfg.hidden_size = v;
    }
    if let Some(v) = args.layers {
        cfg.n_layers = v;
    }
    if let Some(v) = args.dropout {
        cfg.dropout_p = v;
    }
    if let Some(momentum) = args.momentum {
        cfg.optimizer = Optimizer::SgdMomentum { momentum };
    }
    if let Some(v) = args.r_on_init {
        cfg.r_on_init = v;
    }
    if let Some(v) = args.max_seq_len {
        cfg.max_seq_len = v;
    }
    if let Some(v) = args.validation_fraction {
        cfg.validation_fraction = v;
    }
    cfg.freeze_timing |= args.freeze_timing;
    cfg
}

fn train(args: TrainArgs) -> CliResult {
    let cfg = train_config(&args);
    cfg.validate().map_err(from_train)?;
    let journeys = load_journeys(&args.data).map_err(from_journey)?;
    let vocab = Vocabulary::load(&args.vocab).map_err(from_journey)?;
    eprintln!(
        "training on {} journeys: hidden {}, {} layers, {} epochs, batch {}",
        journeys.len(),
        cfg.hidden_size,
        cfg.n_layers,
        cfg.epochs,
        cfg.batch_size
    );
    let outcome = train_with_progress(&journeys, &vocab, &cfg, |row| match row.val_loss {
        Some(v) => eprintln!("epoch {:>4}  train {:.6}  val {:.6}", row.epoch, row.train_loss, v),
        None => eprintln!("epoch {:>4}  train {:.6}", row.epoch, row.train_loss),
    })
    .map_err(from_train)?;
    Checkpoint::new(&outcome.params, &vocab, cfg.seed)
        .save(&args.out)
        .map_err(from_model)?;
    let loss_path = args.loss_out.unwrap_or_else(|| suffixed(&args.out, ".loss.csv"));
    write_loss_history(&loss_path, &outcome.history).map_err(from_train)?;
    let last = outcome.history.last().expect("history has the initial row");
    println!("epochs={}", last.epoch);
    println!("final_train_loss={}", last.train_loss);
    if let Some(v) = last.val_loss {
        println!("final_val_loss={v}");
    }
    println!("checkpoint={}", args.out.display());
    println!("loss_history={}", loss_path.display());
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, mta_core::ModelParams), Failure> {
    let ckpt = Checkpoint::load(path).map_err(from_model)?;
    let params = ckpt.params().map_err(from_model)?;
    Ok((ckpt, params))
}

fn eval(args: EvalArgs) -> CliResult {
    let (ckpt, params) = load_checkpoint(&args.model)?;
    let journeys = load_journeys(&args.data).map_err(from_journey)?;
    let result = evaluate_roc(&params, &ckpt.vocab, &journeys).map_err(from_train)?;
    if let Some(path) = &args.roc_out {
        write_roc_csv(path, &result.roc_points).map_err(from_train)?;
    }
    let steps: usize = journeys.iter().map(|j| j.events.len()).sum();
    println!("auc={}", result.auc);
    println!("accuracy={}", result.per_step_accuracy);
    println!("steps={steps}");
    Ok(())
}

fn attribute(args: AttributeArgs) -> CliResult {
    let (ckpt, params) = load_checkpoint(&args.model)?;
    let journeys = load_journeys(&args.data).map_err(from_journey)?;
    let opts = AttributionOptions {
        n_samples: args.samples,
        seed: args.seed,
        exact_limit: args.exact_limit,
        intercept: !args.no_intercept,
        ..AttributionOptions::default()
    };
    let method = Method::from(args.method);
    eprintln!("attributing {} journeys with {}", journeys.len(), method.as_str());
    let results: Result<Vec<AttributionResult>, (usize, AttributionError)> = journeys
        .par_iter()
        .enumerate()
        .map(|(i, j)| attribute_journey(&params, &ckpt.vocab, j, method, &opts).map_err(|e| (i, e)))
        .collect();
    let results = results.map_err(|(i, e)| {
        let code = attribution_code(&e);
        fail(code, anyhow!(e).context(format!("journey {} ({})", i + 1, journeys[i].user_id)))
    })?;
    let records: Vec<AttributionRecord> = journeys
        .iter()
        .zip(&results)
        .map(|(j, r)| AttributionRecord::new(j, r))
        .collect();
    save_records(&args.out, &records).map_err(from_attribution)?;
    let unattributed = results.iter().filter(|r| r.unattributed).count();
    println!("journeys={}", records.len());
    println!("unattributed={unattributed}");
    println!("method={}", method.as_str());
    println!("out={}", args.out.display());
    Ok(())
}

fn report(args: ReportArgs) -> CliResult {
    let records = load_records(&args.attr).map_err(from_attribution)?;
    let journeys = load_journeys(&args.data).map_err(from_journey)?;
    // An empty attribution file yields an all-zero table.
    let pairs: Vec<_> = if records.is_empty() {
        eprintln!("attribution file is empty; writing an empty table");
        Vec::new()
    } else {
        if records.len() != journeys.len() {
            return Err(fail(
                EXIT_USAGE,
                anyhow!(
                    "{} attribution records but {} journeys",
                    records.len(),
                    journeys.len()
                ),
            ));
        }
        let mut pairs = Vec::new();
        for (i, (record, journey)) in records.iter().zip(&journeys).enumerate() {
            let channels: Vec<&str> = journey.channels().collect();
            if record.user_id != journey.user_id || record.channels != channels {
                return Err(fail(
                    EXIT_USAGE,
                    anyhow!("record {} does not match journey {}", i + 1, journey.user_id),
                ));
            }
            if journey.converted {
                pairs.push((journey.clone(), record.result()));
            }
        }
        pairs
    };
    let model = aggregate_channels(&pairs).map_err(|e| fail(EXIT_USAGE, e))?;
    let baseline = last_click_report(&pairs).map_err(|e| fail(EXIT_USAGE, e))?;
    let table = emit_report(&model, &baseline, &args.out, ReportFormat::Csv)
        .map_err(|e| fail(EXIT_USAGE, e))?;
    if let Some(path) = &args.json {
        emit_report(&model, &baseline, path, ReportFormat::Json).map_err(|e| fail(EXIT_USAGE, e))?;
    }
    println!("channels={}", table.rows.len());
    println!("attributed={}", model.attributed_journeys);
    println!("unattributed={}", model.unattributed_journeys);
    println!("attributed_gmv={}", model.total_gmv);
    println!("deepmta_gmv={}", table.totals.deepmta_gmv);
    println!("lastclick_gmv={}", table.totals.lastclick_gmv);
    println!("out={}", args.out.display());
    Ok(())
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(value) = std::env::var("MTA_THREADS") {
        let n: usize = value
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("MTA_THREADS must be a positive integer, got `{value}`"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(EXIT_USAGE);
    }
    let outcome = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Attribute(a) => attribute(a),
        Command::Report(a) => report(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
