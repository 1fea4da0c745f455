//! The `fakeit` command line.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::bundle::{load_model, save_model};
use crate::config::CliConfig;
use crate::data::generator::{generate_synthetic, SplitCounts};
use crate::data::{encode_samples, load_corpus};
use crate::diagnostics::run_gradcheck;
use crate::error::{Error, Result};
use crate::eval::{compare_baselines, evaluate, render_report, ReportFormat};
use crate::fusion::{label_name, FAKE, GENUINE};
use crate::image::load_image;
use crate::model::{Mode, ModelSettings};
use crate::text::VocabConfig;
use crate::train::{TrainConfig, TrainReport};

#[derive(Debug, Parser)]
#[command(name = "fakeit", version, about = "Multimodal fake review detector")]
pub struct Cli {
    /// JSON settings file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Seed for data generation, initialization, shuffling and dropout.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus and split it into train/val/test.
    GenData(GenDataArgs),
    /// Train one model with early stopping on the validation split.
    Train(TrainArgs),
    /// Score a trained model, or train and compare all three modes.
    Eval(EvalArgs),
    /// Classify a single review.
    Predict(PredictArgs),
    /// Check every backward rule against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Number of samples.
    #[arg(long)]
    pub n: Option<usize>,
    /// Train, validation and test fractions, e.g. 0.7,0.15,0.15.
    #[arg(long, value_delimiter = ',', value_name = "R,R,R")]
    pub ratios: Option<Vec<f64>>,
    /// Number of review topics (1 to 6).
    #[arg(long)]
    pub n_topics: Option<usize>,
    /// Probability that the image hue matches the review topic.
    #[arg(long)]
    pub p_match: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus directory.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Where to write the model bundle.
    #[arg(long, value_name = "MODEL")]
    pub out: Option<PathBuf>,
    /// fused, text_only or image_only.
    #[arg(long, default_value = "fused")]
    pub mode: Mode,
    /// Training report path (defaults to the bundle path with a
    /// `.report.json` extension).
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Decoupled weight decay on weight matrices.
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Maximum number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Epochs without validation improvement before stopping.
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Corpus directory.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Model bundle to score.
    #[arg(long, value_name = "PATH")]
    pub model: Option<PathBuf>,
    /// Mode the model is expected to have.
    #[arg(long)]
    pub mode: Option<Mode>,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// plain, csv or json.
    #[arg(long, default_value = "plain")]
    pub format: ReportFormat,
    /// Write the report here instead of stdout.
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
    /// Train fused, text-only and image-only models on the corpus and
    /// report all three on the test split.
    #[arg(long)]
    pub compare: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Model bundle.
    #[arg(long, value_name = "PATH")]
    pub model: Option<PathBuf>,
    /// Review text (required unless the model is image-only).
    #[arg(long, value_name = "STR")]
    pub text: Option<String>,
    /// Review image as binary PPM (required unless the model is text-only).
    #[arg(long, value_name = "FILE")]
    pub image: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Skew the matmul backward rule; the run is then expected to fail.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

/// Everything `train` writes next to the bundle.
#[derive(Debug, Serialize)]
pub struct TrainSummary<'a> {
    pub model: &'a ModelSettings,
    pub vocab: VocabConfig,
    pub train: &'a TrainConfig,
    pub param_count: usize,
    pub training: &'a TrainReport,
}

fn required<'p>(value: &'p Option<PathBuf>, flag: &str) -> Result<&'p Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::Config(format!("missing {flag} (pass it as a flag or under \"paths\" in the config file)")))
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn resolve(cli: &Cli) -> Result<CliConfig> {
    let mut cfg = CliConfig::base(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    match &cli.command {
        Command::GenData(a) => {
            set_path(&mut cfg.paths.out, a.out.clone());
            set(&mut cfg.generator.n, a.n);
            if let Some(r) = &a.ratios {
                cfg.generator.ratios = r.as_slice().try_into().map_err(|_| {
                    Error::Config(format!("--ratios needs three values, got {}", r.len()))
                })?;
            }
            set(&mut cfg.generator.n_topics, a.n_topics);
            set(&mut cfg.generator.p_match, a.p_match);
        }
        Command::Train(a) => {
            set_path(&mut cfg.paths.data, a.data.clone());
            set_path(&mut cfg.paths.model, a.out.clone());
            set_path(&mut cfg.paths.report, a.report.clone());
            set(&mut cfg.train.lr, a.lr);
            set(&mut cfg.train.weight_decay, a.weight_decay);
            set(&mut cfg.train.batch_size, a.batch_size);
            set(&mut cfg.train.max_epochs, a.epochs);
            set(&mut cfg.train.patience, a.patience);
        }
        Command::Eval(a) => {
            set_path(&mut cfg.paths.data, a.data.clone());
            set_path(&mut cfg.paths.model, a.model.clone());
            set_path(&mut cfg.paths.report, a.report.clone());
        }
        Command::Predict(a) => set_path(&mut cfg.paths.model, a.model.clone()),
        Command::Gradcheck(_) => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, value: Option<PathBuf>) {
    if value.is_some() {
        *slot = value;
    }
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn gen_data(cfg: &CliConfig, out: &mut dyn Write) -> Result<()> {
    let dir = required(&cfg.paths.out, "--out")?;
    let split = generate_synthetic(&cfg.generator, dir)?;
    let counts = SplitCounts::of(&split);
    for (name, c) in [("train", counts.train), ("val", counts.val), ("test", counts.test)] {
        writeln!(
            out,
            "{name:<5} {:>6}  fake {:>6}  genuine {:>6}",
            c[FAKE] + c[GENUINE],
            c[FAKE],
            c[GENUINE]
        )
        .map_err(io_err)?;
    }
    Ok(())
}

fn train(cfg: &CliConfig, mode: Mode, out: &mut dyn Write) -> Result<()> {
    let data = required(&cfg.paths.data, "--data")?;
    let model_path = required(&cfg.paths.model, "--out")?;
    let corpus = load_corpus(data)?;
    let exp = cfg.experiment();
    let mut write_err = None;
    let (model, report) = exp.train_mode(&corpus, mode, |r| {
        if let Err(e) = writeln!(
            out,
            "epoch {:>3}  loss {:.4}  val_acc {:.4}",
            r.epoch, r.train_loss, r.val_accuracy
        ) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(io_err(e));
    }
    save_model(&model, model_path)?;
    let report_path = cfg
        .paths
        .report
        .clone()
        .unwrap_or_else(|| model_path.with_extension("report.json"));
    let summary = TrainSummary {
        model: &exp.model,
        vocab: exp.vocab,
        train: &exp.train,
        param_count: model.param_count(),
        training: &report,
    };
    let body = serde_json::to_string_pretty(&summary).expect("plain data serializes") + "\n";
    write_text(&report_path, &body)?;
    writeln!(
        out,
        "best epoch {} (val_acc {:.4}), stopped: {}",
        report.best_epoch,
        report.best_val_accuracy,
        serde_json::to_value(report.stop_reason).expect("enum serializes").as_str().unwrap_or("")
    )
    .map_err(io_err)?;
    writeln!(out, "model: {}\nreport: {}", model_path.display(), report_path.display()).map_err(io_err)
}

fn eval(cfg: &CliConfig, args: &EvalArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let data = required(&cfg.paths.data, "--data")?;
    let corpus = load_corpus(data)?;
    let machine = args.format != ReportFormat::Plain && cfg.paths.report.is_none();
    let reports = if args.compare {
        let runs = compare_baselines(&corpus, &cfg.experiment(), |mode, r| {
            let _ = writeln!(
                err,
                "[{mode}] epoch {:>3}  loss {:.4}  val_acc {:.4}",
                r.epoch, r.train_loss, r.val_accuracy
            );
        })?;
        runs.into_iter().map(|r| r.metrics).collect()
    } else {
        let model = load_model(required(&cfg.paths.model, "--model")?)?;
        let mode = args.mode.unwrap_or(model.mode());
        let samples = encode_samples(corpus.split(&args.split)?, &model)?;
        let report = evaluate(&model, &samples, mode, &args.split)?;
        let matrix = report.confusion.render();
        if machine {
            write!(err, "{matrix}").map_err(io_err)?;
        } else {
            write!(out, "{matrix}").map_err(io_err)?;
        }
        vec![report]
    };
    let body = render_report(&reports, args.format)?;
    match &cfg.paths.report {
        Some(path) => {
            write_text(path, &body)?;
            writeln!(out, "report: {}", path.display()).map_err(io_err)
        }
        None => write!(out, "{body}").map_err(io_err),
    }
}

fn predict(cfg: &CliConfig, args: &PredictArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let model = load_model(required(&cfg.paths.model, "--model")?)?;
    let mode = model.mode();
    if !mode.uses_image() && args.image.is_some() {
        let _ = writeln!(err, "note: {mode} model ignores --image");
    }
    if !mode.uses_text() && args.text.is_some() {
        let _ = writeln!(err, "note: {mode} model ignores --text");
    }
    let image = match (&args.image, mode.uses_image()) {
        (Some(path), true) => Some(load_image(path)?),
        (None, true) => return Err(Error::Config(format!("{mode} model needs --image"))),
        _ => None,
    };
    if mode.uses_text() && args.text.is_none() {
        return Err(Error::Config(format!("{mode} model needs --text")));
    }
    let input = model.prepare(args.text.as_deref(), image.as_ref())?;
    let probs = model.probabilities(&input)?;
    let label = model.predict(&input)?;
    writeln!(
        out,
        "{}  p(fake)={:.4}  p(genuine)={:.4}",
        label_name(label),
        probs[FAKE],
        probs[GENUINE]
    )
    .map_err(io_err)
}

/// Returns whether every component passed.
fn gradcheck(seed: u64, fault: bool, out: &mut dyn Write, err: &mut dyn Write) -> Result<bool> {
    let checks = run_gradcheck(seed, fault)?;
    for c in &checks {
        writeln!(out, "{c}").map_err(io_err)?;
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.name).collect();
    if failed.is_empty() {
        writeln!(out, "all {} components passed", checks.len()).map_err(io_err)?;
        Ok(true)
    } else {
        let _ = writeln!(err, "gradient check failed: {}", failed.join(", "));
        Ok(false)
    }
}

/// Exit code when a check ran to completion but did not pass.
pub const CHECK_FAILED: i32 = 3;

fn dispatch(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let cfg = resolve(cli)?;
    match &cli.command {
        Command::GenData(_) => gen_data(&cfg, out)?,
        Command::Train(a) => train(&cfg, a.mode, out)?,
        Command::Eval(a) => eval(&cfg, a, out, err)?,
        Command::Predict(a) => predict(&cfg, a, out, err)?,
        Command::Gradcheck(a) => {
            if !gradcheck(cfg.train.seed, a.inject_fault, out, err)? {
                return Ok(CHECK_FAILED);
            }
        }
    }
    Ok(0)
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code: 0 on success, 1 for usage and
/// configuration errors, 2 for data and format errors, 3 for training,
/// evaluation and gradient-check failures.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                1
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    match dispatch(&cli, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
