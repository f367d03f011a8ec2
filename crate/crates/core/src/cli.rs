//! Command-line front end: `train`, `eval`, `predict` and `augment`.

use crate::artifacts::{ModelArtifacts, RunManifest, TRAIN_LOG};
use crate::augment::{build_batch_pairs, generate_positive};
use crate::config::TrainConfig;
use crate::corpus::{format_dataset, parse_dataset, parse_token_blocks, SlotDictionary, Utterance};
use crate::error::Error;
use crate::train::Trainer;
use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "jointslu", version, about = "Joint multi-intent detection and slot filling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write it to a directory.
    Train(TrainArgs),
    /// Score a model on a labelled dataset.
    Eval(EvalArgs),
    /// Label token-only utterances.
    Predict(PredictArgs),
    /// Show augmented positives and contrastive pairs.
    Augment(AugmentArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` config file; defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training set in token/tag/intent block format.
    #[arg(long)]
    pub train: PathBuf,
    /// Development set used for early stopping and model selection.
    #[arg(long)]
    pub dev: PathBuf,
    /// Output model directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Extra `key=value` config overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Model directory or its `model.ckpt`.
    #[arg(long)]
    pub model: PathBuf,
    /// Labelled dataset.
    #[arg(long)]
    pub data: PathBuf,
    /// Where to write the JSON report.
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Model directory or its `model.ckpt`.
    #[arg(long)]
    pub model: PathBuf,
    /// One token per line, blank line between utterances.
    #[arg(long)]
    pub input: PathBuf,
    /// Labelled output in the dataset block format.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    /// Labelled dataset providing utterances and the slot dictionary.
    #[arg(long)]
    pub train: PathBuf,
    /// Number of (base, positive) pairs to print.
    #[arg(long, default_value_t = 5)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Utterances in the sampled contrastive batch.
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Negatives per anchor for the sampled batch.
    #[arg(long, default_value_t = 8)]
    pub negatives: usize,
    /// Write the pair manifest here instead of stdout.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

/// An error tagged with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: Error,
}

fn config_err(error: Error) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        error,
    }
}

fn data_err(error: Error) -> Failure {
    Failure {
        code: EXIT_DATA,
        error,
    }
}

fn other(error: Error) -> Failure {
    Failure {
        code: EXIT_FAILURE,
        error,
    }
}

fn read_dataset(path: &Path) -> Result<Vec<Utterance>, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| data_err(Error::Contract(format!("cannot read {}: {e}", path.display()))))?;
    let data = parse_dataset(&text).map_err(data_err)?;
    if data.is_empty() {
        return Err(data_err(Error::Contract(format!(
            "{} holds no utterances",
            path.display()
        ))));
    }
    Ok(data)
}

fn load_model(path: &Path) -> Result<ModelArtifacts, Failure> {
    ModelArtifacts::load(path).map_err(|e| match e {
        Error::Config(_) => config_err(e),
        e => other(e),
    })
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.error);
            f.code
        }
    }
}

pub fn run(command: Command, out: &mut dyn Write) -> Result<(), Failure> {
    match command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Predict(a) => cmd_predict(&a, out),
        Command::Augment(a) => cmd_augment(&a, out),
    }
}

fn io(e: std::io::Error) -> Failure {
    other(e.into())
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p).map_err(config_err)?,
        None => TrainConfig::default(),
    };
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| config_err(Error::Config(format!("override {kv:?} is not key=value"))))?;
        cfg.set(k, v).map_err(config_err)?;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(config_err)?;
    let train = read_dataset(&a.train)?;
    let dev = read_dataset(&a.dev)?;

    fs::create_dir_all(&a.out).map_err(io)?;
    RunManifest::new(&cfg, &a.train, &a.dev, &a.out)
        .write_new(&a.out)
        .map_err(other)?;
    let mut trainer = Trainer::new(cfg.clone(), &train).map_err(data_err)?;
    ModelArtifacts::save(&a.out, &cfg, &trainer.vocab, &trainer.store, None).map_err(other)?;
    let mut log = fs::File::create(a.out.join(TRAIN_LOG)).map_err(io)?;
    let outcome = trainer
        .fit(&dev, |line| {
            writeln!(log, "{}", serde_json::to_string(line)?)?;
            log.flush()?;
            Ok(())
        })
        .map_err(other)?;
    ModelArtifacts::save(
        &a.out,
        &cfg,
        &trainer.vocab,
        &trainer.store,
        Some(&trainer.snapshot),
    )
    .map_err(other)?;
    writeln!(
        out,
        "trained {} epochs{}; best dev overall acc {:.4} at epoch {}",
        outcome.epochs_run,
        if outcome.stopped_early { " (early stop)" } else { "" },
        outcome.best_dev_overall,
        outcome.best_epoch
    )
    .map_err(io)?;
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let model = load_model(&a.model)?;
    let data = read_dataset(&a.data)?;
    let report = model.evaluate(&data).map_err(other)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| other(e.into()))?;
    fs::write(&a.report, json).map_err(io)?;
    writeln!(
        out,
        "slot_f1 {:.4}\nintent_acc {:.4}\noverall_acc {:.4}",
        report.slot_f1, report.intent_acc, report.overall_acc
    )
    .map_err(io)?;
    Ok(())
}

pub fn cmd_predict(a: &PredictArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let model = load_model(&a.model)?;
    let text = fs::read_to_string(&a.input).map_err(|e| {
        data_err(Error::Contract(format!("cannot read {}: {e}", a.input.display())))
    })?;
    let inputs = parse_token_blocks(&text)
        .into_iter()
        .map(|tokens| {
            let tags = vec!["O".to_string(); tokens.len()];
            Utterance::new(tokens, tags, vec!["?".into()])
        })
        .collect::<crate::Result<Vec<_>>>()
        .map_err(data_err)?;
    let preds = model.predict(&inputs).map_err(other)?;
    fs::write(&a.output, format_dataset(&preds)).map_err(io)?;
    writeln!(out, "labelled {} utterances", preds.len()).map_err(io)?;
    Ok(())
}

pub fn cmd_augment(a: &AugmentArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let data = read_dataset(&a.train)?;
    let dict = SlotDictionary::from_utterances(&data).map_err(data_err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    for _ in 0..a.n {
        let base = data.choose(&mut rng).unwrap();
        let pos = generate_positive(base, &dict, &mut rng).map_err(other)?;
        writeln!(out, "base:     {}", base.tokens.join(" ")).map_err(io)?;
        writeln!(out, "positive: {}", pos.utterance.tokens.join(" ")).map_err(io)?;
        writeln!(out).map_err(io)?;
    }
    let batch: Vec<Utterance> = data
        .choose_multiple(&mut rng, a.batch_size.min(data.len()))
        .cloned()
        .collect();
    if batch.len() < 2 {
        return Err(data_err(Error::Contract(
            "a contrastive batch needs at least two utterances".into(),
        )));
    }
    let positives = batch
        .iter()
        .map(|u| generate_positive(u, &dict, &mut rng))
        .collect::<crate::Result<Vec<_>>>()
        .map_err(other)?;
    let pairs = build_batch_pairs(&batch, &positives, &mut rng, a.negatives).map_err(other)?;
    let lines = pairs.manifest_lines().map_err(other)?;
    match &a.manifest {
        Some(p) => {
            fs::write(p, lines.join("\n") + "\n").map_err(io)?;
            writeln!(out, "wrote {} pair records to {}", lines.len(), p.display()).map_err(io)?;
        }
        None => {
            for l in &lines {
                writeln!(out, "{l}").map_err(io)?;
            }
        }
    }
    Ok(())
}
