//! `aratts` command-line driver.
//!
//! Exit codes: 0 success, 1 invalid input or failed check, 2 runtime failure.

mod commands;
mod train;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "aratts", version, about = "Diacritized Arabic text to speech")]
struct Cli {
    /// Worker threads for parallel stages. Defaults to ARATTS_THREADS, else
    /// every core. `--threads 1` makes all commands fully deterministic.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Phonetize a text file line by line.
    Phonetize(commands::PhonetizeArgs),
    /// Resample, trim and mel-extract a manifest of recordings.
    Preprocess(commands::PreprocessArgs),
    /// Train the spectrogram prediction network.
    TrainTaco(train::TrainTacoArgs),
    /// Train the flow vocoder.
    TrainVocoder(train::TrainVocoderArgs),
    /// Text to WAV with trained checkpoints.
    Synthesize(commands::SynthesizeArgs),
    /// Finite-difference check of every registered gradient.
    Gradcheck(commands::GradcheckArgs),
}

/// Marks an error caused by the caller's input (exit code 1).
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Invalid(msg.into()))
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    use aratts::training::TrainingError;
    for cause in err.chain() {
        if cause.is::<Invalid>() || cause.is::<aratts::phonetizer::PhonetizeError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<TrainingError>() {
            if matches!(
                e,
                TrainingError::EmptyManifest | TrainingError::TooFewRecords(_) | TrainingError::ShapeConflict { .. } | TrainingError::Format(_)
            ) {
                return 1;
            }
        }
        if cause.is::<aratts::taco::TacoError>() && !matches!(cause.downcast_ref(), Some(aratts::taco::TacoError::Autograd(_))) {
            return 1;
        }
    }
    2
}

/// Prints the resolved configuration and writes it to `path`.
pub fn record_config(path: &Path, command: &str, threads: usize, config: &impl Serialize) -> Result<()> {
    let value = serde_json::json!({ "command": command, "threads": threads, "config": config });
    let text = serde_json::to_string_pretty(&value)?;
    println!("{text}");
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// `<file>.run_config.json` beside an output file.
pub fn config_beside(file: &Path) -> PathBuf {
    let mut name = file.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".run_config.json");
    file.with_file_name(name)
}

fn resolve_threads(flag: Option<usize>) -> Result<usize> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var("ARATTS_THREADS") {
            Ok(v) => v.trim().parse().map_err(|_| invalid(format!("ARATTS_THREADS={v:?} is not a thread count")))?,
            Err(_) => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        },
    };
    if n == 0 {
        return Err(invalid("thread count must be at least 1"));
    }
    // a pool may already exist when called twice in one process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(n)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let threads = resolve_threads(cli.threads)?;
    match cli.command {
        Command::Phonetize(a) => commands::phonetize(a, threads),
        Command::Preprocess(a) => commands::preprocess(a, threads),
        Command::TrainTaco(a) => train::train_taco(a, threads),
        Command::TrainVocoder(a) => train::train_vocoder(a, threads),
        Command::Synthesize(a) => commands::synthesize(a, threads),
        Command::Gradcheck(a) => commands::gradcheck(a, threads),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
