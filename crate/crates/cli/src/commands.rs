use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;

use aratts::audio::{self, write_mel, write_wav};
use aratts::phonetizer::phonetize_str;
use aratts::taco::InferOptions;
use aratts::training::{diagonality, ingest, load_taco, load_waveglow, write_alignment_pgm, Checkpoint, IngestOptions};
use aratts::verify;

use crate::{config_beside, invalid, record_config};

#[derive(Args, Serialize)]
pub struct PhonetizeArgs {
    /// UTF-8 text, one utterance per line.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Space-separated symbols, one line per kept input line.
    #[arg(long)]
    pub out: PathBuf,
    /// Skip invalid lines instead of failing.
    #[arg(long)]
    pub lenient: bool,
}

pub fn phonetize(a: PhonetizeArgs, threads: usize) -> Result<ExitCode> {
    record_config(&config_beside(&a.out), "phonetize", threads, &a)?;
    let bytes = std::fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let text = String::from_utf8(bytes).map_err(|e| invalid(format!("{}: not UTF-8 ({e})", a.input.display())))?;
    let mut out = String::new();
    let mut failures = Vec::new();
    for (i, line) in text.lines().enumerate() {
        match phonetize_str(line) {
            Ok(seq) => {
                out.push_str(&seq.to_strings().join(" "));
                out.push('\n');
            }
            Err(e) => failures.push(format!("line {}: {e}", i + 1)),
        }
    }
    for f in &failures {
        eprintln!("{f}");
    }
    if !failures.is_empty() && !a.lenient {
        eprintln!("{} line(s) failed; nothing written", failures.len());
        return Ok(ExitCode::from(1));
    }
    if !failures.is_empty() {
        eprintln!("skipped {} line(s)", failures.len());
    }
    std::fs::write(&a.out, out).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Args, Serialize)]
pub struct PreprocessArgs {
    /// Lines of `relative_wav_path|diacritized text`.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub wav_dir: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = audio::SAMPLE_RATE)]
    pub sample_rate: u32,
    /// Frames this many dB below the loudest are trimmed from the ends.
    #[arg(long, default_value_t = 60.0)]
    pub trim_db: f64,
}

pub fn preprocess(a: PreprocessArgs, threads: usize) -> Result<ExitCode> {
    record_config(&a.out_dir.join("run_config.json"), "preprocess", threads, &a)?;
    let opts = IngestOptions { sample_rate: a.sample_rate, trim_db: a.trim_db };
    let report = ingest(&a.manifest, &a.wav_dir, &a.out_dir, &opts)?;
    let failures_path = a.out_dir.join("failures.json");
    std::fs::write(&failures_path, serde_json::to_string_pretty(&report.failures)? + "\n")?;
    println!("processed {} record(s), {} failed", report.processed.len(), report.failures.len());
    for f in &report.failures {
        println!("  line {} ({}): {}", f.line, f.wav_path, f.error);
    }
    if report.processed.is_empty() {
        return Err(invalid(format!("all {} record(s) failed; see {}", report.failures.len(), failures_path.display())));
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Args, Serialize)]
pub struct SynthesizeArgs {
    /// Spectrogram network checkpoint.
    #[arg(long)]
    pub taco: PathBuf,
    /// Vocoder checkpoint.
    #[arg(long)]
    pub vocoder: PathBuf,
    /// Diacritized text.
    #[arg(long)]
    pub text: String,
    /// Standard deviation of the vocoder's latent noise.
    #[arg(long, default_value_t = 0.6)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output WAV; the alignment image and mel are written beside it.
    #[arg(long)]
    pub out: PathBuf,
    /// Decoder step cap (defaults to the model's own limit).
    #[arg(long)]
    pub max_steps: Option<usize>,
}

fn load_checkpoint(path: &PathBuf) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

pub fn synthesize(a: SynthesizeArgs, threads: usize) -> Result<ExitCode> {
    record_config(&config_beside(&a.out), "synthesize", threads, &a)?;
    if !(a.sigma >= 0.0 && a.sigma.is_finite()) {
        return Err(invalid(format!("sigma must be a non-negative number, got {}", a.sigma)));
    }
    let ids = phonetize_str(&a.text)?.ids();
    if ids.is_empty() {
        return Err(invalid("text has no symbols"));
    }
    let taco = load_taco(&load_checkpoint(&a.taco)?)?;
    let vocoder = load_waveglow(&load_checkpoint(&a.vocoder)?)?;
    if taco.config.n_mels != vocoder.config.n_mels {
        return Err(invalid(format!("spectrogram network emits {} mel bands, vocoder expects {}", taco.config.n_mels, vocoder.config.n_mels)));
    }
    let inf = taco.infer(&ids, &InferOptions { max_steps: a.max_steps })?;
    let hop = vocoder.config.hop;
    let mel = inf.spectrogram(hop, audio::FRAME_LENGTH, audio::SAMPLE_RATE);
    let clip = vocoder.synthesize(&mel, a.sigma, a.seed, audio::SAMPLE_RATE)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_wav(&a.out, &clip)?;
    let stem = a.out.with_extension("");
    let pgm = stem.with_extension("alignment.pgm");
    write_alignment_pgm(&pgm, &inf.alignment)?;
    let mel_path = stem.with_extension("mel.json");
    write_mel(&mel_path, &mel)?;
    println!(
        "wrote {} ({} samples, {} frames), alignment diagonality {:.3}",
        a.out.display(),
        clip.len(),
        mel.n_frames(),
        diagonality(&inf.alignment)
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Args, Serialize)]
pub struct GradcheckArgs {
    /// Restrict to one module (autodiff, taco, vocoder).
    #[arg(long)]
    pub module: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the per-check report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Corrupt the backward rule of this op (for testing the checker).
    #[arg(long, hide = true)]
    pub fault: Option<String>,
}

pub fn gradcheck(a: GradcheckArgs, threads: usize) -> Result<ExitCode> {
    match &a.out {
        Some(out) => record_config(&config_beside(out), "gradcheck", threads, &a)?,
        None => println!("{}", serde_json::to_string_pretty(&serde_json::json!({ "command": "gradcheck", "threads": threads, "config": &a }))?),
    }
    let module = a.module.as_deref().filter(|m| *m != "all");
    if let Some(m) = module {
        if !verify::modules().contains(&m) {
            return Err(invalid(format!("unknown module {m:?}; expected one of {:?}", verify::modules())));
        }
    }
    let results = verify::run_gradchecks(module, a.seed, a.fault.as_deref());
    for r in &results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        match &r.error {
            Some(e) => println!("{:<22} {:<9} error: {e} {status}", r.name, r.module),
            None => println!("{:<22} {:<9} max_rel_err {:.3e} ({} entries) {status}", r.name, r.module, r.max_rel_error, r.checked),
        }
    }
    if let Some(out) = &a.out {
        std::fs::write(out, serde_json::to_string_pretty(&results)? + "\n")?;
    }
    let failing: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failing.is_empty() {
        println!("all {} checks below {:e}", results.len(), verify::GRADCHECK_TOLERANCE);
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("failing ops: {}", failing.join(", "));
        Ok(ExitCode::from(1))
    }
}
