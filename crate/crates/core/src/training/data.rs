//! Manifest ingestion, preprocessing and the train/validation split.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use super::taco_train::CurvePoint;
use super::TrainingError;
use crate::audio::{self, AudioClip, TrimConfig};
use crate::phonetizer;
use crate::rng;

/// Smallest corpus [`split`] accepts.
pub const MIN_SPLIT_RECORDS: usize = 20;
pub const VALIDATION_FRACTION: f64 = 0.05;
/// File name of the processed manifest inside the output directory.
pub const PROCESSED_MANIFEST: &str = "processed.txt";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    /// 1-based line number in the manifest.
    pub line: usize,
    pub wav_path: String,
    pub text: String,
}

/// Parses `wav_path|text` lines. Blank lines are skipped; a line without a
/// separator is an error naming the line.
pub fn parse_manifest(content: &str) -> Result<Vec<ManifestRecord>, TrainingError> {
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (wav, text) = line.split_once('|').ok_or_else(|| TrainingError::Format(format!("manifest line {}: missing '|'", i + 1)))?;
        out.push(ManifestRecord { line: i + 1, wav_path: wav.trim().to_string(), text: text.trim().to_string() });
    }
    if out.is_empty() {
        return Err(TrainingError::EmptyManifest);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub sample_rate: u32,
    pub trim_db: f64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self { sample_rate: audio::SAMPLE_RATE, trim_db: 60.0 }
    }
}

/// A preprocessed utterance. Paths are relative to the output directory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProcessedRecord {
    pub name: String,
    pub wav: String,
    pub mel: String,
    pub text: String,
    pub ids: Vec<usize>,
    pub n_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordFailure {
    pub line: usize,
    pub wav_path: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct IngestReport {
    pub processed: Vec<ProcessedRecord>,
    pub failures: Vec<RecordFailure>,
}

/// Output file stem for a manifest wav path.
fn stem_for(wav_path: &str) -> String {
    let p = Path::new(wav_path);
    let no_ext = p.with_extension("");
    no_ext.to_string_lossy().chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn process_one(rec: &ManifestRecord, wav_dir: &Path, out_dir: &Path, opts: &IngestOptions) -> Result<ProcessedRecord, String> {
    let ids = phonetizer::phonetize_str(&rec.text).map_err(|e| format!("text: {e}"))?.ids();
    if ids.is_empty() {
        return Err("text: no symbols".into());
    }
    let clip = audio::load_wav(wav_dir.join(&rec.wav_path)).map_err(|e| format!("audio: {e}"))?;
    let clip = if clip.sample_rate() == opts.sample_rate { clip } else { audio::resample(&clip, opts.sample_rate) };
    let trim = TrimConfig { threshold_db: opts.trim_db, ..TrimConfig::default() };
    let clip = audio::trim_silence(&clip, &trim).map_err(|e| format!("audio: {e}"))?;
    // store what the vocoder will read back: 16-bit samples
    let samples: Vec<f64> = clip.samples().iter().map(|&s| audio::quantize_i16(s) as f64 / 32768.0).collect();
    let clip = AudioClip::new(samples, opts.sample_rate).map_err(|e| format!("audio: {e}"))?;
    let cfg = audio::MelConfig { sample_rate: opts.sample_rate, ..audio::MelConfig::default() };
    let mel = audio::mel_spectrogram_with(&clip, &cfg).map_err(|e| format!("mel: {e}"))?;
    let name = stem_for(&rec.wav_path);
    let (wav, mel_file) = (format!("{name}.wav"), format!("{name}.json"));
    audio::write_wav(out_dir.join(&wav), &clip).map_err(|e| format!("write: {e}"))?;
    audio::write_mel(out_dir.join(&mel_file), &mel).map_err(|e| format!("write: {e}"))?;
    Ok(ProcessedRecord { name, wav, mel: mel_file, text: rec.text.clone(), ids, n_frames: mel.n_frames() })
}

/// Loads, resamples, trims and mel-extracts every record in parallel,
/// writing `<name>.wav`, the mel header and sidecar, and
/// [`PROCESSED_MANIFEST`] into `out_dir`. Per-record failures are collected
/// and logged; results are in manifest order.
pub fn ingest(manifest_path: &Path, wav_dir: &Path, out_dir: &Path, opts: &IngestOptions) -> Result<IngestReport, TrainingError> {
    let records = parse_manifest(&std::fs::read_to_string(manifest_path)?)?;
    std::fs::create_dir_all(out_dir)?;
    let mut seen = HashSet::new();
    let dupes: Vec<bool> = records.iter().map(|r| !seen.insert(stem_for(&r.wav_path))).collect();
    let results: Vec<Result<ProcessedRecord, String>> = records
        .par_iter()
        .zip(dupes.par_iter())
        .map(|(r, &dup)| if dup { Err("duplicate wav path".into()) } else { process_one(r, wav_dir, out_dir, opts) })
        .collect();
    let mut report = IngestReport::default();
    for (rec, res) in records.iter().zip(results) {
        match res {
            Ok(p) => report.processed.push(p),
            Err(error) => {
                log::warn!("line {} ({}): {error}", rec.line, rec.wav_path);
                report.failures.push(RecordFailure { line: rec.line, wav_path: rec.wav_path.clone(), error });
            }
        }
    }
    write_processed_manifest(&out_dir.join(PROCESSED_MANIFEST), &report.processed)?;
    Ok(report)
}

/// `name|wav|mel|text` per line.
pub fn write_processed_manifest(path: &Path, records: &[ProcessedRecord]) -> Result<(), TrainingError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        writeln!(f, "{}|{}|{}|{}", r.name, r.wav, r.mel, r.text)?;
    }
    f.flush()?;
    Ok(())
}

/// A processed record with absolute paths, as read back for training.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessedEntry {
    pub name: String,
    pub wav: PathBuf,
    pub mel: PathBuf,
    pub text: String,
}

/// Reads a processed manifest; relative paths resolve against its directory.
pub fn read_processed_manifest(path: &Path) -> Result<Vec<ProcessedEntry>, TrainingError> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in std::fs::read_to_string(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.splitn(4, '|').collect();
        let [name, wav, mel, text] = parts[..] else {
            return Err(TrainingError::Format(format!("processed manifest line {}: expected 4 fields", i + 1)));
        };
        out.push(ProcessedEntry { name: name.into(), wav: base.join(wav), mel: base.join(mel), text: text.into() });
    }
    if out.is_empty() {
        return Err(TrainingError::EmptyManifest);
    }
    Ok(out)
}

/// Number of validation records for a corpus of `n`: `0.05·n` rounded half
/// up.
pub fn validation_count(n: usize) -> usize {
    (VALIDATION_FRACTION * n as f64 + 0.5).floor() as usize
}

/// Seeded shuffle of `0..n`; the first `n − validation_count(n)` indices
/// train, the rest validate.
pub fn split(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>), TrainingError> {
    if n < MIN_SPLIT_RECORDS {
        return Err(TrainingError::TooFewRecords(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(seed));
    let val = order.split_off(n - validation_count(n));
    Ok((order, val))
}

/// `step,train_loss,val_loss,diagonality`; missing values are empty.
pub fn write_curve_csv(path: &Path, curve: &[CurvePoint]) -> Result<(), TrainingError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,train_loss,val_loss,diagonality")?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.8}")).unwrap_or_default();
    for p in curve {
        writeln!(f, "{},{:.8},{},{}", p.step, p.train_loss, opt(p.val_loss), opt(p.diagonality))?;
    }
    f.flush()?;
    Ok(())
}
