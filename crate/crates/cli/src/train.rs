use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use aratts::audio::{load_wav, read_mel, MelSpectrogram};
use aratts::phonetizer::{phonetize_str, SYMBOL_COUNT};
use aratts::taco::{TacoConfig, Tacotron, EMBEDDING_PARAM};
use aratts::tensor::Tensor;
use aratts::training::{
    self, read_processed_manifest, split, taco_checkpoint, toy_corpus, toy_taco_config, toy_vocoder_corpus, train_taco as fit_taco,
    train_vocoder as fit_vocoder, transfer_init, waveglow_checkpoint, write_alignment_csv, write_alignment_pgm, write_curve_csv, Checkpoint,
    CurvePoint, TacoExample, TacoTrainConfig, ToyConfig, TrainingError, VocoderExample, VocoderTrainConfig, MIN_SPLIT_RECORDS,
};
use aratts::vocoder::{WaveGlow, WaveGlowConfig};

use crate::{invalid, record_config};

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Full,
    Reduced,
    Toy,
}

#[derive(Args, Serialize)]
pub struct TrainTacoArgs {
    /// Processed manifest written by `preprocess`.
    #[arg(long, conflicts_with = "toy", required_unless_present = "toy")]
    pub manifest: Option<PathBuf>,
    /// Train on the built-in synthetic corpus.
    #[arg(long)]
    pub toy: bool,
    /// JSON run configuration; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Network size when no config file is given.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Start from another checkpoint, remapping its symbol embedding.
    #[arg(long)]
    pub init_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Evaluate and dump alignments every N epochs.
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TacoRunConfig {
    pub model: TacoConfig,
    pub train: TacoTrainConfig,
    /// Number of evaluation utterances whose alignment is dumped per eval.
    #[serde(default = "default_dumps")]
    pub dump_alignments: usize,
}

fn default_dumps() -> usize {
    4
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn mel_tensor(mel: &MelSpectrogram) -> Tensor {
    Tensor::new(&[mel.n_frames(), mel.n_mels()], mel.values().to_vec())
}

/// Splits when the corpus is large enough, otherwise trains on everything.
fn split_or_all<T: Clone>(items: Vec<T>, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.len() < MIN_SPLIT_RECORDS {
        log::warn!("{} record(s) is below {MIN_SPLIT_RECORDS}; training on all of them without validation", items.len());
        return Ok((items, Vec::new()));
    }
    let (tr, va) = split(items.len(), seed)?;
    Ok((tr.iter().map(|&i| items[i].clone()).collect(), va.iter().map(|&i| items[i].clone()).collect()))
}

fn abort_record(out: &Path, err: &TrainingError) -> Result<()> {
    if let TrainingError::Aborted { step, detail } = err {
        let body = serde_json::json!({ "step": step, "error": detail });
        std::fs::write(out.join("abort.json"), serde_json::to_string_pretty(&body)? + "\n")?;
    }
    Ok(())
}

fn taco_examples(manifest: &Path) -> Result<Vec<TacoExample>> {
    let entries = read_processed_manifest(manifest)?;
    entries
        .iter()
        .map(|e| {
            let ids = phonetize_str(&e.text).with_context(|| format!("record {}", e.name))?.ids();
            let mel = read_mel(&e.mel).with_context(|| format!("record {}", e.name))?;
            Ok(TacoExample { ids, mel: mel_tensor(&mel) })
        })
        .collect()
}

pub fn train_taco(a: TrainTacoArgs, threads: usize) -> Result<ExitCode> {
    let mut run = match &a.config {
        Some(p) => read_json::<TacoRunConfig>(p)?,
        None => {
            let model = match a.preset.unwrap_or(if a.toy { Preset::Toy } else { Preset::Full }) {
                Preset::Full => TacoConfig::full(SYMBOL_COUNT),
                Preset::Reduced => TacoConfig::reduced(SYMBOL_COUNT),
                Preset::Toy => toy_taco_config(),
            };
            let train = if a.toy { TacoTrainConfig { epochs: 1000, eval_every: 50, ..Default::default() } } else { TacoTrainConfig::default() };
            TacoRunConfig { model, train, dump_alignments: default_dumps() }
        }
    };
    if let Some(e) = a.epochs {
        run.train.epochs = e;
    }
    if let Some(s) = a.seed {
        run.train.seed = s;
    }
    if a.max_steps.is_some() {
        run.train.max_steps = a.max_steps;
    }
    if let Some(e) = a.eval_every {
        run.train.eval_every = e.max(1);
    }
    run.model.validate().map_err(|e| invalid(format!("model config: {e}")))?;
    if run.train.batch_size == 0 {
        return Err(invalid("batch_size must be at least 1"));
    }
    std::fs::create_dir_all(&a.out)?;
    record_config(&a.out.join("run_config.json"), "train-taco", threads, &serde_json::json!({ "args": &a, "run": &run }))?;

    let examples = if a.toy {
        let toy = ToyConfig { n_mels: run.model.n_mels, ..ToyConfig::default() };
        toy_corpus(&toy).into_iter().map(|u| TacoExample { ids: u.ids, mel: u.mel }).collect()
    } else {
        taco_examples(a.manifest.as_deref().expect("clap requires manifest or toy"))?
    };
    if let Some(bad) = examples.iter().find(|e| e.mel.dim(1) != run.model.n_mels) {
        return Err(invalid(format!("corpus has {} mel bands, model expects {}", bad.mel.dim(1), run.model.n_mels)));
    }
    // the synthetic corpora are scored on their own training items
    let (train, val) = if a.toy { (examples, Vec::new()) } else { split_or_all(examples, run.train.seed)? };
    log::info!("{} training and {} validation utterance(s)", train.len(), val.len());

    let mut model = Tacotron::new(run.model.clone(), run.train.seed)?;
    if let Some(init) = &a.init_checkpoint {
        let ck = Checkpoint::load(init).with_context(|| format!("loading {}", init.display()))?;
        let meta = ck.meta()?;
        let report = transfer_init(&mut model.params, &ck, &meta.symbols, &training::model_symbols(), EMBEDDING_PARAM, run.train.seed)?;
        log::info!(
            "transferred {} tensor(s); {} embedding row(s) reused, {} new",
            report.copied_tensors.len(),
            report.copied_rows.len(),
            report.initialized_rows.len()
        );
        std::fs::write(a.out.join("transfer_report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    }

    let out = a.out.clone();
    let mut curve: Vec<CurvePoint> = Vec::new();
    let dumps = run.dump_alignments;
    let result = fit_taco(&mut model, &train, &val, &run.train, |m, point, aligns| {
        curve.push(point.clone());
        taco_checkpoint(m, point.step, point.epoch).save(out.join("taco_latest.atts"))?;
        write_curve_csv(&out.join("curve.csv"), &curve)?;
        if !aligns.is_empty() && dumps > 0 {
            let dir = out.join("alignments");
            std::fs::create_dir_all(&dir)?;
            for r in aligns.iter().take(dumps) {
                let stem = format!("epoch{:04}_utt{:03}", r.epoch, r.utterance);
                write_alignment_pgm(dir.join(format!("{stem}.pgm")), &r.alignment)?;
                write_alignment_csv(dir.join(format!("{stem}.csv")), &r.alignment)?;
            }
        }
        Ok(())
    });
    let report = match result {
        Ok(r) => r,
        Err(e) => {
            abort_record(&a.out, &e)?;
            return Err(e.into());
        }
    };
    let (step, epoch) = report.curve.last().map_or((0, 0), |p| (p.step, p.epoch));
    taco_checkpoint(&model, step, epoch).save(a.out.join("taco.atts"))?;
    write_curve_csv(&a.out.join("curve.csv"), &report.curve)?;
    match report.curve.last() {
        Some(p) => println!("trained {step} step(s) over {epoch} epoch(s); final train loss {:.5}", p.train_loss),
        None => println!("no training steps run; wrote initial weights"),
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum VocoderPreset {
    Full,
    Desk,
    Toy,
}

#[derive(Args, Serialize)]
pub struct TrainVocoderArgs {
    #[arg(long, conflicts_with = "toy", required_unless_present = "toy")]
    pub manifest: Option<PathBuf>,
    /// Train on synthetic harmonic tones.
    #[arg(long)]
    pub toy: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<VocoderPreset>,
    /// Continue from a vocoder checkpoint with the same architecture.
    #[arg(long)]
    pub init_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocoderRunConfig {
    pub model: WaveGlowConfig,
    pub train: VocoderTrainConfig,
}

/// Small flow for the synthetic corpus and smoke tests.
pub fn toy_vocoder_config() -> WaveGlowConfig {
    WaveGlowConfig { n_flows: 4, wn_layers: 2, wn_channels: 16, ..WaveGlowConfig::desk() }
}

fn vocoder_examples(manifest: &Path) -> Result<Vec<VocoderExample>> {
    read_processed_manifest(manifest)?
        .iter()
        .map(|e| {
            let clip = load_wav(&e.wav).with_context(|| format!("record {}", e.name))?;
            let mel = read_mel(&e.mel).with_context(|| format!("record {}", e.name))?;
            Ok(VocoderExample { audio: clip.into_samples(), mel: mel_tensor(&mel) })
        })
        .collect()
}

pub fn train_vocoder(a: TrainVocoderArgs, threads: usize) -> Result<ExitCode> {
    let mut run = match &a.config {
        Some(p) => read_json::<VocoderRunConfig>(p)?,
        None => {
            let model = match a.preset.unwrap_or(if a.toy { VocoderPreset::Toy } else { VocoderPreset::Desk }) {
                VocoderPreset::Full => WaveGlowConfig::full(),
                VocoderPreset::Desk => WaveGlowConfig::desk(),
                VocoderPreset::Toy => toy_vocoder_config(),
            };
            VocoderRunConfig { model, train: VocoderTrainConfig::default() }
        }
    };
    if let Some(e) = a.epochs {
        run.train.epochs = e;
    }
    if let Some(s) = a.seed {
        run.train.seed = s;
    }
    if a.max_steps.is_some() {
        run.train.max_steps = a.max_steps;
    }
    run.model.validate().map_err(|e| invalid(format!("model config: {e}")))?;
    if run.train.batch_size == 0 || run.train.segment_frames == 0 {
        return Err(invalid("batch_size and segment_frames must be at least 1"));
    }
    std::fs::create_dir_all(&a.out)?;
    record_config(&a.out.join("run_config.json"), "train-vocoder", threads, &serde_json::json!({ "args": &a, "run": &run }))?;

    let examples = if a.toy {
        toy_vocoder_corpus(8, 1.0, run.train.seed)
    } else {
        vocoder_examples(a.manifest.as_deref().expect("clap requires manifest or toy"))?
    };
    for ex in &examples {
        if ex.mel.dim(1) != run.model.n_mels {
            return Err(invalid(format!("corpus has {} mel bands, model expects {}", ex.mel.dim(1), run.model.n_mels)));
        }
        if ex.audio.len() > ex.mel.dim(0) * run.model.hop {
            return Err(invalid(format!("audio of {} samples is longer than {} frames at hop {}", ex.audio.len(), ex.mel.dim(0), run.model.hop)));
        }
    }
    // the synthetic corpora are scored on their own training items
    let (train, val) = if a.toy { (examples, Vec::new()) } else { split_or_all(examples, run.train.seed)? };
    log::info!("{} training and {} validation clip(s)", train.len(), val.len());

    let mut model = WaveGlow::new(run.model.clone(), run.train.seed)?;
    if let Some(init) = &a.init_checkpoint {
        let ck = Checkpoint::load(init).with_context(|| format!("loading {}", init.display()))?;
        ck.restore(&mut model.params)?;
        model.check_invertible()?;
    }
    let out = a.out.clone();
    let mut curve: Vec<CurvePoint> = Vec::new();
    let result = fit_vocoder(&mut model, &train, &val, &run.train, |m, point| {
        curve.push(point.clone());
        waveglow_checkpoint(m, point.step, point.epoch).save(out.join("waveglow_latest.atts"))?;
        write_curve_csv(&out.join("curve.csv"), &curve)
    });
    let report = match result {
        Ok(r) => r,
        Err(e) => {
            abort_record(&a.out, &e)?;
            return Err(e.into());
        }
    };
    let (step, epoch) = report.curve.last().map_or((0, 0), |p| (p.step, p.epoch));
    waveglow_checkpoint(&model, step, epoch).save(a.out.join("waveglow.atts"))?;
    write_curve_csv(&a.out.join("curve.csv"), &report.curve)?;
    match report.curve.last() {
        Some(p) => println!("trained {step} step(s) over {epoch} epoch(s); final nll {:.5}", p.train_loss),
        None => println!("no training steps run; wrote initial weights"),
    }
    Ok(ExitCode::SUCCESS)
}
