use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::optim::{Adam, AdamConfig};
use super::taco_train::CurvePoint;
use super::TrainingError;
use crate::autodiff::Graph;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::vocoder::WaveGlow;

/// Audio with its `[frames, n_mels]` mel; `audio.len() <= frames · hop`.
#[derive(Debug, Clone, PartialEq)]
pub struct VocoderExample {
    pub audio: Vec<f64>,
    pub mel: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocoderTrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    /// Mel frames per random training crop.
    pub segment_frames: usize,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub seed: u64,
}

impl Default for VocoderTrainConfig {
    fn default() -> Self {
        Self { adam: AdamConfig::default(), batch_size: 1, segment_frames: 16, epochs: 1, max_steps: None, seed: 0 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct VocoderTrainReport {
    /// Per-sample NLL of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub curve: Vec<CurvePoint>,
}

/// Cuts `segment_frames` frames (and the matching audio, zero padded) at a
/// random frame offset. Shorter examples are padded with silence frames at
/// the log floor.
pub fn random_crop(ex: &VocoderExample, segment_frames: usize, hop: usize, rng: &mut Rng) -> (Vec<f64>, Tensor) {
    let (frames, n_mels) = (ex.mel.dim(0), ex.mel.dim(1));
    let start = if frames > segment_frames { rng.random_range(0..=frames - segment_frames) } else { 0 };
    let floor = crate::audio::LOG_FLOOR.ln();
    let mut mel = vec![floor; segment_frames * n_mels];
    let take = segment_frames.min(frames - start);
    mel[..take * n_mels].copy_from_slice(&ex.mel.data()[start * n_mels..(start + take) * n_mels]);
    let mut audio = vec![0.0; segment_frames * hop];
    let (a0, a1) = ((start * hop).min(ex.audio.len()), ((start + segment_frames) * hop).min(ex.audio.len()));
    audio[..a1 - a0].copy_from_slice(&ex.audio[a0..a1]);
    (audio, Tensor::new(&[segment_frames, n_mels], mel))
}

fn batch_tensors(items: &[(Vec<f64>, Tensor)]) -> (Tensor, Tensor) {
    let b = items.len();
    let (len, frames, n_mels) = (items[0].0.len(), items[0].1.dim(0), items[0].1.dim(1));
    let audio: Vec<f64> = items.iter().flat_map(|(a, _)| a.iter().copied()).collect();
    let mel: Vec<f64> = items.iter().flat_map(|(_, m)| m.data().iter().copied()).collect();
    (Tensor::new(&[b, len], audio), Tensor::new(&[b, frames, n_mels], mel))
}

/// Per-sample NLL of a batch without updating anything.
pub fn vocoder_loss(model: &WaveGlow, audio: &Tensor, mel: &Tensor) -> Result<f64, TrainingError> {
    let g = Graph::inference();
    let out = model.nll(&g, audio, mel)?;
    Ok(g.value(out.loss).item() / out.samples as f64)
}

/// One optimizer step on per-sample NLL. Returns the loss before the update.
/// Fails if the update leaves a mixing matrix singular.
pub fn vocoder_step(model: &mut WaveGlow, adam: &mut Adam, audio: &Tensor, mel: &Tensor) -> Result<f64, TrainingError> {
    let g = Graph::new();
    let out = model.nll(&g, audio, mel)?;
    let loss = g.scale(out.loss, 1.0 / out.samples as f64)?;
    let value = g.value(loss).item();
    let grads = g.backward(loss)?;
    model.params.zero_grad();
    model.params.accumulate(&grads);
    drop(g);
    adam.step(&mut model.params);
    model.check_invertible()?;
    Ok(value)
}

/// Trains on random crops; each epoch visits every example once.
pub fn train_vocoder(
    model: &mut WaveGlow,
    train: &[VocoderExample],
    validation: &[VocoderExample],
    cfg: &VocoderTrainConfig,
    mut on_epoch: impl FnMut(&WaveGlow, &CurvePoint) -> Result<(), TrainingError>,
) -> Result<VocoderTrainReport, TrainingError> {
    use rand::seq::SliceRandom;
    let mut report = VocoderTrainReport::default();
    if cfg.epochs == 0 || train.is_empty() {
        return Ok(report);
    }
    let hop = model.config.hop;
    let mut adam = Adam::new(cfg.adam, &model.params);
    let mut order_rng = rng::derive(cfg.seed, 1);
    let mut crop_rng = rng::derive(cfg.seed, 2);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut order_rng);
        let (mut total, mut batches) = (0.0, 0);
        for idx in order.chunks(cfg.batch_size.max(1)) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let crops: Vec<_> = idx.iter().map(|&i| random_crop(&train[i], cfg.segment_frames, hop, &mut crop_rng)).collect();
            let (audio, mel) = batch_tensors(&crops);
            let loss = vocoder_step(model, &mut adam, &audio, &mel).map_err(|e| TrainingError::Aborted { step, detail: e.to_string() })?;
            step += 1;
            log::debug!("vocoder step {step}: nll {loss:.5}");
            report.step_losses.push(loss);
            total += loss;
            batches += 1;
        }
        if batches == 0 {
            break;
        }
        let val_loss = if validation.is_empty() {
            None
        } else {
            // fixed crops so the curve is comparable across epochs
            let mut r = rng::derive(cfg.seed, 3);
            let mut sum = 0.0;
            for ex in validation {
                let (audio, mel) = batch_tensors(&[random_crop(ex, cfg.segment_frames, hop, &mut r)]);
                sum += vocoder_loss(model, &audio, &mel)?;
            }
            Some(sum / validation.len() as f64)
        };
        let point = CurvePoint { step, epoch: epoch + 1, train_loss: total / batches as f64, val_loss, diagonality: None };
        log::info!("vocoder epoch {} step {step}: train {:.5} val {:?}", epoch + 1, point.train_loss, val_loss);
        on_epoch(model, &point)?;
        report.curve.push(point);
        if cfg.max_steps.is_some_and(|m| step >= m) {
            break;
        }
    }
    Ok(report)
}
