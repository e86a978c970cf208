use serde::{Deserialize, Serialize};

use super::alignment::diagonality;
use super::optim::{Adam, AdamConfig};
use super::TrainingError;
use crate::autodiff::Graph;
use crate::nn::Ctx;
use crate::rng::{self, Rng};
use crate::taco::{LossParts, LossWeights, TacoBatch, Tacotron};
use crate::tensor::Tensor;

/// One utterance: symbol ids and its `[frames, n_mels]` target.
#[derive(Debug, Clone, PartialEq)]
pub struct TacoExample {
    pub ids: Vec<usize>,
    pub mel: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TacoTrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub loss: LossWeights,
    pub seed: u64,
    /// Evaluate (validation loss, alignments) every this many epochs and
    /// after the last one.
    #[serde(default = "one")]
    pub eval_every: usize,
}

fn one() -> usize {
    1
}

impl Default for TacoTrainConfig {
    fn default() -> Self {
        Self { adam: AdamConfig::default(), batch_size: 8, epochs: 1, max_steps: None, loss: LossWeights::default(), seed: 0, eval_every: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub diagonality: Option<f64>,
}

/// Per-utterance teacher-forced alignment and its score.
#[derive(Debug, Clone)]
pub struct AlignmentReport {
    pub epoch: usize,
    pub step: usize,
    /// Index into the evaluated set.
    pub utterance: usize,
    /// `[frames, t_x]`
    pub alignment: Tensor,
    pub diagonality: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TacoTrainReport {
    /// Total loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    /// Per-epoch aggregates.
    pub curve: Vec<CurvePoint>,
    /// Alignments of the evaluation set at the end of each epoch.
    pub alignments: Vec<AlignmentReport>,
}

/// Batches grouped by similar text length: shuffle, sort windows of four
/// batches by length, cut, then shuffle the batch order.
pub fn bucket_batches(lengths: &[usize], batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    for window in order.chunks_mut(batch_size.max(1) * 4) {
        window.sort_by_key(|&i| lengths[i]);
        batches.extend(window.chunks(batch_size.max(1)).map(|c| c.to_vec()));
    }
    batches.shuffle(rng);
    batches
}

fn make_batch(examples: &[TacoExample], idx: &[usize]) -> Result<TacoBatch, TrainingError> {
    let items: Vec<(&[usize], &Tensor)> = idx.iter().map(|&i| (examples[i].ids.as_slice(), &examples[i].mel)).collect();
    Ok(TacoBatch::new(&items)?)
}

/// Teacher-forced evaluation in inference mode. Returns the mean total loss
/// and each utterance's alignment.
pub fn evaluate_taco(
    model: &Tacotron,
    examples: &[TacoExample],
    batch_size: usize,
    weights: &LossWeights,
) -> Result<(f64, Vec<Tensor>), TrainingError> {
    let mut total = 0.0;
    let mut alignments = Vec::with_capacity(examples.len());
    let idx: Vec<usize> = (0..examples.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = make_batch(examples, chunk)?;
        let g = Graph::inference();
        let mut r = rng::seeded(0);
        let mut ctx = Ctx::new(false, &mut r);
        let out = model.forward(&g, &batch, &mut ctx)?;
        let (_, parts) = model.loss(&g, &out, &batch, weights)?;
        total += parts.total * chunk.len() as f64;
        let rows: Vec<_> = out.alignments.iter().map(|&a| g.value(a)).collect();
        let t_x = batch.text.max_len;
        for (bi, &ex) in chunk.iter().enumerate() {
            let (frames, len) = (batch.frame_lengths[bi], batch.text.lengths[bi]);
            let mut data = Vec::with_capacity(frames * len);
            for row in rows.iter().take(frames) {
                data.extend_from_slice(&row.data()[bi * t_x..bi * t_x + len]);
            }
            debug_assert_eq!(examples[ex].ids.len(), len);
            alignments.push(Tensor::new(&[frames, len], data));
        }
    }
    Ok((total / examples.len().max(1) as f64, alignments))
}

/// Mean teacher-forced diagonality over `examples`.
pub fn mean_diagonality(model: &Tacotron, examples: &[TacoExample], batch_size: usize) -> Result<f64, TrainingError> {
    let (_, aligns) = evaluate_taco(model, examples, batch_size, &LossWeights::default())?;
    Ok(aligns.iter().map(diagonality).sum::<f64>() / aligns.len().max(1) as f64)
}

/// One optimizer step on a batch. Returns the loss parts before the update.
pub fn taco_step(
    model: &mut Tacotron,
    adam: &mut Adam,
    batch: &TacoBatch,
    weights: &LossWeights,
    rng: &mut Rng,
) -> Result<LossParts, TrainingError> {
    let g = Graph::new();
    let mut ctx = Ctx::new(true, rng);
    let out = model.forward(&g, batch, &mut ctx)?;
    let (loss, parts) = model.loss(&g, &out, batch, weights)?;
    let grads = g.backward(loss)?;
    model.params.zero_grad();
    model.params.accumulate(&grads);
    drop(g);
    ctx.apply_stat_updates(&mut model.params);
    adam.step(&mut model.params);
    Ok(parts)
}

/// Trains `model` in place with teacher forcing. `on_epoch` runs after every
/// epoch's evaluation (checkpointing, dumps); an error from it aborts.
pub fn train_taco(
    model: &mut Tacotron,
    train: &[TacoExample],
    validation: &[TacoExample],
    cfg: &TacoTrainConfig,
    mut on_epoch: impl FnMut(&Tacotron, &CurvePoint, &[AlignmentReport]) -> Result<(), TrainingError>,
) -> Result<TacoTrainReport, TrainingError> {
    let mut report = TacoTrainReport::default();
    if cfg.epochs == 0 || train.is_empty() {
        return Ok(report);
    }
    let mut adam = Adam::new(cfg.adam, &model.params);
    let mut shuffle_rng = rng::derive(cfg.seed, 1);
    let mut mask_rng = rng::derive(cfg.seed, 2);
    let lengths: Vec<usize> = train.iter().map(|e| e.ids.len()).collect();
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut batches_run = 0;
        for idx in bucket_batches(&lengths, cfg.batch_size, &mut shuffle_rng) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let batch = make_batch(train, &idx)?;
            let parts = taco_step(model, &mut adam, &batch, &cfg.loss, &mut mask_rng)
                .map_err(|e| TrainingError::Aborted { step, detail: e.to_string() })?;
            step += 1;
            log::debug!("step {step}: loss {:.5} (pre {:.5} post {:.5} stop {:.5})", parts.total, parts.mel_pre, parts.mel_post, parts.stop);
            report.step_losses.push(parts.total);
            epoch_loss += parts.total;
            batches_run += 1;
        }
        if batches_run == 0 {
            break;
        }
        let last = epoch + 1 == cfg.epochs || cfg.max_steps.is_some_and(|m| step >= m);
        if !last && (epoch + 1) % cfg.eval_every.max(1) != 0 {
            let point = CurvePoint { step, epoch: epoch + 1, train_loss: epoch_loss / batches_run as f64, val_loss: None, diagonality: None };
            on_epoch(model, &point, &[])?;
            report.curve.push(point);
            continue;
        }
        let eval_set = if validation.is_empty() { train } else { validation };
        let (val_loss, aligns) = evaluate_taco(model, eval_set, cfg.batch_size, &cfg.loss)?;
        let scores: Vec<f64> = aligns.iter().map(diagonality).collect();
        let diag = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
        let point = CurvePoint {
            step,
            epoch: epoch + 1,
            train_loss: epoch_loss / batches_run as f64,
            val_loss: (!validation.is_empty()).then_some(val_loss),
            diagonality: Some(diag),
        };
        log::info!("epoch {} step {step}: train {:.5} eval {:.5} diagonality {:.3}", epoch + 1, point.train_loss, val_loss, diag);
        let epoch_aligns: Vec<AlignmentReport> = aligns
            .into_iter()
            .zip(scores)
            .enumerate()
            .map(|(utterance, (alignment, diagonality))| AlignmentReport { epoch: epoch + 1, step, utterance, alignment, diagonality })
            .collect();
        on_epoch(model, &point, &epoch_aligns)?;
        report.curve.push(point);
        report.alignments.extend(epoch_aligns);
        if cfg.max_steps.is_some_and(|m| step >= m) {
            break 'epochs;
        }
    }
    Ok(report)
}
