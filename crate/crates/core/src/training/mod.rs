//! Data pipeline, optimization and diagnostics.

pub mod alignment;
pub mod checkpoint;
pub mod data;
pub mod optim;
pub mod taco_train;
pub mod toy;
pub mod vocoder_train;

use thiserror::Error;

pub use alignment::{diagonality, read_alignment_pgm, write_alignment_csv, write_alignment_pgm, DIAGONAL_BAND};
pub use checkpoint::{load_taco, load_waveglow, model_symbols, taco_checkpoint, transfer_init, waveglow_checkpoint, Checkpoint, CheckpointMeta, NamedTensor, TensorData, TransferReport};
pub use data::{
    ingest, parse_manifest, read_processed_manifest, write_processed_manifest, MIN_SPLIT_RECORDS, PROCESSED_MANIFEST, split, validation_count, write_curve_csv, IngestOptions, IngestReport,
    ManifestRecord, ProcessedEntry, ProcessedRecord, RecordFailure,
};
pub use optim::{Adam, AdamConfig};
pub use taco_train::{
    bucket_batches, evaluate_taco, mean_diagonality, taco_step, train_taco, AlignmentReport, CurvePoint, TacoExample,
    TacoTrainConfig, TacoTrainReport,
};
pub use toy::{toy_corpus, toy_taco_config, toy_template, toy_utterance, toy_vocoder_corpus, ToyConfig, ToyUtterance};
pub use vocoder_train::{random_crop, train_vocoder, vocoder_loss, vocoder_step, VocoderExample, VocoderTrainConfig, VocoderTrainReport};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("manifest has no records")]
    EmptyManifest,
    #[error("{0} records are too few to split (need at least 20)")]
    TooFewRecords(usize),
    #[error("shape conflict on {name}: checkpoint {checkpoint:?}, model {model:?}")]
    ShapeConflict { name: String, checkpoint: Vec<usize>, model: Vec<usize> },
    #[error("format error: {0}")]
    Format(String),
    #[error("training aborted at step {step}: {detail}")]
    Aborted { step: usize, detail: String },
    #[error(transparent)]
    Taco(#[from] crate::taco::TacoError),
    #[error(transparent)]
    Autograd(#[from] crate::autodiff::AutogradError),
    #[error(transparent)]
    Vocoder(#[from] crate::vocoder::VocoderError),
    #[error(transparent)]
    Audio(#[from] crate::audio::AudioError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
