//! Audio ingestion and feature extraction.
//!
//! Pipeline defaults: 22050 Hz, frame 1024, hop 256, 80 mel channels between
//! 0 and 8000 Hz, natural-log magnitudes floored at 1e-5.

mod mel;
mod melfile;
mod resample;
mod stft;
mod trim;
mod wav;

use thiserror::Error;

pub use mel::{hz_to_mel, mel_filterbank, mel_spectrogram, mel_spectrogram_with, mel_to_hz, MelConfig, MelSpectrogram, LOG_FLOOR};
pub use melfile::{read_mel, write_mel, MelHeader};
pub use resample::resample;
pub use stft::{frame_count, hann_window, stft, StftFrame};
pub use trim::{trim_silence, TrimConfig};
pub use wav::{load_wav, quantize_i16, read_wav_bytes, write_wav};

pub const SAMPLE_RATE: u32 = 22050;
pub const FRAME_LENGTH: usize = 1024;
pub const HOP: usize = 256;
pub const N_MELS: usize = 80;
pub const F_MIN: f64 = 0.0;
pub const F_MAX: f64 = 8000.0;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("malformed WAV: {0}")]
    MalformedWav(String),
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("every frame is below the silence threshold")]
    AllSilent,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed mel file: {0}")]
    MalformedMel(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mono waveform with amplitudes in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    /// Rejects a zero rate and any non-finite or out-of-range sample.
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidArgument("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(AudioError::InvalidArgument(format!("sample {i} = {} outside [-1, 1]", samples[i])));
        }
        Ok(Self { samples, sample_rate })
    }

    /// Clamps every sample into `[-1, 1]` (NaN becomes 0).
    pub fn clamped(samples: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        let samples = samples.into_iter().map(|s| if s.is_nan() { 0.0 } else { s.clamp(-1.0, 1.0) }).collect();
        Self::new(samples, sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}
