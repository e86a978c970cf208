use serde::{Deserialize, Serialize};

use super::stft::StftPlan;
use super::{AudioClip, AudioError, FRAME_LENGTH, F_MAX, F_MIN, HOP, N_MELS, SAMPLE_RATE};

/// Amplitude floor applied before the natural log.
pub const LOG_FLOOR: f64 = 1e-5;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub frame_length: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self { sample_rate: SAMPLE_RATE, frame_length: FRAME_LENGTH, hop: HOP, n_mels: N_MELS, f_min: F_MIN, f_max: F_MAX }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<(), AudioError> {
        let bad = |m: String| Err(AudioError::InvalidArgument(m));
        if self.hop == 0 || self.frame_length < self.hop {
            return bad(format!("need frame_length ({}) >= hop ({}) >= 1", self.frame_length, self.hop));
        }
        if self.n_mels == 0 {
            return bad("n_mels must be positive".into());
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= self.sample_rate as f64 / 2.0) {
            return bad(format!("need 0 <= f_min ({}) < f_max ({}) <= sample_rate/2", self.f_min, self.f_max));
        }
        Ok(())
    }
}

/// Log-mel features, row-major `[n_frames × n_mels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    values: Vec<f64>,
    n_frames: usize,
    n_mels: usize,
    frame_hop: usize,
    frame_length: usize,
    sample_rate: u32,
}

impl MelSpectrogram {
    /// Rejects a length mismatch or any value that is non-finite or below
    /// `ln(LOG_FLOOR)`.
    pub fn new(values: Vec<f64>, n_mels: usize, frame_hop: usize, frame_length: usize, sample_rate: u32) -> Result<Self, AudioError> {
        if n_mels == 0 || values.len() % n_mels != 0 {
            return Err(AudioError::InvalidArgument(format!("{} values do not form rows of {n_mels}", values.len())));
        }
        let floor = LOG_FLOOR.ln();
        // f32 storage can round the floor value slightly downwards
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < floor - 1e-5) {
            return Err(AudioError::InvalidArgument(format!("value {i} = {} is below ln(floor) or not finite", values[i])));
        }
        Ok(Self { n_frames: values.len() / n_mels, values, n_mels, frame_hop, frame_length, sample_rate })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_mels..(t + 1) * self.n_mels]
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn frame_hop(&self) -> usize {
        self.frame_hop
    }

    pub fn frame_length(&self) -> usize {
        self.frame_length
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }
}

/// Triangular HTK-mel filters, row-major `[n_mels × (frame_length/2 + 1)]`.
///
/// Each triangle spans adjacent mel-spaced edges `f_lo, f_c, f_hi` and is
/// scaled by `2 / (f_hi − f_lo)` so its continuous area is one. A filter
/// narrower than a bin spacing that would capture no bin gets a single entry
/// of `1/Δf` at the bin nearest its centre.
///
/// Panics unless `0 <= f_min < f_max <= sample_rate/2`.
pub fn mel_filterbank(n_mels: usize, frame_length: usize, sample_rate: u32, f_min: f64, f_max: f64) -> Vec<f64> {
    assert!(f_min >= 0.0 && f_min < f_max && f_max <= sample_rate as f64 / 2.0, "invalid band [{f_min}, {f_max}]");
    let n_bins = frame_length / 2 + 1;
    let bin_hz = sample_rate as f64 / frame_length as f64;
    let (m_lo, m_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let edges: Vec<f64> = (0..n_mels + 2).map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64)).collect();
    let mut fb = vec![0.0; n_mels * n_bins];
    for m in 0..n_mels {
        let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let norm = 2.0 / (hi - lo);
        let row = &mut fb[m * n_bins..(m + 1) * n_bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let tri = if f > lo && f <= c {
                (f - lo) / (c - lo)
            } else if f > c && f < hi {
                (hi - f) / (hi - c)
            } else {
                0.0
            };
            *w = norm * tri;
        }
        if row.iter().all(|&w| w == 0.0) {
            let k = ((c / bin_hz).round() as usize).min(n_bins - 1);
            row[k] = 1.0 / bin_hz;
        }
    }
    fb
}

/// Log-mel spectrogram with the pipeline defaults. Panics on an empty clip or
/// one not at 22050 Hz.
pub fn mel_spectrogram(clip: &AudioClip) -> MelSpectrogram {
    mel_spectrogram_with(clip, &MelConfig::default()).expect("non-empty clip at the pipeline rate")
}

/// `ln(max(filterbank · |STFT|, 1e-5))` per frame. The clip must already be
/// at `cfg.sample_rate`.
pub fn mel_spectrogram_with(clip: &AudioClip, cfg: &MelConfig) -> Result<MelSpectrogram, AudioError> {
    cfg.validate()?;
    if clip.sample_rate() != cfg.sample_rate {
        return Err(AudioError::InvalidArgument(format!(
            "clip is at {} Hz, expected {} Hz",
            clip.sample_rate(),
            cfg.sample_rate
        )));
    }
    if clip.is_empty() {
        return Err(AudioError::InvalidArgument("empty clip".into()));
    }
    let fb = mel_filterbank(cfg.n_mels, cfg.frame_length, cfg.sample_rate, cfg.f_min, cfg.f_max);
    let n_bins = cfg.frame_length / 2 + 1;
    let frames = StftPlan::new(cfg.frame_length).frames(clip.samples(), cfg.hop);
    let mut values = Vec::with_capacity(frames.len() * cfg.n_mels);
    for frame in &frames {
        let mag = frame.magnitudes();
        for row in fb.chunks_exact(n_bins) {
            let e: f64 = row.iter().zip(mag).map(|(w, m)| w * m).sum();
            values.push(e.max(LOG_FLOOR).ln());
        }
    }
    MelSpectrogram::new(values, cfg.n_mels, cfg.hop, cfg.frame_length, cfg.sample_rate)
}
