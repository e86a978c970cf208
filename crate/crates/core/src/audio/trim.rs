use serde::{Deserialize, Serialize};

use super::{AudioClip, AudioError, FRAME_LENGTH, HOP};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrimConfig {
    /// Frames this many dB below the loudest frame count as silence.
    pub threshold_db: f64,
    pub frame_length: usize,
    pub hop: usize,
}

impl Default for TrimConfig {
    fn default() -> Self {
        Self { threshold_db: 60.0, frame_length: FRAME_LENGTH, hop: HOP }
    }
}

fn frame_rms(x: &[f64], start: usize, frame: usize) -> f64 {
    let end = (start + frame).min(x.len());
    let energy: f64 = x[start..end].iter().map(|s| s * s).sum();
    (energy / frame as f64).sqrt()
}

/// Removes leading and trailing silence.
///
/// Frame `k` covers samples `[k·hop, k·hop + frame)` (zero padded past the
/// end). A frame is silent when its RMS is more than `threshold_db` below the
/// loudest frame. Everything covered only by leading silent frames, and
/// everything from the first trailing silent frame onwards, is dropped. When
/// the frame overlap makes those two cuts cross, the extent of the loud frames
/// is kept instead.
pub fn trim_silence(clip: &AudioClip, cfg: &TrimConfig) -> Result<AudioClip, AudioError> {
    if cfg.hop == 0 || cfg.frame_length < cfg.hop {
        return Err(AudioError::InvalidArgument(format!("need frame_length ({}) >= hop ({}) >= 1", cfg.frame_length, cfg.hop)));
    }
    let x = clip.samples();
    if x.is_empty() {
        return Err(AudioError::InvalidArgument("cannot trim an empty clip".into()));
    }
    let n_frames = x.len().div_ceil(cfg.hop);
    let rms: Vec<f64> = (0..n_frames).map(|k| frame_rms(x, k * cfg.hop, cfg.frame_length)).collect();
    let peak = rms.iter().copied().fold(0.0, f64::max);
    if peak == 0.0 {
        return Err(AudioError::AllSilent);
    }
    let threshold = peak * 10f64.powf(-cfg.threshold_db / 20.0);
    let loud = |r: &f64| *r > threshold;
    let first = rms.iter().position(loud).ok_or(AudioError::AllSilent)?;
    let last = rms.iter().rposition(loud).expect("a loud frame exists");

    let start = if first == 0 { 0 } else { ((first - 1) * cfg.hop + cfg.frame_length).min(x.len()) };
    let end = ((last + 1) * cfg.hop).min(x.len());
    let (start, end) = if start < end { (start, end) } else { (first * cfg.hop, (last * cfg.hop + cfg.frame_length).min(x.len())) };
    log::trace!("trim: kept [{start}, {end}) of {}", x.len());
    AudioClip::new(x[start..end].to_vec(), clip.sample_rate())
}
