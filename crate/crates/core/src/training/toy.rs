//! Synthetic corpus with a known alignment: each symbol owns a fixed mel
//! template, and an utterance's target repeats its symbols' templates a fixed
//! number of frames each.

use serde::{Deserialize, Serialize};

use super::vocoder_train::VocoderExample;
use crate::audio::{mel_spectrogram, AudioClip};
use crate::phonetizer::SYMBOL_COUNT;
use crate::rng;
use crate::taco::TacoConfig;
use crate::tensor::Tensor;

/// First symbol id used by toy utterances (skips padding, separator and
/// punctuation).
pub const TOY_FIRST_SYMBOL: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub utterances: usize,
    pub min_symbols: usize,
    pub max_symbols: usize,
    pub frames_per_symbol: usize,
    pub n_mels: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { utterances: 20, min_symbols: 5, max_symbols: 12, frames_per_symbol: 4, n_mels: crate::audio::N_MELS, seed: 1234 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyUtterance {
    pub ids: Vec<usize>,
    /// `[frames_per_symbol · ids.len(), n_mels]`
    pub mel: Tensor,
}

/// Reduced network for the toy corpus. Encoder and postnet dropout are off:
/// with twenty utterances they only slow the fit, while prenet dropout stays
/// since attention depends on it.
pub fn toy_taco_config() -> TacoConfig {
    TacoConfig { encoder_dropout: 0.0, postnet_dropout: 0.0, ..TacoConfig::reduced(SYMBOL_COUNT) }
}

/// Template of `symbol`: a smooth random curve over the mel axis, in
/// `[-1, 1]`. Depends only on the symbol and the seed.
pub fn toy_template(symbol: usize, n_mels: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::derive(seed, 1 + symbol as u64);
    let (a1, a2) = (rng::uniform(&mut r, -0.6, 0.6), rng::uniform(&mut r, -0.4, 0.4));
    let (f1, f2) = (rng::uniform(&mut r, 0.5, 3.0), rng::uniform(&mut r, 3.0, 7.0));
    let (p1, p2) = (rng::uniform(&mut r, 0.0, 6.3), rng::uniform(&mut r, 0.0, 6.3));
    (0..n_mels)
        .map(|k| {
            let x = k as f64 / n_mels as f64 * std::f64::consts::TAU;
            (a1 * (f1 * x + p1).sin() + a2 * (f2 * x + p2).sin()).clamp(-1.0, 1.0)
        })
        .collect()
}

pub fn toy_utterance(ids: &[usize], cfg: &ToyConfig) -> ToyUtterance {
    let mut data = Vec::with_capacity(ids.len() * cfg.frames_per_symbol * cfg.n_mels);
    for &s in ids {
        let t = toy_template(s, cfg.n_mels, cfg.seed);
        for _ in 0..cfg.frames_per_symbol {
            data.extend_from_slice(&t);
        }
    }
    ToyUtterance { ids: ids.to_vec(), mel: Tensor::new(&[ids.len() * cfg.frames_per_symbol, cfg.n_mels], data) }
}

pub fn toy_corpus(cfg: &ToyConfig) -> Vec<ToyUtterance> {
    let mut r = rng::derive(cfg.seed, 0);
    (0..cfg.utterances)
        .map(|_| {
            let len = rand::Rng::random_range(&mut r, cfg.min_symbols..=cfg.max_symbols);
            let ids: Vec<usize> = (0..len).map(|_| rand::Rng::random_range(&mut r, TOY_FIRST_SYMBOL..SYMBOL_COUNT)).collect();
            toy_utterance(&ids, cfg)
        })
        .collect()
}

/// Short voiced-sounding clips (a few harmonics with a moving pitch and a
/// smooth envelope, plus faint noise) and their mels, for exercising the
/// vocoder without recorded speech.
pub fn toy_vocoder_corpus(clips: usize, seconds: f64, seed: u64) -> Vec<VocoderExample> {
    let sr = crate::audio::SAMPLE_RATE;
    (0..clips)
        .map(|c| {
            let mut r = rng::derive(seed, 1000 + c as u64);
            let f0 = rng::uniform(&mut r, 110.0, 260.0);
            let glide = rng::uniform(&mut r, -0.3, 0.3);
            let amps: Vec<f64> = (0..4).map(|h| rng::uniform(&mut r, 0.05, 0.25) / (h + 1) as f64).collect();
            let n = (seconds * sr as f64) as usize;
            let mut phase = 0.0;
            let samples: Vec<f64> = (0..n)
                .map(|i| {
                    let u = i as f64 / n as f64;
                    phase += std::f64::consts::TAU * f0 * (1.0 + glide * u) / sr as f64;
                    let env = (std::f64::consts::PI * u).sin().powf(0.5);
                    let tone: f64 = amps.iter().enumerate().map(|(h, a)| a * ((h + 1) as f64 * phase).sin()).sum();
                    env * tone + rng::normal(&mut r, 0.003)
                })
                .collect();
            let clip = AudioClip::clamped(samples, sr).expect("positive rate");
            let mel = mel_spectrogram(&clip);
            VocoderExample { mel: Tensor::new(&[mel.n_frames(), mel.n_mels()], mel.values().to_vec()), audio: clip.into_samples() }
        })
        .collect()
}
