//! End-to-end Arabic text-to-speech.
//!
//! Diacritized text is transliterated to Latin phoneme symbols
//! ([`phonetizer`]), a sequence-to-sequence network with location-sensitive
//! attention predicts a mel spectrogram ([`taco`]), and a normalizing-flow
//! vocoder inverts Gaussian noise into a waveform conditioned on that
//! spectrogram ([`vocoder`]). [`audio`] covers WAV I/O and feature extraction,
//! [`autodiff`] the reverse-mode gradient engine both networks train with,
//! and [`training`] the data pipeline, optimizer, checkpoints and alignment
//! diagnostics.

pub mod audio;
pub mod autodiff;
pub mod nn;
pub mod phonetizer;
pub mod rng;
pub mod taco;
pub mod tensor;
pub mod training;
pub mod verify;
pub mod vocoder;
