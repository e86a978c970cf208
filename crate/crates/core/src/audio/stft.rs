use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::AudioClip;

/// Magnitude spectrum of one frame, `frame_length/2 + 1` bins.
#[derive(Debug, Clone, PartialEq)]
pub struct StftFrame {
    magnitudes: Vec<f64>,
}

impl StftFrame {
    pub fn magnitudes(&self) -> &[f64] {
        &self.magnitudes
    }

    pub fn into_magnitudes(self) -> Vec<f64> {
        self.magnitudes
    }
}

/// Periodic Hann window; sums to exactly `n/2`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()).collect()
}

/// Frames produced for `len` samples with `frame_length/2` reflection padding
/// on each side: `1 + floor(len / hop)` (the padded length minus one frame).
pub fn frame_count(len: usize, frame_length: usize, hop: usize) -> usize {
    let padded = len + 2 * (frame_length / 2);
    1 + (padded - frame_length) / hop
}

/// Index into `x` as if it were mirrored (without repeating the edge sample)
/// indefinitely in both directions.
fn mirrored(x: &[f64], i: isize) -> f64 {
    let n = x.len() as isize;
    if n == 1 {
        return x[0];
    }
    let period = 2 * (n - 1);
    let k = i.rem_euclid(period);
    x[(if k < n { k } else { period - k }) as usize]
}

fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let (n, pad) = (x.len() as isize, pad as isize);
    (-pad..n + pad).map(|i| mirrored(x, i)).collect()
}

pub(crate) struct StftPlan {
    frame_length: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl StftPlan {
    pub(crate) fn new(frame_length: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(frame_length);
        Self { frame_length, window: hann_window(frame_length), fft }
    }

    pub(crate) fn frames(&self, samples: &[f64], hop: usize) -> Vec<StftFrame> {
        let n = self.frame_length;
        let pad = n / 2;
        assert!(hop >= 1 && n >= hop, "need frame_length >= hop >= 1");
        assert!(!samples.is_empty(), "empty signal");
        let padded = reflect_pad(samples, pad);
        let count = frame_count(samples.len(), n, hop);
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        (0..count)
            .map(|k| {
                let frame = &padded[k * hop..k * hop + n];
                for ((b, &x), &w) in buf.iter_mut().zip(frame).zip(&self.window) {
                    *b = Complex::new(x * w, 0.0);
                }
                self.fft.process_with_scratch(&mut buf, &mut scratch);
                StftFrame { magnitudes: buf[..n / 2 + 1].iter().map(|c| c.norm()).collect() }
            })
            .collect()
    }
}

/// Magnitude STFT with a periodic Hann window. The signal is reflection
/// padded by `frame_length/2` on both sides so frame `k` is centred on sample
/// `k·hop`.
///
/// Clips shorter than the pad are mirrored repeatedly. Panics unless
/// `frame_length >= hop >= 1`.
pub fn stft(clip: &AudioClip, frame_length: usize, hop: usize) -> Vec<StftFrame> {
    StftPlan::new(frame_length).frames(clip.samples(), hop)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn reflection_matches_the_single_mirror_for_long_signals() {
        let x: Vec<f64> = (0..6).map(f64::from).collect();
        assert_eq!(reflect_pad(&x, 3), [3.0, 2.0, 1.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 4.0, 3.0, 2.0]);
        assert_eq!(reflect_pad(&[1.0, 2.0], 3), [2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0]);
    }

    #[test]
    fn hann_sums_to_half_length() {
        let s: f64 = hann_window(1024).iter().sum();
        assert!((s - 512.0).abs() < 1e-9);
    }

    #[test]
    fn zeros_give_zero_magnitudes() {
        let clip = AudioClip::new(vec![0.0; 4096], 22050).unwrap();
        assert!(stft(&clip, 1024, 256).iter().all(|f| f.magnitudes().iter().all(|&m| m == 0.0)));
    }

    #[test]
    fn dc_concentrates_in_bin_zero() {
        let clip = AudioClip::new(vec![1.0; 8192], 22050).unwrap();
        let frames = stft(&clip, 1024, 256);
        assert_eq!(frames[0].magnitudes().len(), 513);
        for f in &frames {
            let m = f.magnitudes();
            assert!((m[0] - 512.0).abs() < 1e-9);
            assert!(m[2..].iter().all(|&v| v < 1e-9));
            // the periodic Hann leaks exactly half its sum into bin 1
            assert!((m[1] - 256.0).abs() < 1e-9);
        }
    }

    #[test]
    fn bin_centred_sine_peaks_at_its_bin() {
        let n = 1024;
        let bin = 32.0;
        let s: Vec<f64> = (0..8192).map(|i| 0.5 * (2.0 * std::f64::consts::PI * bin * i as f64 / n as f64).sin()).collect();
        let clip = AudioClip::new(s, 22050).unwrap();
        let frames = stft(&clip, n, 256);
        for f in &frames[2..frames.len() - 2] {
            let m = f.magnitudes();
            let argmax = (0..m.len()).max_by(|&a, &b| m[a].total_cmp(&m[b])).unwrap();
            assert_eq!(argmax, 32);
        }
    }

    #[test]
    fn frame_count_formula() {
        assert_eq!(frame_count(22050, 1024, 256), 87);
        let clip = AudioClip::new(vec![0.1; 22050], 22050).unwrap();
        assert_eq!(stft(&clip, 1024, 256).len(), 87);
    }

    #[test]
    fn parseval_on_white_noise() {
        let mut r = rng::seeded(9);
        let s: Vec<f64> = (0..20000).map(|_| rng::uniform(&mut r, -0.5, 0.5)).collect();
        let clip = AudioClip::new(s.clone(), 22050).unwrap();
        let (n, hop) = (1024, 256);
        let frames = stft(&clip, n, hop);
        let spectral: f64 = frames
            .iter()
            .map(|f| {
                let m = f.magnitudes();
                let inner: f64 = m[1..n / 2].iter().map(|v| v * v).sum();
                (m[0] * m[0] + 2.0 * inner + m[n / 2] * m[n / 2]) / n as f64
            })
            .sum();
        let w = hann_window(n);
        let padded = reflect_pad(&s, n / 2);
        let temporal: f64 = (0..frames.len())
            .map(|k| padded[k * hop..k * hop + n].iter().zip(&w).map(|(x, w)| (x * w).powi(2)).sum::<f64>())
            .sum();
        assert!((spectral - temporal).abs() / temporal < 0.05);
    }
}
