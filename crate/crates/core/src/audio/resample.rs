//! Band-limited rational resampling: polyphase windowed sinc with a Kaiser
//! window (beta 8.6) and 64 taps per phase.

use super::AudioClip;

const TAPS: usize = 64;
const HALF: isize = (TAPS / 2) as isize;
const KAISER_BETA: f64 = 8.6;
const MAX_TABLE_PHASES: u64 = 4096;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Taps for fractional offset `frac` in `[0, 1)`, normalized to unit DC gain.
/// Tap `j` multiplies input sample `i0 + j − (HALF − 1)`.
fn phase_taps(frac: f64, cutoff: f64, i0_beta: f64) -> [f64; TAPS] {
    let mut taps = [0.0; TAPS];
    for (j, tap) in taps.iter_mut().enumerate() {
        let tau = (j as isize - (HALF - 1)) as f64 - frac;
        let r = tau / HALF as f64;
        let w = if r.abs() <= 1.0 { bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / i0_beta } else { 0.0 };
        *tap = cutoff * sinc(cutoff * tau) * w;
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Resamples to `target_rate`. Output length is `round(len · target / source)`;
/// the result is clamped to `[-1, 1]`. Equal rates return the input unchanged.
///
/// Panics if `target_rate` is zero.
pub fn resample(clip: &AudioClip, target_rate: u32) -> AudioClip {
    assert!(target_rate > 0, "target rate must be positive");
    let source_rate = clip.sample_rate();
    if source_rate == target_rate {
        return clip.clone();
    }
    let g = gcd(source_rate as u64, target_rate as u64);
    let up = target_rate as u64 / g;
    let down = source_rate as u64 / g;
    let len = clip.len() as u64;
    let out_len = ((len as u128 * target_rate as u128 + source_rate as u128 / 2) / source_rate as u128) as usize;
    let cutoff = (target_rate as f64 / source_rate as f64).min(1.0);
    let i0_beta = bessel_i0(KAISER_BETA);
    let table: Option<Vec<[f64; TAPS]>> = (up <= MAX_TABLE_PHASES)
        .then(|| (0..up).map(|phase| phase_taps(phase as f64 / up as f64, cutoff, i0_beta)).collect());

    let x = clip.samples();
    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len as u64 {
        let p = n * down;
        let i0 = (p / up) as isize;
        let phase = p % up;
        let computed;
        let taps = match &table {
            Some(t) => &t[phase as usize],
            None => {
                computed = phase_taps(phase as f64 / up as f64, cutoff, i0_beta);
                &computed
            }
        };
        let mut acc = 0.0;
        for (j, tap) in taps.iter().enumerate() {
            let idx = i0 + j as isize - (HALF - 1);
            if idx >= 0 && (idx as usize) < x.len() {
                acc += tap * x[idx as usize];
            }
        }
        out.push(acc.clamp(-1.0, 1.0));
    }
    AudioClip::new(out, target_rate).expect("clamped output is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::stft;

    fn sine(freq: f64, rate: u32, secs: f64, amp: f64) -> AudioClip {
        let n = (rate as f64 * secs) as usize;
        let s = (0..n).map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin()).collect();
        AudioClip::new(s, rate).unwrap()
    }

    #[test]
    fn same_rate_is_identity() {
        let clip = sine(440.0, 16000, 0.1, 0.5);
        assert_eq!(resample(&clip, 16000), clip);
    }

    #[test]
    fn one_second_48k_to_22050() {
        let clip = sine(440.0, 48000, 1.0, 0.5);
        let out = resample(&clip, 22050);
        assert_eq!(out.len(), 22050);
        assert_eq!(out.sample_rate(), 22050);
    }

    #[test]
    fn sine_frequency_survives_downsampling() {
        let clip = sine(1000.0, 48000, 1.0, 0.9);
        let out = resample(&clip, 22050);
        let frames = stft(&out, 1024, 256);
        let bin_hz = 22050.0 / 1024.0;
        let expected = 1000.0 / bin_hz;
        for f in &frames[4..frames.len() - 4] {
            let m = f.magnitudes();
            let argmax = (0..m.len()).max_by(|&a, &b| m[a].total_cmp(&m[b])).unwrap();
            assert!((argmax as f64 - expected).abs() <= 1.0, "argmax {argmax}, expected {expected}");
        }
        assert!(out.samples().iter().all(|s| s.abs() <= 0.9 + 1e-3));
    }

    #[test]
    fn aliasing_is_suppressed() {
        // 15 kHz is above the 11.025 kHz output Nyquist and must vanish.
        let clip = sine(15000.0, 48000, 0.5, 0.9);
        let out = resample(&clip, 22050);
        let interior = &out.samples()[200..out.len() - 200];
        let rms = (interior.iter().map(|s| s * s).sum::<f64>() / interior.len() as f64).sqrt();
        assert!(rms < 1e-3, "rms {rms}");
    }

    #[test]
    fn dc_passes_unchanged_in_the_interior() {
        let clip = AudioClip::new(vec![0.25; 4800], 48000).unwrap();
        let out = resample(&clip, 22050);
        for s in &out.samples()[40..out.len() - 40] {
            assert!((s - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn upsampling_length() {
        let clip = sine(100.0, 8000, 0.25, 0.5);
        let out = resample(&clip, 22050);
        assert_eq!(out.len(), (2000.0f64 * 22050.0 / 8000.0).round() as usize);
    }
}
