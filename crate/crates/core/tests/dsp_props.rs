use aratts::audio::{
    frame_count, load_wav, mel_spectrogram, read_mel, resample, stft, trim_silence, write_mel, write_wav, AudioClip, TrimConfig, FRAME_LENGTH, HOP,
    SAMPLE_RATE,
};
use proptest::prelude::*;

fn samples(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, 1..max_len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn frame_count_is_one_plus_len_over_hop(len in 1usize..20_000) {
        let clip = AudioClip::new(vec![0.01; len], SAMPLE_RATE).unwrap();
        let n = 1 + len / HOP;
        prop_assert_eq!(frame_count(len, FRAME_LENGTH, HOP), n);
        prop_assert_eq!(stft(&clip, FRAME_LENGTH, HOP).len(), n);
        prop_assert_eq!(mel_spectrogram(&clip).n_frames(), n);
    }

    #[test]
    fn trimmed_audio_is_a_contiguous_slice(
        lead in 0usize..6000,
        body in samples(8000),
        tail in 0usize..6000,
        gain in 0.05f64..1.0,
    ) {
        let mut x = vec![0.0; lead];
        x.extend(body.iter().map(|v| v * gain));
        x.extend(std::iter::repeat_n(0.0, tail));
        let clip = AudioClip::new(x.clone(), SAMPLE_RATE).unwrap();
        let t = trim_silence(&clip, &TrimConfig::default()).unwrap();
        let t = t.samples();
        prop_assert!(!t.is_empty());
        prop_assert!((0..=x.len() - t.len()).any(|s| x[s..s + t.len()] == *t));
    }

    #[test]
    fn resampled_length_is_rounded_ratio(len in 1usize..5000, from in prop::sample::select(vec![8000u32, 16000, 22050, 44100, 48000])) {
        let clip = AudioClip::new(vec![0.1; len], from).unwrap();
        let out = resample(&clip, SAMPLE_RATE);
        let expected = (len as f64 * SAMPLE_RATE as f64 / from as f64).round() as usize;
        prop_assert_eq!(out.len(), expected);
        prop_assert_eq!(out.sample_rate(), SAMPLE_RATE);
        prop_assert!(out.samples().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn wav_round_trip_on_the_16_bit_grid(codes in prop::collection::vec(-32768i32..32768, 1..3000)) {
        let x: Vec<f64> = codes.iter().map(|&c| c as f64 / 32768.0).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        write_wav(&path, &AudioClip::new(x.clone(), SAMPLE_RATE).unwrap()).unwrap();
        let back = load_wav(&path).unwrap();
        prop_assert_eq!(back.samples(), x.as_slice());
    }

    #[test]
    fn mel_is_deterministic_and_survives_the_file_format(x in samples(6000)) {
        let clip = AudioClip::new(x, SAMPLE_RATE).unwrap();
        let a = mel_spectrogram(&clip);
        let b = mel_spectrogram(&clip);
        prop_assert_eq!(a.values(), b.values());
        let dir = tempfile::tempdir().unwrap();
        write_mel(dir.path().join("m.json"), &a).unwrap();
        let back = read_mel(dir.path().join("m.json")).unwrap();
        prop_assert_eq!(back.n_frames(), a.n_frames());
        for (u, v) in back.values().iter().zip(a.values()) {
            prop_assert_eq!(*u, *v as f32 as f64);
        }
    }
}

#[test]
fn white_noise_energy_matches_the_window() {
    use aratts::rng;
    let mut r = rng::seeded(11);
    let sigma = 0.2;
    let x: Vec<f64> = (0..3 * SAMPLE_RATE as usize).map(|_| rng::normal(&mut r, sigma)).collect();
    let frames = stft(&AudioClip::new(x, SAMPLE_RATE).unwrap(), FRAME_LENGTH, HOP);
    let n = FRAME_LENGTH;
    let window_energy: f64 = (0..n).map(|i| (0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n as f64).cos()).powi(2)).sum();
    let interior = &frames[4..frames.len() - 4];
    let spectral: f64 = interior
        .iter()
        .map(|f| {
            let m = f.magnitudes();
            m[0] * m[0] + m[n / 2] * m[n / 2] + 2.0 * m[1..n / 2].iter().map(|v| v * v).sum::<f64>()
        })
        .sum::<f64>()
        / interior.len() as f64;
    let expected = n as f64 * sigma * sigma * window_energy;
    assert!((spectral / expected - 1.0).abs() < 0.05, "{spectral} vs {expected}");
}
