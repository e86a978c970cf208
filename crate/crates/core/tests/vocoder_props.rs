use aratts::rng::{self, Rng};
use aratts::tensor::Tensor;
use aratts::training::{random_crop, toy_vocoder_corpus, vocoder_loss, vocoder_step, Adam, AdamConfig};
use aratts::vocoder::{squeeze, unsqueeze, WaveGlow, WaveGlowConfig, GROUP};
use proptest::prelude::*;

fn randomize_ends(m: &mut WaveGlow, r: &mut Rng, std: f64) {
    for id in m.end_params() {
        let shape = m.params.value(id).shape().to_vec();
        m.params.set_value(id, Tensor::from_fn(&shape, |_| rng::normal(r, std)));
    }
}

fn small_config(n_flows: usize, layers: usize, channels: usize, n_mels: usize, hop: usize) -> WaveGlowConfig {
    WaveGlowConfig { n_flows, wn_layers: layers, wn_channels: channels, n_mels, hop, ..WaveGlowConfig::desk() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn squeeze_then_unsqueeze_restores_samples(x in prop::collection::vec(-1.0f64..1.0, 0..200)) {
        let sq = squeeze(&x);
        prop_assert_eq!(sq.data.len(), GROUP * x.len().div_ceil(GROUP));
        prop_assert_eq!(sq.original_len, x.len());
        let back = unsqueeze(&sq.data, sq.groups);
        prop_assert_eq!(&back[..x.len()], &x[..]);
        prop_assert!(back[x.len()..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_flows_invert_and_log_dets_add_up(
        n_flows in 1usize..5,
        layers in 1usize..3,
        channels in 2usize..9,
        frames in 1usize..6,
        seed in 0u64..10_000,
    ) {
        let (n_mels, hop) = (5, 32);
        let mut m = WaveGlow::new(small_config(n_flows, layers, channels, n_mels, hop), seed).unwrap();
        let mut r = rng::seeded(seed ^ 0xabc);
        randomize_ends(&mut m, &mut r, 0.3);
        let mel = Tensor::from_fn(&[frames, n_mels], |_| rng::normal(&mut r, 1.0));
        let audio: Vec<f64> = (0..frames * hop).map(|_| rng::uniform(&mut r, -0.8, 0.8)).collect();
        let fast = m.compile::<f64>().unwrap();
        let fw = fast.forward(&audio, &mel).unwrap();
        let sum: f64 = fw.step_log_dets.iter().map(|(a, b)| a + b).sum();
        prop_assert!((fw.log_det - sum).abs() <= 1e-9 * sum.abs().max(1.0));
        let back = fast.inverse(&fw.z, &mel).unwrap();
        let err = back.iter().zip(&audio).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn fresh_mixing_weights_are_orthogonal(seed in 0u64..10_000) {
        let m = WaveGlow::new(small_config(3, 1, 4, 4, 16), seed).unwrap();
        for id in m.mixing_params() {
            let w = m.params.value(id).data();
            for i in 0..GROUP {
                for j in 0..GROUP {
                    let dot: f64 = (0..GROUP).map(|k| w[k * GROUP + i] * w[k * GROUP + j]).sum();
                    let target = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((dot - target).abs() < 1e-10);
                }
            }
        }
    }
}

#[test]
fn sampling_with_zero_sigma_ignores_the_seed() {
    let m = WaveGlow::new(small_config(2, 1, 4, 80, 256), 3).unwrap();
    let mel = toy_vocoder_corpus(1, 0.2, 1).remove(0).mel;
    let fast = m.compile::<f64>().unwrap();
    assert_eq!(fast.sample(&mel, 0.0, 1).unwrap(), fast.sample(&mel, 0.0, 2).unwrap());
    assert_eq!(fast.sample(&mel, 0.6, 5).unwrap(), fast.sample(&mel, 0.6, 5).unwrap());
    assert_ne!(fast.sample(&mel, 0.6, 5).unwrap(), fast.sample(&mel, 0.6, 6).unwrap());
}

/// Desk-scale monotonicity: one 30 s clip, 500 steps on random 16-frame
/// crops. The NLL (per sample, without the Gaussian constant) must drop by at
/// least half of its initial magnitude on a fixed set of crops.
#[test]
fn nll_falls_on_a_single_clip() {
    let clip = toy_vocoder_corpus(1, 30.0, 21).remove(0);
    let cfg = small_config(4, 2, 16, 80, 256);
    let mut model = WaveGlow::new(cfg, 21).unwrap();
    let probe = |m: &WaveGlow| {
        let mut r = rng::seeded(99);
        let mut total = 0.0;
        for _ in 0..8 {
            let (audio, mel) = random_crop(&clip, 16, 256, &mut r);
            let audio = Tensor::new(&[1, audio.len()], audio);
            let mel = mel.reshaped(&[1, 16, 80]);
            total += vocoder_loss(m, &audio, &mel).unwrap();
        }
        total / 8.0
    };
    let before = probe(&model);
    let mut adam = Adam::new(AdamConfig::default(), &model.params);
    let mut r = rng::seeded(5);
    for _ in 0..500 {
        let (audio, mel) = random_crop(&clip, 16, 256, &mut r);
        let audio = Tensor::new(&[1, audio.len()], audio);
        vocoder_step(&mut model, &mut adam, &audio, &mel.reshaped(&[1, 16, 80])).unwrap();
    }
    let after = probe(&model);
    assert!(before - after >= 0.5 * before.abs(), "nll {before} -> {after}");
}
