//! Flow-based vocoder.
//!
//! Audio is squeezed into groups of eight consecutive samples, then passed
//! through a stack of flow steps, each an invertible 1×1 convolution that
//! mixes the eight channels followed by an affine coupling layer whose scale
//! and shift come from a dilated gated convolution network ("WN") conditioned
//! on the upsampled mel spectrogram. Training maximizes the likelihood of the
//! audio under a unit Gaussian on the latent; synthesis runs the flow backwards
//! from Gaussian noise.

mod fast;
mod graph;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioClip, MelSpectrogram};
use crate::autodiff::{AutogradError, ParamId, ParamSet};
use crate::nn::Conv1d;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub use fast::{FastWaveGlow, FlowForward};
pub use graph::NllOutput;

/// Samples per squeezed group.
pub const GROUP: usize = 8;
/// Below this `|det W|` a mixing matrix counts as singular.
pub const SINGULAR_DET: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum VocoderError {
    #[error("flow {flow}: mixing matrix is singular (|det| = {det:e})")]
    SingularWeight { flow: usize, det: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

pub type Result<T> = std::result::Result<T, VocoderError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaveGlowConfig {
    pub n_flows: usize,
    pub n_mels: usize,
    /// Audio samples per mel frame.
    pub hop: usize,
    pub wn_layers: usize,
    pub wn_channels: usize,
    pub wn_kernel: usize,
    /// `log_s` is clamped to `[-log_s_clamp, log_s_clamp]`.
    pub log_s_clamp: f64,
}

impl WaveGlowConfig {
    /// Desk-scale defaults.
    pub fn desk() -> Self {
        Self {
            n_flows: 12,
            n_mels: crate::audio::N_MELS,
            hop: crate::audio::HOP,
            wn_layers: 4,
            wn_channels: 64,
            wn_kernel: 3,
            log_s_clamp: 7.0,
        }
    }

    /// Full-size coupling networks.
    pub fn full() -> Self {
        Self { wn_layers: 8, wn_channels: 256, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(VocoderError::InvalidConfig(m.into()));
        if self.n_flows == 0 || self.n_mels == 0 || self.wn_layers == 0 || self.wn_channels == 0 {
            return bad("sizes must be positive");
        }
        if self.hop == 0 || self.hop % GROUP != 0 {
            return bad("hop must be a positive multiple of 8");
        }
        if self.wn_kernel % 2 == 0 {
            return bad("WN kernel must be odd");
        }
        if !(self.log_s_clamp > 0.0) {
            return bad("log_s_clamp must be positive");
        }
        Ok(())
    }

    /// Squeezed time steps per mel frame.
    pub fn groups_per_frame(&self) -> usize {
        self.hop / GROUP
    }
}

/// Audio reshaped to `[8 × n]` (row-major, channel-first): entry `(c, t)` is
/// sample `8t + c`. Input is zero padded to a multiple of 8.
#[derive(Debug, Clone, PartialEq)]
pub struct Squeezed<T> {
    pub data: Vec<T>,
    pub groups: usize,
    pub original_len: usize,
}

pub fn squeeze<T: Copy + Default>(samples: &[T]) -> Squeezed<T> {
    let groups = samples.len().div_ceil(GROUP);
    let mut data = vec![T::default(); GROUP * groups];
    for (i, &s) in samples.iter().enumerate() {
        data[(i % GROUP) * groups + i / GROUP] = s;
    }
    Squeezed { data, groups, original_len: samples.len() }
}

/// Inverse of [`squeeze`]: returns all `8·groups` samples.
pub fn unsqueeze<T: Copy + Default>(data: &[T], groups: usize) -> Vec<T> {
    assert_eq!(data.len(), GROUP * groups, "unsqueeze: expected 8·groups entries");
    let mut out = vec![T::default(); data.len()];
    for c in 0..GROUP {
        for t in 0..groups {
            out[t * GROUP + c] = data[c * groups + t];
        }
    }
    out
}

#[derive(Debug, Clone)]
pub(crate) struct WnLayer {
    pub in_conv: Conv1d,
    pub res_skip: Conv1d,
}

/// Coupling network: start projection, gated dilated layers with residual and
/// skip paths, zero-initialized end projection to `(log_s, t)`.
#[derive(Debug, Clone)]
pub(crate) struct Wn {
    pub start: Conv1d,
    pub cond: Conv1d,
    pub layers: Vec<WnLayer>,
    pub end: Conv1d,
}

#[derive(Debug, Clone)]
pub(crate) struct FlowStep {
    /// `[8, 8]` mixing matrix.
    pub mix: ParamId,
    pub wn: Wn,
}

#[derive(Debug, Clone)]
pub struct WaveGlow {
    pub config: WaveGlowConfig,
    pub params: ParamSet,
    /// `[n_mels, n_mels, 2·hop]`
    pub(crate) upsample_w: ParamId,
    pub(crate) upsample_b: ParamId,
    pub(crate) flows: Vec<FlowStep>,
}

/// Random orthogonal matrix with determinant +1, from the QR factorization of
/// a Gaussian matrix.
pub fn random_orthogonal(n: usize, rng: &mut Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng::normal(rng, 1.0));
    let qr = a.qr();
    let (mut q, r) = (qr.q(), qr.r());
    // fix signs so the factorization is unique, then force det = +1
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    if q.determinant() < 0.0 {
        q.column_mut(0).neg_mut();
    }
    q
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

impl WaveGlow {
    pub fn new(config: WaveGlowConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut r = rng::seeded(seed);
        let mut p = ParamSet::new();
        let k_up = 2 * c.hop;
        let bound = (1.0 / (c.n_mels * k_up) as f64).sqrt();
        let up = Tensor::from_fn(&[c.n_mels, c.n_mels, k_up], |_| rng::uniform(&mut r, -bound, bound));
        let upsample_w = p.add("upsample.weight", up, true);
        let upsample_b = p.add("upsample.bias", Tensor::zeros(&[c.n_mels]), true);
        let half = GROUP / 2;
        let ch = c.wn_channels;
        let mut flows = Vec::with_capacity(c.n_flows);
        for f in 0..c.n_flows {
            let name = format!("flow{f}");
            let mix = p.add(format!("{name}.mix"), Tensor::new(&[GROUP, GROUP], row_major(&random_orthogonal(GROUP, &mut r))), true);
            let start = Conv1d::new(&mut p, &format!("{name}.wn.start"), half, ch, 1, 1, true, 1.0, &mut r);
            let cond = Conv1d::new(&mut p, &format!("{name}.wn.cond"), GROUP * c.n_mels, 2 * ch * c.wn_layers, 1, 1, true, 1.0, &mut r);
            let layers = (0..c.wn_layers)
                .map(|i| {
                    let rs_out = if i + 1 < c.wn_layers { 2 * ch } else { ch };
                    WnLayer {
                        in_conv: Conv1d::new(&mut p, &format!("{name}.wn.in{i}"), ch, 2 * ch, c.wn_kernel, 1 << i, true, 1.0, &mut r),
                        res_skip: Conv1d::new(&mut p, &format!("{name}.wn.res_skip{i}"), ch, rs_out, 1, 1, true, 1.0, &mut r),
                    }
                })
                .collect();
            let end = Conv1d::new(&mut p, &format!("{name}.wn.end"), ch, GROUP, 1, 1, true, 1.0, &mut r);
            p.set_value(end.weight, Tensor::zeros(&[GROUP, ch, 1]));
            flows.push(FlowStep { mix, wn: Wn { start, cond, layers, end } });
        }
        Ok(Self { config, params: p, upsample_w, upsample_b, flows })
    }

    /// Parameter ids of each flow's mixing matrix.
    pub fn mixing_params(&self) -> Vec<ParamId> {
        self.flows.iter().map(|f| f.mix).collect()
    }

    /// Parameter ids of each coupling network's final projection (weight,
    /// bias), zero at initialization.
    pub fn end_params(&self) -> Vec<ParamId> {
        self.flows.iter().flat_map(|f| [f.wn.end.weight, f.wn.end.bias.expect("end has bias")]).collect()
    }

    /// Fails with `SingularWeight` if any mixing matrix has `|det| < 1e-8`.
    pub fn check_invertible(&self) -> Result<()> {
        for (i, f) in self.flows.iter().enumerate() {
            let w = self.params.value(f.mix);
            let det = DMatrix::from_row_slice(GROUP, GROUP, w.data()).determinant();
            if !(det.abs() >= SINGULAR_DET) {
                return Err(VocoderError::SingularWeight { flow: i, det });
            }
        }
        Ok(())
    }

    /// Converts the weights to `F` and precomputes inverse mixing matrices.
    pub fn compile<F: crate::tensor::Real>(&self) -> Result<FastWaveGlow<F>> {
        FastWaveGlow::new(self)
    }

    /// Samples audio for a mel spectrogram: `z ~ N(0, σ²)`, inverse flow,
    /// unsqueeze, clamp to `[-1, 1]`. Output length is `hop · n_frames`.
    pub fn synthesize(&self, mel: &MelSpectrogram, sigma: f64, seed: u64, sample_rate: u32) -> Result<AudioClip> {
        let frames = Tensor::new(&[mel.n_frames(), mel.n_mels()], mel.values().to_vec());
        let fast = self.compile::<f64>()?;
        let samples = fast.sample(&frames, sigma, seed)?;
        Ok(AudioClip::clamped(samples, sample_rate).expect("positive sample rate"))
    }
}
