//! Tape-free forward and inverse passes, generic over `f32` / `f64`.

use nalgebra::DMatrix;

use super::{squeeze, unsqueeze, Result, VocoderError, WaveGlow, GROUP, SINGULAR_DET};
use crate::rng;
use crate::tensor::{conv1d_single, conv_transpose1d_single, gemm, Real, Tensor};

#[derive(Debug, Clone)]
struct FastLayer<F> {
    in_w: Vec<F>,
    in_b: Vec<F>,
    dilation: usize,
    rs_w: Vec<F>,
    rs_b: Vec<F>,
}

#[derive(Debug, Clone)]
struct FastFlow<F> {
    w: Vec<F>,
    w_inv: Vec<F>,
    /// `ln |det W|`
    log_det_w: f64,
    start_w: Vec<F>,
    start_b: Vec<F>,
    cond_w: Vec<F>,
    cond_b: Vec<F>,
    layers: Vec<FastLayer<F>>,
    end_w: Vec<F>,
    end_b: Vec<F>,
}

/// Result of running the flow on audio.
#[derive(Debug, Clone)]
pub struct FlowForward<F> {
    /// Latent, `[8 × groups]` row-major.
    pub z: Vec<F>,
    pub groups: usize,
    /// Sum of all per-step contributions.
    pub log_det: f64,
    /// `(mixing, coupling)` log-det of each step.
    pub step_log_dets: Vec<(f64, f64)>,
}

/// A compiled copy of the vocoder weights.
#[derive(Debug, Clone)]
pub struct FastWaveGlow<F> {
    n_mels: usize,
    hop: usize,
    wn_channels: usize,
    wn_kernel: usize,
    clamp: f64,
    up_w: Vec<F>,
    up_b: Vec<F>,
    flows: Vec<FastFlow<F>>,
}

fn cast<F: Real>(t: &Tensor) -> Vec<F> {
    t.data().iter().map(|&v| F::from_f64(v)).collect()
}

/// `ln |det W|` and `W⁻¹` (row-major) of a row-major `[8, 8]` matrix.
pub fn invert_mixing(w: &[f64]) -> std::result::Result<(f64, Vec<f64>), f64> {
    let m = DMatrix::from_row_slice(GROUP, GROUP, w);
    let lu = m.lu();
    let det = lu.determinant();
    if !(det.abs() >= SINGULAR_DET) {
        return Err(det);
    }
    let inv = lu.try_inverse().ok_or(det)?;
    Ok((det.abs().ln(), inv.transpose().as_slice().to_vec()))
}

/// `W z` for `z: [8 × n]`.
pub fn mix_channels<F: Real>(w: &[F], z: &[F], n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); GROUP * n];
    gemm(false, false, GROUP, n, GROUP, F::one(), w, z, F::zero(), &mut out);
    out
}

impl<F: Real> FastWaveGlow<F> {
    pub(super) fn new(model: &WaveGlow) -> Result<Self> {
        let c = &model.config;
        let p = &model.params;
        let v = |id| cast::<F>(p.value(id));
        let mut flows = Vec::with_capacity(model.flows.len());
        for (i, f) in model.flows.iter().enumerate() {
            let (log_det_w, inv) =
                invert_mixing(p.value(f.mix).data()).map_err(|det| VocoderError::SingularWeight { flow: i, det })?;
            let bias = |b: Option<_>| v(b.expect("WN convs have biases"));
            flows.push(FastFlow {
                w: v(f.mix),
                w_inv: inv.iter().map(|&x| F::from_f64(x)).collect(),
                log_det_w,
                start_w: v(f.wn.start.weight),
                start_b: bias(f.wn.start.bias),
                cond_w: v(f.wn.cond.weight),
                cond_b: bias(f.wn.cond.bias),
                layers: f
                    .wn
                    .layers
                    .iter()
                    .map(|l| FastLayer {
                        in_w: v(l.in_conv.weight),
                        in_b: bias(l.in_conv.bias),
                        dilation: l.in_conv.dilation,
                        rs_w: v(l.res_skip.weight),
                        rs_b: bias(l.res_skip.bias),
                    })
                    .collect(),
                end_w: v(f.wn.end.weight),
                end_b: bias(f.wn.end.bias),
            });
        }
        Ok(Self {
            n_mels: c.n_mels,
            hop: c.hop,
            wn_channels: c.wn_channels,
            wn_kernel: c.wn_kernel,
            clamp: c.log_s_clamp,
            up_w: v(model.upsample_w),
            up_b: v(model.upsample_b),
            flows,
        })
    }

    pub fn n_flows(&self) -> usize {
        self.flows.len()
    }

    /// Per-group conditioning `[8·n_mels × groups]` from a `[frames, n_mels]`
    /// mel: transposed-conv upsampling to one vector per sample, cut to
    /// `frames·hop`, then the eight sample vectors of each group stacked.
    pub fn conditioning(&self, mel: &Tensor) -> Result<(Vec<F>, usize)> {
        let frames = match mel.shape() {
            [f, m] if *m == self.n_mels && *f > 0 => *f,
            s => return Err(VocoderError::ShapeMismatch(format!("mel {s:?}, expected [frames>0, {}]", self.n_mels))),
        };
        let nm = self.n_mels;
        let mut x = vec![F::zero(); nm * frames];
        for t in 0..frames {
            for m in 0..nm {
                x[m * frames + t] = F::from_f64(mel.data()[t * nm + m]);
            }
        }
        let k = 2 * self.hop;
        let up = conv_transpose1d_single(&x, nm, frames, &self.up_w, Some(&self.up_b), nm, k, self.hop);
        let full = (frames - 1) * self.hop + k;
        let len = frames * self.hop;
        let n = len / GROUP;
        let mut cond = vec![F::zero(); nm * GROUP * n];
        for m in 0..nm {
            let row = &up[m * full..m * full + len];
            for (s, &val) in row.iter().enumerate() {
                cond[(m * GROUP + s % GROUP) * n + s / GROUP] = val;
            }
        }
        Ok((cond, n))
    }

    /// Coupling network output `[8 × n]`: rows 0..4 are `log_s` (clamped),
    /// rows 4..8 are `t`.
    fn wn(&self, flow: &FastFlow<F>, z_a: &[F], cond: &[F], n: usize) -> Vec<F> {
        let ch = self.wn_channels;
        let half = GROUP / 2;
        let mut x = conv1d_single(z_a, half, n, &flow.start_w, Some(&flow.start_b), ch, 1, 1);
        let cond_all = conv1d_single(cond, GROUP * self.n_mels, n, &flow.cond_w, Some(&flow.cond_b), 2 * ch * flow.layers.len(), 1, 1);
        let mut skip = vec![F::zero(); ch * n];
        let n_layers = flow.layers.len();
        for (i, l) in flow.layers.iter().enumerate() {
            let mut a = conv1d_single(&x, ch, n, &l.in_w, Some(&l.in_b), 2 * ch, self.wn_kernel, l.dilation);
            let c_i = &cond_all[i * 2 * ch * n..(i + 1) * 2 * ch * n];
            a.iter_mut().zip(c_i).for_each(|(v, c)| *v = *v + *c);
            let (th, sg) = a.split_at(ch * n);
            let acts: Vec<F> = th.iter().zip(sg).map(|(&p, &q)| p.tanh() / (F::one() + (-q).exp())).collect();
            let last = i + 1 == n_layers;
            let rs_out = if last { ch } else { 2 * ch };
            let rs = conv1d_single(&acts, ch, n, &l.rs_w, Some(&l.rs_b), rs_out, 1, 1);
            if last {
                skip.iter_mut().zip(&rs).for_each(|(s, r)| *s = *s + *r);
            } else {
                x.iter_mut().zip(&rs[..ch * n]).for_each(|(v, r)| *v = *v + *r);
                skip.iter_mut().zip(&rs[ch * n..]).for_each(|(s, r)| *s = *s + *r);
            }
        }
        let mut out = conv1d_single(&skip, ch, n, &flow.end_w, Some(&flow.end_b), GROUP, 1, 1);
        let c = F::from_f64(self.clamp);
        out[..half * n].iter_mut().for_each(|v| *v = v.max(-c).min(c));
        out
    }

    /// Mixing matrix of step `i`, row-major.
    pub fn mixing(&self, i: usize) -> &[F] {
        &self.flows[i].w
    }

    /// One flow step forward on `z: [8 × n]`; returns the new latent and the
    /// `(mixing, coupling)` log-det contributions.
    pub fn step_forward(&self, i: usize, z: &[F], cond: &[F], n: usize) -> (Vec<F>, (f64, f64)) {
        let flow = &self.flows[i];
        let mut z = mix_channels(&flow.w, z, n);
        let half = GROUP / 2 * n;
        let st = self.wn(flow, &z[..half], cond, n);
        let (log_s, t) = st.split_at(half);
        let mut ld = 0.0;
        for ((zb, &ls), &tt) in z[half..].iter_mut().zip(log_s).zip(t) {
            *zb = *zb * ls.exp() + tt;
            ld += ls.to_f64().unwrap_or(f64::NAN);
        }
        (z, (flow.log_det_w * n as f64, ld))
    }

    /// Exact inverse of [`Self::step_forward`].
    pub fn step_inverse(&self, i: usize, z: &[F], cond: &[F], n: usize) -> Vec<F> {
        let flow = &self.flows[i];
        let half = GROUP / 2 * n;
        let mut z = z.to_vec();
        let st = self.wn(flow, &z[..half], cond, n);
        let (log_s, t) = st.split_at(half);
        for ((zb, &ls), &tt) in z[half..].iter_mut().zip(log_s).zip(t) {
            *zb = (*zb - tt) * (-ls).exp();
        }
        mix_channels(&flow.w_inv, &z, n)
    }

    fn check_audio_len(&self, len: usize, mel: &Tensor) -> Result<usize> {
        let target = mel.dim(0) * self.hop;
        if len > target {
            return Err(VocoderError::ShapeMismatch(format!("{len} samples exceed {} frames × hop {}", mel.dim(0), self.hop)));
        }
        Ok(target)
    }

    /// Squeezes `audio` (zero padded to `frames·hop`) and runs every step.
    pub fn forward(&self, audio: &[F], mel: &Tensor) -> Result<FlowForward<F>> {
        let (cond, n) = self.conditioning(mel)?;
        let target = self.check_audio_len(audio.len(), mel)?;
        let mut padded = audio.to_vec();
        padded.resize(target, F::zero());
        let sq = squeeze(&padded);
        debug_assert_eq!(sq.groups, n);
        let mut z = sq.data;
        let mut steps = Vec::with_capacity(self.flows.len());
        for i in 0..self.flows.len() {
            let (next, ld) = self.step_forward(i, &z, &cond, n);
            z = next;
            steps.push(ld);
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(VocoderError::NonFinite("flow forward"));
        }
        let log_det = steps.iter().map(|(a, b)| a + b).sum();
        Ok(FlowForward { z, groups: n, log_det, step_log_dets: steps })
    }

    /// Maps a latent `[8 × frames·hop/8]` back to `frames·hop` samples.
    pub fn inverse(&self, z: &[F], mel: &Tensor) -> Result<Vec<F>> {
        let (cond, n) = self.conditioning(mel)?;
        if z.len() != GROUP * n {
            return Err(VocoderError::ShapeMismatch(format!("latent has {} entries, expected {}", z.len(), GROUP * n)));
        }
        let mut z = z.to_vec();
        for i in (0..self.flows.len()).rev() {
            z = self.step_inverse(i, &z, &cond, n);
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(VocoderError::NonFinite("flow inverse"));
        }
        Ok(unsqueeze(&z, n))
    }

    /// Inverse flow from `z ~ N(0, σ²)`. Returns `frames·hop` unclamped samples.
    pub fn sample(&self, mel: &Tensor, sigma: f64, seed: u64) -> Result<Vec<f64>> {
        let n = mel.dim(0) * self.hop / GROUP;
        let mut r = rng::seeded(seed);
        let z: Vec<F> = (0..GROUP * n)
            .map(|_| if sigma == 0.0 { F::zero() } else { F::from_f64(rng::normal(&mut r, sigma)) })
            .collect();
        let audio = self.inverse(&z, mel)?;
        Ok(audio.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect())
    }
}
