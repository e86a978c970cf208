//! Differentiable negative log-likelihood on the autodiff tape.

use super::{squeeze, Result, VocoderError, WaveGlow, Wn, GROUP};
use crate::autodiff::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct NllOutput {
    /// `Σ z²/2 − log_det`, summed over the batch.
    pub loss: Var,
    /// `[b, 8, groups]`
    pub z: Var,
    pub log_det: Var,
    /// Audio samples covered, `b · frames · hop`.
    pub samples: usize,
}

impl WaveGlow {
    /// Conditioning `[b, 8·n_mels, groups]` from `mel: [b, n_mels, frames]`.
    pub fn conditioning_graph(&self, g: &Graph, mel: Var) -> Result<Var> {
        let shape = g.shape(mel);
        let (b, nm, frames) = match shape[..] {
            [b, m, f] if m == self.config.n_mels && f > 0 => (b, m, f),
            _ => return Err(VocoderError::ShapeMismatch(format!("mel {shape:?}, expected [b, {}, frames]", self.config.n_mels))),
        };
        let hop = self.config.hop;
        let w = g.param(&self.params, self.upsample_w);
        let bias = g.param(&self.params, self.upsample_b);
        let up = g.conv_transpose1d(mel, w, Some(bias), hop)?;
        let len = frames * hop;
        let up = g.slice(up, 2, 0, len)?;
        let n = len / GROUP;
        let up = g.reshape(up, &[b, nm, n, GROUP])?;
        let up = g.transpose(up, 2, 3)?;
        Ok(g.reshape(up, &[b, nm * GROUP, n])?)
    }

    fn wn_graph(&self, g: &Graph, wn: &Wn, z_a: Var, cond: Var) -> Result<Var> {
        let p = &self.params;
        let ch = self.config.wn_channels;
        let mut x = wn.start.forward(g, p, z_a)?;
        let cond_all = wn.cond.forward(g, p, cond)?;
        let mut skip: Option<Var> = None;
        let n_layers = wn.layers.len();
        for (i, l) in wn.layers.iter().enumerate() {
            let h = l.in_conv.forward(g, p, x)?;
            let a = g.add(h, g.slice(cond_all, 1, i * 2 * ch, 2 * ch)?)?;
            let acts = g.mul(g.tanh(g.slice(a, 1, 0, ch)?)?, g.sigmoid(g.slice(a, 1, ch, ch)?)?)?;
            let rs = l.res_skip.forward(g, p, acts)?;
            let s = if i + 1 == n_layers {
                rs
            } else {
                x = g.add(x, g.slice(rs, 1, 0, ch)?)?;
                g.slice(rs, 1, ch, ch)?
            };
            skip = Some(match skip {
                Some(acc) => g.add(acc, s)?,
                None => s,
            });
        }
        Ok(wn.end.forward(g, p, skip.expect("at least one WN layer"))?)
    }

    /// NLL of already squeezed audio `z: [b, 8, groups]` given conditioning
    /// from [`Self::conditioning_graph`].
    pub fn nll_squeezed(&self, g: &Graph, z: Var, cond: Var) -> Result<NllOutput> {
        let shape = g.shape(z);
        let (b, n) = match shape[..] {
            [b, c, n] if c == GROUP => (b, n),
            _ => return Err(VocoderError::ShapeMismatch(format!("latent {shape:?}, expected [b, 8, n]"))),
        };
        let half = GROUP / 2;
        let clamp = self.config.log_s_clamp;
        let mut z = z;
        let mut terms = Vec::with_capacity(2 * self.flows.len());
        for flow in &self.flows {
            let w = g.param(&self.params, flow.mix);
            terms.push(g.scale(g.log_abs_det(w)?, (b * n) as f64)?);
            z = g.conv1d(z, g.reshape(w, &[GROUP, GROUP, 1])?, None, 1)?;
            let z_a = g.slice(z, 1, 0, half)?;
            let z_b = g.slice(z, 1, half, half)?;
            let st = self.wn_graph(g, &flow.wn, z_a, cond)?;
            let log_s = g.clamp(g.slice(st, 1, 0, half)?, -clamp, clamp)?;
            let t = g.slice(st, 1, half, half)?;
            let z_b = g.add(g.mul(z_b, g.exp(log_s)?)?, t)?;
            terms.push(g.sum(log_s)?);
            z = g.concat(&[z_a, z_b], 1)?;
        }
        let mut log_det = terms[0];
        for &t in &terms[1..] {
            log_det = g.add(log_det, t)?;
        }
        let energy = g.scale(g.sum(g.mul(z, z)?)?, 0.5)?;
        let loss = g.sub(energy, log_det)?;
        Ok(NllOutput { loss, z, log_det, samples: b * n * GROUP })
    }

    /// NLL of `audio: [b, len]` given `mel: [b, frames, n_mels]`; audio is
    /// zero padded to `frames · hop`.
    pub fn nll(&self, g: &Graph, audio: &Tensor, mel: &Tensor) -> Result<NllOutput> {
        let (b, len, frames, nm) = match (audio.shape(), mel.shape()) {
            ([b, l], [b2, f, m]) if b == b2 && *m == self.config.n_mels => (*b, *l, *f, *m),
            (a, m) => return Err(VocoderError::ShapeMismatch(format!("audio {a:?} with mel {m:?}"))),
        };
        let target = frames * self.config.hop;
        if len > target || frames == 0 {
            return Err(VocoderError::ShapeMismatch(format!("{len} samples for {frames} frames")));
        }
        let n = target / GROUP;
        let mut zdata = Vec::with_capacity(b * target);
        for row in audio.data().chunks(len.max(1)).take(b) {
            let mut padded = row.to_vec();
            padded.resize(target, 0.0);
            zdata.extend(squeeze(&padded).data);
        }
        let mut mel_t = vec![0.0; b * nm * frames];
        for bi in 0..b {
            for t in 0..frames {
                for m in 0..nm {
                    mel_t[(bi * nm + m) * frames + t] = mel.data()[(bi * frames + t) * nm + m];
                }
            }
        }
        let z = g.constant(Tensor::new(&[b, GROUP, n], zdata));
        let mel_v = g.constant(Tensor::new(&[b, nm, frames], mel_t));
        let cond = self.conditioning_graph(g, mel_v)?;
        self.nll_squeezed(g, z, cond)
    }
}
