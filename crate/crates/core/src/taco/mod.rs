//! Spectrogram prediction network.
//!
//! Symbols are embedded, passed through a convolution stack and a
//! bidirectional LSTM. An autoregressive decoder attends over those encoder
//! outputs (location-sensitive additive attention), predicts one mel frame and
//! a stop logit per step, and a convolutional postnet adds a residual
//! refinement to the whole predicted spectrogram.

pub mod attention;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{MelSpectrogram, LOG_FLOOR};
use crate::autodiff::{AutogradError, Graph, ParamSet, Var};
use crate::nn::{self, BatchNorm, Conv1d, Ctx, Embedding, Linear, LstmCell, LstmState};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub use attention::{attend, Attention, AttentionMemory};

/// Checkpoint name of the symbol embedding table.
pub const EMBEDDING_PARAM: &str = "encoder.embedding.weight";

#[derive(Debug, Error)]
pub enum TacoError {
    #[error("symbol id {id} is outside the table of {n_symbols}")]
    UnknownSymbolId { id: usize, n_symbols: usize },
    #[error("empty input sequence")]
    EmptyInput,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("batch error: {0}")]
    InvalidBatch(String),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

pub type Result<T> = std::result::Result<T, TacoError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TacoConfig {
    pub n_symbols: usize,
    pub n_mels: usize,
    pub embedding_dim: usize,
    pub encoder_conv_channels: usize,
    pub encoder_conv_layers: usize,
    pub encoder_conv_width: usize,
    pub encoder_dropout: f64,
    /// Units per direction; the concatenated encoder output is twice this.
    pub encoder_lstm_units: usize,
    pub prenet_units: usize,
    pub prenet_layers: usize,
    pub prenet_dropout: f64,
    /// Keep prenet dropout on during inference.
    pub prenet_dropout_at_inference: bool,
    /// Seeds the inference-time prenet dropout masks.
    pub inference_dropout_seed: u64,
    pub attention_lstm_units: usize,
    pub decoder_lstm_units: usize,
    pub attention_dim: usize,
    pub location_features: bool,
    pub location_filters: usize,
    pub location_kernel: usize,
    pub zoneout: f64,
    pub postnet_channels: usize,
    pub postnet_layers: usize,
    pub postnet_width: usize,
    pub postnet_dropout: f64,
    pub stop_threshold: f64,
    /// Inference cap: `max_steps_per_symbol · T_x + max_steps_offset`.
    pub max_steps_per_symbol: usize,
    pub max_steps_offset: usize,
}

impl TacoConfig {
    /// Full-size network.
    pub fn full(n_symbols: usize) -> Self {
        Self {
            n_symbols,
            n_mels: crate::audio::N_MELS,
            embedding_dim: 512,
            encoder_conv_channels: 512,
            encoder_conv_layers: 3,
            encoder_conv_width: 5,
            encoder_dropout: 0.5,
            encoder_lstm_units: 256,
            prenet_units: 256,
            prenet_layers: 2,
            prenet_dropout: 0.5,
            prenet_dropout_at_inference: true,
            inference_dropout_seed: 0,
            attention_lstm_units: 1024,
            decoder_lstm_units: 1024,
            attention_dim: 128,
            location_features: true,
            location_filters: 32,
            location_kernel: 31,
            zoneout: 0.1,
            postnet_channels: 512,
            postnet_layers: 5,
            postnet_width: 5,
            postnet_dropout: 0.5,
            stop_threshold: 0.5,
            max_steps_per_symbol: 10,
            max_steps_offset: 100,
        }
    }

    /// Desk-scale network used by the toy corpus.
    pub fn reduced(n_symbols: usize) -> Self {
        Self {
            embedding_dim: 64,
            encoder_conv_channels: 64,
            encoder_lstm_units: 32,
            prenet_units: 64,
            attention_lstm_units: 128,
            decoder_lstm_units: 128,
            attention_dim: 64,
            postnet_channels: 64,
            ..Self::full(n_symbols)
        }
    }

    pub fn encoder_dim(&self) -> usize {
        2 * self.encoder_lstm_units
    }

    pub fn max_steps(&self, t_x: usize) -> usize {
        self.max_steps_per_symbol * t_x + self.max_steps_offset
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TacoError::InvalidConfig(m.into()));
        let positive = [
            self.n_symbols,
            self.n_mels,
            self.embedding_dim,
            self.encoder_conv_channels,
            self.encoder_lstm_units,
            self.prenet_units,
            self.attention_lstm_units,
            self.decoder_lstm_units,
            self.attention_dim,
            self.postnet_channels,
            self.postnet_layers,
        ];
        if positive.contains(&0) {
            return bad("layer sizes must be positive");
        }
        if self.encoder_conv_width % 2 == 0 || self.postnet_width % 2 == 0 {
            return bad("convolution widths must be odd");
        }
        if self.location_features && (self.location_filters == 0 || self.location_kernel % 2 == 0) {
            return bad("location features need filters > 0 and an odd kernel");
        }
        for (name, p) in [
            ("encoder_dropout", self.encoder_dropout),
            ("prenet_dropout", self.prenet_dropout),
            ("postnet_dropout", self.postnet_dropout),
            ("zoneout", self.zoneout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(TacoError::InvalidConfig(format!("{name} = {p} is outside [0, 1)")));
            }
        }
        if !(0.0..1.0).contains(&self.stop_threshold) {
            return bad("stop_threshold must be in [0, 1)");
        }
        Ok(())
    }
}

/// Padded symbol sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct TextBatch {
    /// Row-major `[batch, max_len]`, padded with symbol 0.
    pub ids: Vec<usize>,
    pub lengths: Vec<usize>,
    pub max_len: usize,
}

impl TextBatch {
    pub fn new(seqs: &[&[usize]]) -> Result<Self> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(TacoError::EmptyInput);
        }
        let max_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * max_len);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(0, max_len - s.len()));
        }
        Ok(Self { ids, lengths: seqs.iter().map(|s| s.len()).collect(), max_len })
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn mask(&self) -> Vec<bool> {
        self.lengths.iter().flat_map(|&l| (0..self.max_len).map(move |t| t < l)).collect()
    }
}

/// Text plus teacher-forcing targets.
#[derive(Debug, Clone)]
pub struct TacoBatch {
    pub text: TextBatch,
    /// `[batch, max_frames, n_mels]`, zero padded.
    pub mels: Tensor,
    pub frame_lengths: Vec<usize>,
}

impl TacoBatch {
    /// `items`: symbol ids and a `[frames, n_mels]` target per utterance.
    pub fn new(items: &[(&[usize], &Tensor)]) -> Result<Self> {
        let seqs: Vec<&[usize]> = items.iter().map(|(s, _)| *s).collect();
        let text = TextBatch::new(&seqs)?;
        let n_mels = items[0].1.shape().get(1).copied().unwrap_or(0);
        for (_, m) in items {
            if m.rank() != 2 || m.dim(1) != n_mels || m.dim(0) == 0 {
                return Err(TacoError::InvalidBatch(format!("target of shape {:?}", m.shape())));
            }
        }
        let max_frames = items.iter().map(|(_, m)| m.dim(0)).max().unwrap_or(0);
        let mut mels = Tensor::zeros(&[items.len(), max_frames, n_mels]);
        for (b, (_, m)) in items.iter().enumerate() {
            let off = b * max_frames * n_mels;
            mels.data_mut()[off..off + m.len()].copy_from_slice(m.data());
        }
        Ok(Self { text, mels, frame_lengths: items.iter().map(|(_, m)| m.dim(0)).collect() })
    }

    pub fn max_frames(&self) -> usize {
        self.mels.dim(1)
    }

    /// 1 on real frames, 0 on padding; `[batch, max_frames]`.
    pub fn frame_mask(&self) -> Tensor {
        let t = self.max_frames();
        Tensor::new(
            &[self.text.batch(), t],
            self.frame_lengths.iter().flat_map(|&l| (0..t).map(move |i| if i < l { 1.0 } else { 0.0 })).collect(),
        )
    }

    /// Stop targets: 0 before each utterance's last frame, 1 from it onwards.
    pub fn stop_targets(&self) -> Tensor {
        let t = self.max_frames();
        Tensor::new(
            &[self.text.batch(), t],
            self.frame_lengths.iter().flat_map(|&l| (0..t).map(move |i| if i + 1 >= l { 1.0 } else { 0.0 })).collect(),
        )
    }
}

/// Recurrent decoder state between steps.
#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub attention_rnn: LstmState,
    pub decoder_rnn: LstmState,
    /// `[b, encoder_dim]`
    pub context: Var,
    /// `[b, t_x]`
    pub alpha: Var,
    /// `[b, t_x]`
    pub cumulative: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    /// `[b, n_mels]`, before the postnet.
    pub mel: Var,
    /// `[b, 1]`
    pub stop_logit: Var,
}

/// Teacher-forced outputs.
#[derive(Debug, Clone)]
pub struct TacoOutput {
    /// `[b, t, n_mels]`
    pub mel_pre: Var,
    pub mel_post: Var,
    /// `[b, t]`
    pub stop_logits: Var,
    /// One `[b, t_x]` weight matrix per decoder step.
    pub alignments: Vec<Var>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub mel_pre: f64,
    pub mel_post: f64,
    pub stop: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mel_pre: f64,
    pub mel_post: f64,
    pub stop: f64,
    /// Extra weight on the positive stop targets.
    pub stop_pos_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { mel_pre: 1.0, mel_post: 1.0, stop: 1.0, stop_pos_weight: 1.0 }
    }
}

/// Result of autoregressive inference for one utterance.
#[derive(Debug, Clone)]
pub struct Inference {
    /// Postnet-refined `[frames, n_mels]`.
    pub mel: Tensor,
    pub mel_pre: Tensor,
    /// `[frames, t_x]`, one attention distribution per decoder step.
    pub alignment: Tensor,
    pub stop_probs: Vec<f64>,
    /// True when the step cap ended decoding instead of the stop token.
    pub max_steps_reached: bool,
}

impl Inference {
    /// The refined spectrogram, floored at the log-amplitude floor.
    pub fn spectrogram(&self, hop: usize, frame_length: usize, sample_rate: u32) -> MelSpectrogram {
        let floor = LOG_FLOOR.ln();
        let values = self.mel.data().iter().map(|v| v.max(floor)).collect();
        MelSpectrogram::new(values, self.mel.dim(1), hop, frame_length, sample_rate).expect("floored finite values")
    }
}

#[derive(Debug, Clone, Default)]
pub struct InferOptions {
    /// Overrides the configured step cap.
    pub max_steps: Option<usize>,
}

#[derive(Debug, Clone)]
struct ConvBlock {
    conv: Conv1d,
    bn: BatchNorm,
}

#[derive(Debug, Clone)]
pub struct Tacotron {
    pub config: TacoConfig,
    pub params: ParamSet,
    embedding: Embedding,
    encoder_convs: Vec<ConvBlock>,
    encoder_fwd: LstmCell,
    encoder_bwd: LstmCell,
    prenet: Vec<Linear>,
    attention_rnn: LstmCell,
    attention: Attention,
    decoder_rnn: LstmCell,
    mel_proj: Linear,
    stop_proj: Linear,
    postnet: Vec<ConvBlock>,
}

fn conv_block(params: &mut ParamSet, name: &str, c_in: usize, c_out: usize, k: usize, gain: f64, rng: &mut Rng) -> ConvBlock {
    ConvBlock {
        conv: Conv1d::new(params, &format!("{name}.conv"), c_in, c_out, k, 1, true, gain, rng),
        bn: BatchNorm::new(params, &format!("{name}.bn"), c_out),
    }
}

fn dropout_if(g: &Graph, x: Var, p: f64, rng: Option<&mut Rng>) -> crate::autodiff::Result<Var> {
    match rng {
        Some(r) if p > 0.0 => g.dropout(x, p, r),
        _ => Ok(x),
    }
}

impl Tacotron {
    pub fn new(config: TacoConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut r = rng::seeded(seed);
        let mut p = ParamSet::new();
        let embedding = Embedding::new(&mut p, "encoder.embedding", c.n_symbols, c.embedding_dim, &mut r);
        let mut encoder_convs = Vec::new();
        let mut c_in = c.embedding_dim;
        for i in 0..c.encoder_conv_layers {
            encoder_convs.push(conv_block(&mut p, &format!("encoder.conv{i}"), c_in, c.encoder_conv_channels, c.encoder_conv_width, nn::relu_gain(), &mut r));
            c_in = c.encoder_conv_channels;
        }
        let encoder_fwd = LstmCell::new(&mut p, "encoder.lstm_fwd", c_in, c.encoder_lstm_units, &mut r);
        let encoder_bwd = LstmCell::new(&mut p, "encoder.lstm_bwd", c_in, c.encoder_lstm_units, &mut r);
        let mut prenet = Vec::new();
        let mut d_in = c.n_mels;
        for i in 0..c.prenet_layers {
            prenet.push(Linear::new(&mut p, &format!("decoder.prenet{i}"), d_in, c.prenet_units, false, 1.0, &mut r));
            d_in = c.prenet_units;
        }
        let enc = c.encoder_dim();
        let attention_rnn = LstmCell::new(&mut p, "decoder.attention_rnn", d_in + enc, c.attention_lstm_units, &mut r);
        let location = c.location_features.then_some((c.location_filters, c.location_kernel));
        let attention = Attention::new(&mut p, "decoder.attention", c.attention_lstm_units, enc, c.attention_dim, location, &mut r);
        let decoder_rnn = LstmCell::new(&mut p, "decoder.decoder_rnn", c.attention_lstm_units + enc, c.decoder_lstm_units, &mut r);
        let mel_proj = Linear::new(&mut p, "decoder.mel_proj", c.decoder_lstm_units + enc, c.n_mels, true, 1.0, &mut r);
        let stop_proj = Linear::new(&mut p, "decoder.stop_proj", c.decoder_lstm_units + enc, 1, true, 1.0, &mut r);
        let mut postnet = Vec::new();
        for i in 0..c.postnet_layers {
            let c_in = if i == 0 { c.n_mels } else { c.postnet_channels };
            let last = i + 1 == c.postnet_layers;
            let c_out = if last { c.n_mels } else { c.postnet_channels };
            let gain = if last { 1.0 } else { nn::tanh_gain() };
            postnet.push(conv_block(&mut p, &format!("postnet.layer{i}"), c_in, c_out, c.postnet_width, gain, &mut r));
        }
        // The residual starts at zero: a unit-scale final norm adds unit
        // variance noise to every mel bin that the decoder then has to fight.
        let last_gamma = postnet.last().expect("postnet has layers").bn.gamma;
        p.set_value(last_gamma, Tensor::zeros(&[c.n_mels]));
        Ok(Self {
            config,
            params: p,
            embedding,
            encoder_convs,
            encoder_fwd,
            encoder_bwd,
            prenet,
            attention_rnn,
            attention,
            decoder_rnn,
            mel_proj,
            stop_proj,
            postnet,
        })
    }

    pub fn attention_module(&self) -> &Attention {
        &self.attention
    }

    /// Parameter names of the final postnet layer (convolution and norm).
    pub fn final_postnet_params(&self) -> Vec<crate::autodiff::ParamId> {
        let last = self.postnet.last().expect("postnet has layers");
        let mut ids = vec![last.conv.weight, last.bn.beta];
        ids.extend(last.conv.bias);
        ids
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if let Some(&id) = ids.iter().find(|&&id| id >= self.config.n_symbols) {
            return Err(TacoError::UnknownSymbolId { id, n_symbols: self.config.n_symbols });
        }
        Ok(())
    }

    /// Encoder outputs `[b, t_x, encoder_dim]`, zero at padded positions.
    pub fn encode(&self, g: &Graph, text: &TextBatch, ctx: &mut Ctx) -> Result<Var> {
        self.check_ids(&text.ids)?;
        let (b, t) = (text.batch(), text.max_len);
        let p = &self.params;
        let padded = text.lengths.iter().any(|&l| l < t);
        let mask_vals: Vec<f64> = text.mask().iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let mask_bt1 = g.constant(Tensor::new(&[b, t, 1], mask_vals.clone()));
        let mask_b1t = g.constant(Tensor::new(&[b, 1, t], mask_vals.clone()));

        let emb = self.embedding.forward(g, p, &text.ids, &[b, t])?;
        let mut x = g.transpose(emb, 1, 2)?;
        if padded {
            x = g.mul(x, mask_b1t)?;
        }
        for block in &self.encoder_convs {
            let y = block.conv.forward(g, p, x)?;
            let y = block.bn.forward(g, p, y, ctx)?;
            let y = g.relu(y)?;
            let train = ctx.train;
            let y = dropout_if(g, y, self.config.encoder_dropout, train.then_some(&mut *ctx.rng))?;
            x = if padded { g.mul(y, mask_b1t)? } else { y };
        }
        let x = g.transpose(x, 1, 2)?;
        let h = self.config.encoder_lstm_units;
        let zf = self.encoder_fwd.project_inputs(g, p, x)?;
        let zb = self.encoder_bwd.project_inputs(g, p, x)?;
        let step_inputs = |z: Var, i: usize| -> crate::autodiff::Result<Var> {
            let s = g.slice(z, 1, i, 1)?;
            g.reshape(s, &[b, 4 * h])
        };

        let mut fwd = Vec::with_capacity(t);
        let mut state = LstmState::zeros(g, b, h);
        for i in 0..t {
            state = self.encoder_fwd.step_projected(g, p, step_inputs(zf, i)?, state)?;
            fwd.push(g.reshape(state.h, &[b, 1, h])?);
        }
        let mut bwd = vec![None; t];
        let mut state = LstmState::zeros(g, b, h);
        for i in (0..t).rev() {
            let new = self.encoder_bwd.step_projected(g, p, step_inputs(zb, i)?, state)?;
            state = if padded && text.lengths.iter().any(|&l| i >= l) {
                // padded rows keep a zero state until their sequence starts
                let m: Vec<f64> = text.lengths.iter().flat_map(|&l| std::iter::repeat_n(if i < l { 1.0 } else { 0.0 }, h)).collect();
                let keep = g.constant(Tensor::new(&[b, h], m));
                LstmState { h: g.mul(new.h, keep)?, c: g.mul(new.c, keep)? }
            } else {
                new
            };
            bwd[i] = Some(g.reshape(state.h, &[b, 1, h])?);
        }
        let bwd: Vec<Var> = bwd.into_iter().map(|v| v.expect("every step ran")).collect();
        let f = if t == 1 { fwd[0] } else { g.concat(&fwd, 1)? };
        let r = if t == 1 { bwd[0] } else { g.concat(&bwd, 1)? };
        let out = g.concat(&[f, r], 2)?;
        Ok(if padded { g.mul(out, mask_bt1)? } else { out })
    }

    pub fn prepare_attention(&self, g: &Graph, encoded: Var, text: &TextBatch) -> Result<AttentionMemory> {
        Ok(self.attention.prepare(g, &self.params, encoded, text.mask())?)
    }

    /// Prenet over frames of any leading shape; dropout when `rng` is given.
    pub fn prenet(&self, g: &Graph, frames: Var, mut rng: Option<&mut Rng>) -> Result<Var> {
        let mut x = frames;
        for layer in &self.prenet {
            x = layer.forward(g, &self.params, x)?;
            x = g.relu(x)?;
            x = dropout_if(g, x, self.config.prenet_dropout, rng.as_deref_mut())?;
        }
        Ok(x)
    }

    pub fn initial_state(&self, g: &Graph, mem: &AttentionMemory) -> DecoderState {
        let b = mem.batch;
        let c = &self.config;
        DecoderState {
            attention_rnn: LstmState::zeros(g, b, c.attention_lstm_units),
            decoder_rnn: LstmState::zeros(g, b, c.decoder_lstm_units),
            context: g.constant(Tensor::zeros(&[b, c.encoder_dim()])),
            alpha: g.constant(Tensor::zeros(&[b, mem.t_x])),
            cumulative: g.constant(Tensor::zeros(&[b, mem.t_x])),
        }
    }

    /// One decoder step from the prenet output of the previous frame.
    pub fn decode_step_prenet(
        &self,
        g: &Graph,
        mem: &AttentionMemory,
        prenet_out: Var,
        state: DecoderState,
        ctx: &mut Ctx,
    ) -> Result<(StepOutput, DecoderState)> {
        let p = &self.params;
        let z = self.config.zoneout;
        let x = g.concat(&[prenet_out, state.context], 1)?;
        let att = self.attention_rnn.step_zoneout(g, p, x, state.attention_rnn, z, ctx)?;
        let e = self.attention.energies(g, p, mem, att.h, state.cumulative)?;
        let (alpha, context) = self.attention.attend(g, mem, e)?;
        let cumulative = g.add(state.cumulative, alpha)?;
        let x = g.concat(&[att.h, context], 1)?;
        let dec = self.decoder_rnn.step_zoneout(g, p, x, state.decoder_rnn, z, ctx)?;
        let out = g.concat(&[dec.h, context], 1)?;
        let mel = self.mel_proj.forward(g, p, out)?;
        let stop_logit = self.stop_proj.forward(g, p, out)?;
        Ok((StepOutput { mel, stop_logit }, DecoderState { attention_rnn: att, decoder_rnn: dec, context, alpha, cumulative }))
    }

    /// One decoder step from the previous frame `[b, n_mels]` (zeros at the
    /// first step).
    pub fn decode_step(
        &self,
        g: &Graph,
        mem: &AttentionMemory,
        prev_frame: Var,
        state: DecoderState,
        ctx: &mut Ctx,
        dropout: Option<&mut Rng>,
    ) -> Result<(StepOutput, DecoderState)> {
        let pre = self.prenet(g, prev_frame, dropout)?;
        self.decode_step_prenet(g, mem, pre, state, ctx)
    }

    /// Residual refinement of `[b, t, n_mels]`; `frame_mask` `[b, t]` zeroes
    /// padded frames between layers.
    pub fn postnet(&self, g: &Graph, mel_pre: Var, frame_mask: Option<&Tensor>, ctx: &mut Ctx) -> Result<Var> {
        let p = &self.params;
        let shape = g.shape(mel_pre);
        let mask = frame_mask.map(|m| g.constant(m.clone().reshaped(&[shape[0], 1, shape[1]])));
        let mut x = g.transpose(mel_pre, 1, 2)?;
        let n = self.postnet.len();
        for (i, block) in self.postnet.iter().enumerate() {
            let y = block.conv.forward(g, p, x)?;
            let mut y = block.bn.forward(g, p, y, ctx)?;
            if i + 1 < n {
                y = g.tanh(y)?;
            }
            let train = ctx.train;
            y = dropout_if(g, y, self.config.postnet_dropout, train.then_some(&mut *ctx.rng))?;
            x = match mask {
                Some(m) => g.mul(y, m)?,
                None => y,
            };
        }
        let residual = g.transpose(x, 1, 2)?;
        Ok(g.add(mel_pre, residual)?)
    }

    /// Teacher-forced pass: step `i` is fed target frame `i − 1`.
    pub fn forward(&self, g: &Graph, batch: &TacoBatch, ctx: &mut Ctx) -> Result<TacoOutput> {
        let (b, t, m) = (batch.text.batch(), batch.max_frames(), self.config.n_mels);
        let encoded = self.encode(g, &batch.text, ctx)?;
        let mem = self.prepare_attention(g, encoded, &batch.text)?;
        let mut inputs = Tensor::zeros(&[b, t, m]);
        for bi in 0..b {
            let base = bi * t * m;
            let src = batch.mels.data()[base..base + (t - 1) * m].to_vec();
            inputs.data_mut()[base + m..base + t * m].copy_from_slice(&src);
        }
        let inputs = g.constant(inputs);
        let train = ctx.train;
        let pre_all = self.prenet(g, inputs, train.then_some(&mut *ctx.rng))?;
        let p_dim = self.config.prenet_units;
        let mut state = self.initial_state(g, &mem);
        let mut mels = Vec::with_capacity(t);
        let mut stops = Vec::with_capacity(t);
        let mut alignments = Vec::with_capacity(t);
        for i in 0..t {
            let pi = g.slice(pre_all, 1, i, 1)?;
            let pi = g.reshape(pi, &[b, p_dim])?;
            let (out, next) = self.decode_step_prenet(g, &mem, pi, state, ctx)?;
            state = next;
            mels.push(g.reshape(out.mel, &[b, 1, m])?);
            stops.push(out.stop_logit);
            alignments.push(state.alpha);
        }
        let mel_pre = if t == 1 { mels[0] } else { g.concat(&mels, 1)? };
        let stop_logits = if t == 1 { stops[0] } else { g.concat(&stops, 1)? };
        let frame_mask = batch.frame_mask();
        let padded = batch.frame_lengths.iter().any(|&l| l < t);
        let mel_post = self.postnet(g, mel_pre, padded.then_some(&frame_mask), ctx)?;
        Ok(TacoOutput { mel_pre, mel_post, stop_logits, alignments })
    }

    /// Weighted sum of both spectrogram MSE terms and the stop BCE, all
    /// restricted to real (unpadded) frames.
    pub fn loss(&self, g: &Graph, out: &TacoOutput, batch: &TacoBatch, w: &LossWeights) -> Result<(Var, LossParts)> {
        let (b, t, m) = (batch.text.batch(), batch.max_frames(), self.config.n_mels);
        let frame_mask = batch.frame_mask();
        let mel_mask = Tensor::new(&[b, t, m], frame_mask.data().iter().flat_map(|&v| std::iter::repeat_n(v, m)).collect());
        let target = g.constant(batch.mels.clone());
        let pre = g.mse_loss(out.mel_pre, target, Some(&mel_mask))?;
        let post = g.mse_loss(out.mel_post, target, Some(&mel_mask))?;
        let stop = g.bce_with_logits_loss(out.stop_logits, &batch.stop_targets(), Some(&frame_mask), w.stop_pos_weight)?;
        let total = g.add(g.scale(pre, w.mel_pre)?, g.scale(post, w.mel_post)?)?;
        let total = g.add(total, g.scale(stop, w.stop)?)?;
        let parts = LossParts {
            mel_pre: g.value(pre).item(),
            mel_post: g.value(post).item(),
            stop: g.value(stop).item(),
            total: g.value(total).item(),
        };
        Ok((total, parts))
    }

    /// Autoregressive synthesis for one symbol sequence. Stops after the first
    /// frame whose stop probability exceeds the threshold, or at the cap.
    pub fn infer(&self, ids: &[usize], opts: &InferOptions) -> Result<Inference> {
        let text = TextBatch::new(&[ids])?;
        let c = &self.config;
        let g = Graph::inference();
        let mut scratch = rng::seeded(0);
        let mut ctx = Ctx::new(false, &mut scratch);
        let encoded = self.encode(&g, &text, &mut ctx)?;
        let mem = self.prepare_attention(&g, encoded, &text)?;
        let max_steps = opts.max_steps.unwrap_or_else(|| c.max_steps(ids.len()));
        let mut dropout_rng = rng::seeded(c.inference_dropout_seed);
        let mut state = self.initial_state(&g, &mem);
        let mut prev = g.constant(Tensor::zeros(&[1, c.n_mels]));
        let (mut frames, mut alignment, mut stop_probs) = (Vec::new(), Vec::new(), Vec::new());
        let mut stopped = false;
        while stop_probs.len() < max_steps {
            let drop = c.prenet_dropout_at_inference.then_some(&mut dropout_rng);
            let (out, next) = self.decode_step(&g, &mem, prev, state, &mut ctx, drop)?;
            state = next;
            frames.extend_from_slice(g.value(out.mel).data());
            alignment.extend_from_slice(g.value(state.alpha).data());
            let logit = g.value(out.stop_logit).item();
            let prob = 1.0 / (1.0 + (-logit).exp());
            stop_probs.push(prob);
            prev = out.mel;
            if prob > c.stop_threshold {
                stopped = true;
                break;
            }
        }
        let n = stop_probs.len();
        let mel_pre = Tensor::new(&[n, c.n_mels], frames);
        let pre_var = g.constant(mel_pre.clone().reshaped(&[1, n, c.n_mels]));
        let post = self.postnet(&g, pre_var, None, &mut ctx)?;
        let mel = g.value(post).as_ref().clone().reshaped(&[n, c.n_mels]);
        if !stopped {
            log::warn!("decoder hit the {max_steps}-step cap without a stop token");
        }
        Ok(Inference { mel, mel_pre, alignment: Tensor::new(&[n, ids.len()], alignment), stop_probs, max_steps_reached: !stopped })
    }
}
