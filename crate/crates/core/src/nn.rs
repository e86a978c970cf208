//! Parameterized layers shared by the spectrogram network and the vocoder.
//!
//! Layers own [`ParamId`]s into a model's [`ParamSet`] and build their forward
//! pass onto a caller-supplied [`Graph`].

use crate::autodiff::{Graph, ParamId, ParamSet, Result, Var};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-forward state: train/eval switch, randomness for masks, and pending
/// batch-norm running-statistic updates.
pub struct Ctx<'a> {
    pub train: bool,
    pub rng: &'a mut Rng,
    stat_updates: Vec<(ParamId, Vec<f64>)>,
}

impl<'a> Ctx<'a> {
    pub fn new(train: bool, rng: &'a mut Rng) -> Self {
        Self { train, rng, stat_updates: Vec::new() }
    }

    /// Blends recorded batch statistics into the running buffers.
    pub fn apply_stat_updates(&mut self, params: &mut ParamSet) {
        for (id, batch) in self.stat_updates.drain(..) {
            let running = params.value_mut(id);
            for (r, b) in running.data_mut().iter_mut().zip(&batch) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
}

fn xavier(rng: &mut Rng, shape: &[usize], fan_in: usize, fan_out: usize, gain: f64) -> Tensor {
    let bound = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng::uniform(rng, -bound, bound))
}

pub fn tanh_gain() -> f64 {
    5.0 / 3.0
}

pub fn relu_gain() -> f64 {
    2f64.sqrt()
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(params: &mut ParamSet, name: &str, in_dim: usize, out_dim: usize, bias: bool, gain: f64, rng: &mut Rng) -> Self {
        let weight = params.add(format!("{name}.weight"), xavier(rng, &[out_dim, in_dim], in_dim, out_dim, gain), true);
        let bias = bias.then(|| params.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), true));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, g: &Graph, params: &ParamSet, x: Var) -> Result<Var> {
        let w = g.param(params, self.weight);
        let b = self.bias.map(|b| g.param(params, b));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub dilation: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
        bias: bool,
        gain: f64,
        rng: &mut Rng,
    ) -> Self {
        let w = xavier(rng, &[c_out, c_in, kernel], c_in * kernel, c_out * kernel, gain);
        let weight = params.add(format!("{name}.weight"), w, true);
        let bias = bias.then(|| params.add(format!("{name}.bias"), Tensor::zeros(&[c_out]), true));
        Self { weight, bias, dilation }
    }

    pub fn forward(&self, g: &Graph, params: &ParamSet, x: Var) -> Result<Var> {
        let w = g.param(params, self.weight);
        let b = self.bias.map(|b| g.param(params, b));
        g.conv1d(x, w, b, self.dilation)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(params: &mut ParamSet, name: &str, channels: usize) -> Self {
        Self {
            gamma: params.add(format!("{name}.gamma"), Tensor::ones(&[channels]), true),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: params.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: params.add(format!("{name}.running_var"), Tensor::ones(&[channels]), false),
        }
    }

    pub fn forward(&self, g: &Graph, params: &ParamSet, x: Var, ctx: &mut Ctx) -> Result<Var> {
        let gamma = g.param(params, self.gamma);
        let beta = g.param(params, self.beta);
        if ctx.train {
            let (y, mean, var) = g.batch_norm_train(x, gamma, beta, BN_EPS)?;
            let shape = g.shape(x);
            let n: usize = shape[0] * shape.get(2).copied().unwrap_or(1);
            let unbiased = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
            ctx.stat_updates.push((self.running_mean, mean));
            ctx.stat_updates.push((self.running_var, var.iter().map(|v| v * unbiased).collect()));
            Ok(y)
        } else {
            let mean = params.value(self.running_mean).data().to_vec();
            let var = params.value(self.running_var).data().to_vec();
            g.batch_norm_eval(x, gamma, beta, &mean, &var, BN_EPS)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(params: &mut ParamSet, name: &str, vocab: usize, dim: usize, rng: &mut Rng) -> Self {
        let bound = 3f64.sqrt() * (2.0 / (vocab + dim) as f64).sqrt();
        let table = params.add(format!("{name}.weight"), Tensor::from_fn(&[vocab, dim], |_| rng::uniform(rng, -bound, bound)), true);
        Self { table, vocab, dim }
    }

    pub fn forward(&self, g: &Graph, params: &ParamSet, ids: &[usize], shape: &[usize]) -> Result<Var> {
        let table = g.param(params, self.table);
        g.embedding(ids, shape, table)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(g: &Graph, batch: usize, hidden: usize) -> Self {
        Self { h: g.constant(Tensor::zeros(&[batch, hidden])), c: g.constant(Tensor::zeros(&[batch, hidden])) }
    }
}

/// LSTM cell with gates in (input, forget, cell, output) order.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(params: &mut ParamSet, name: &str, input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let k = 1.0 / (hidden as f64).sqrt();
        let mut u = |shape: &[usize]| Tensor::from_fn(shape, |_| rng::uniform(rng, -k, k));
        let w_ih = u(&[4 * hidden, input]);
        let w_hh = u(&[4 * hidden, hidden]);
        let bias = u(&[4 * hidden]);
        Self {
            w_ih: params.add(format!("{name}.w_ih"), w_ih, true),
            w_hh: params.add(format!("{name}.w_hh"), w_hh, true),
            bias: params.add(format!("{name}.bias"), bias, true),
            input,
            hidden,
        }
    }

    pub fn step(&self, g: &Graph, params: &ParamSet, x: Var, state: LstmState) -> Result<LstmState> {
        let zx = self.project_inputs(g, params, x)?;
        self.step_projected(g, params, zx, state)
    }

    /// Input-to-gate pre-activations `x·W_ihᵀ + b` for any leading shape, so a
    /// whole sequence can be projected with one product.
    pub fn project_inputs(&self, g: &Graph, params: &ParamSet, x: Var) -> Result<Var> {
        let w_ih = g.param(params, self.w_ih);
        let b = g.param(params, self.bias);
        g.linear(x, w_ih, Some(b))
    }

    /// One step from already projected inputs `zx: [b, 4h]`.
    pub fn step_projected(&self, g: &Graph, params: &ParamSet, zx: Var, state: LstmState) -> Result<LstmState> {
        let w_hh = g.param(params, self.w_hh);
        let zh = g.linear(state.h, w_hh, None)?;
        let z = g.add(zx, zh)?;
        let hc = g.lstm_pointwise(z, state.c)?;
        let h = g.slice(hc, 1, 0, self.hidden)?;
        let c = g.slice(hc, 1, self.hidden, self.hidden)?;
        Ok(LstmState { h, c })
    }

    /// One step with zoneout applied to both hidden and cell state.
    pub fn step_zoneout(&self, g: &Graph, params: &ParamSet, x: Var, state: LstmState, rate: f64, ctx: &mut Ctx) -> Result<LstmState> {
        let new = self.step(g, params, x, state)?;
        Ok(LstmState {
            h: zoneout(g, state.h, new.h, rate, ctx)?,
            c: zoneout(g, state.c, new.c, rate, ctx)?,
        })
    }
}

/// Zoneout mixing of a previous and a freshly computed state.
///
/// Training: each unit keeps its previous value with probability `rate`.
/// Evaluation: the expectation `rate·prev + (1−rate)·new`.
pub fn zoneout(g: &Graph, prev: Var, new: Var, rate: f64, ctx: &mut Ctx) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(crate::autodiff::AutogradError::InvalidArgument { op: "zoneout", detail: format!("rate {rate}") });
    }
    if rate == 0.0 {
        return Ok(new);
    }
    let shape = g.shape(new);
    let (keep, take) = if ctx.train {
        let mask: Vec<f64> = (0..shape.iter().product()).map(|_| if rng::bernoulli(ctx.rng, rate) { 1.0 } else { 0.0 }).collect();
        let inv = mask.iter().map(|m| 1.0 - m).collect();
        (Tensor::new(&shape, mask), Tensor::new(&shape, inv))
    } else {
        (Tensor::full(&shape, rate), Tensor::full(&shape, 1.0 - rate))
    };
    let keep = g.constant(keep);
    let take = g.constant(take);
    let a = g.mul(prev, keep)?;
    let b = g.mul(new, take)?;
    g.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn cell_and_state(g: &Graph, params: &mut ParamSet) -> (LstmCell, Var, LstmState) {
        let mut r = seeded(11);
        let cell = LstmCell::new(params, "cell", 3, 4, &mut r);
        let x = g.constant(Tensor::from_fn(&[2, 3], |i| (i as f64 * 0.7).sin()));
        let state = LstmState {
            h: g.constant(Tensor::from_fn(&[2, 4], |i| (i as f64 * 0.3).cos() * 0.5)),
            c: g.constant(Tensor::from_fn(&[2, 4], |i| (i as f64 * 0.9).sin())),
        };
        (cell, x, state)
    }

    #[test]
    fn zoneout_rate_zero_is_plain_cell() {
        let g = Graph::inference();
        let mut params = ParamSet::new();
        let (cell, x, state) = cell_and_state(&g, &mut params);
        let mut r = seeded(0);
        let mut ctx = Ctx::new(false, &mut r);
        let plain = cell.step(&g, &params, x, state).unwrap();
        let zo = cell.step_zoneout(&g, &params, x, state, 0.0, &mut ctx).unwrap();
        assert_eq!(g.value(plain.h), g.value(zo.h));
        assert_eq!(g.value(plain.c), g.value(zo.c));
    }

    #[test]
    fn zoneout_rate_near_one_keeps_previous_state() {
        let g = Graph::inference();
        let mut params = ParamSet::new();
        let (cell, x, state) = cell_and_state(&g, &mut params);
        let mut r = seeded(0);
        let mut ctx = Ctx::new(false, &mut r);
        let eps = 1e-6;
        let new = cell.step(&g, &params, x, state).unwrap();
        let zo = cell.step_zoneout(&g, &params, x, state, 1.0 - eps, &mut ctx).unwrap();
        for (var_prev, var_new, var_zo) in [(state.h, new.h, zo.h), (state.c, new.c, zo.c)] {
            let (p, n, z) = (g.value(var_prev), g.value(var_new), g.value(var_zo));
            for i in 0..p.len() {
                let diff = (n.data()[i] - p.data()[i]).abs();
                assert!((z.data()[i] - p.data()[i]).abs() <= eps * diff + 1e-15);
            }
        }
    }

    #[test]
    fn zoneout_training_masks_are_seeded() {
        let run = |seed| {
            let g = Graph::inference();
            let mut params = ParamSet::new();
            let (cell, x, mut state) = cell_and_state(&g, &mut params);
            let mut r = seeded(seed);
            let mut ctx = Ctx::new(true, &mut r);
            let mut out = Vec::new();
            for _ in 0..5 {
                state = cell.step_zoneout(&g, &params, x, state, 0.3, &mut ctx).unwrap();
                out.extend_from_slice(g.value(state.h).data());
            }
            out
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }
}
