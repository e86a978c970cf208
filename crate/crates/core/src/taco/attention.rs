//! Additive attention with optional location features.
//!
//! `e_ij = wᵀ tanh(W s + V h_j + U f_ij + b)` where `f_ij` are convolution
//! features of the cumulative attention weights. With location features off
//! the `U f` term is absent.

use crate::autodiff::{Graph, ParamId, ParamSet, Result, Var};
use crate::nn::Linear;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct LocationLayer {
    /// `[filters, 1, kernel]`
    pub conv: ParamId,
    /// `U: [attention_dim, filters]`
    pub proj: Linear,
}

#[derive(Debug, Clone)]
pub struct Attention {
    /// `W: [attention_dim, query_dim]`
    pub query: Linear,
    /// `V: [attention_dim, memory_dim]`
    pub memory: Linear,
    /// `b: [attention_dim]`
    pub bias: ParamId,
    /// `w: [1, attention_dim]`
    pub energy: Linear,
    pub location: Option<LocationLayer>,
    pub dim: usize,
}

/// Encoder outputs prepared for repeated attention steps.
#[derive(Debug, Clone)]
pub struct AttentionMemory {
    /// `[b, t_x, d]`
    pub values: Var,
    /// `V h`, `[b, t_x, attention_dim]`
    pub keys: Var,
    /// Row-major `[b, t_x]`; false marks padding.
    pub mask: Vec<bool>,
    pub batch: usize,
    pub t_x: usize,
}

impl Attention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        query_dim: usize,
        memory_dim: usize,
        dim: usize,
        location: Option<(usize, usize)>,
        rng: &mut Rng,
    ) -> Self {
        let query = Linear::new(params, &format!("{name}.query"), query_dim, dim, false, 1.0, rng);
        let memory = Linear::new(params, &format!("{name}.memory"), memory_dim, dim, false, 1.0, rng);
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[dim]), true);
        let energy = Linear::new(params, &format!("{name}.energy"), dim, 1, false, 1.0, rng);
        let location = location.map(|(filters, kernel)| {
            let bound = (6.0 / (kernel + filters * kernel) as f64).sqrt();
            let w = Tensor::from_fn(&[filters, 1, kernel], |_| rng::uniform(rng, -bound, bound));
            LocationLayer {
                conv: params.add(format!("{name}.location_conv.weight"), w, true),
                proj: Linear::new(params, &format!("{name}.location_proj"), filters, dim, false, 1.0, rng),
            }
        });
        Self { query, memory, bias, energy, location, dim }
    }

    /// Projects encoder outputs `h: [b, t_x, d]` once per utterance batch.
    pub fn prepare(&self, g: &Graph, params: &ParamSet, h: Var, mask: Vec<bool>) -> Result<AttentionMemory> {
        let shape = g.shape(h);
        let keys = self.memory.forward(g, params, h)?;
        Ok(AttentionMemory { values: h, keys, mask, batch: shape[0], t_x: shape[1] })
    }

    /// Raw energies `[b, t_x]` for query `s: [b, q]` and cumulative weights
    /// `[b, t_x]`. Padding is handled by [`Attention::attend`].
    pub fn energies(&self, g: &Graph, params: &ParamSet, mem: &AttentionMemory, s: Var, cumulative: Var) -> Result<Var> {
        let (b, t, a) = (mem.batch, mem.t_x, self.dim);
        let q = self.query.forward(g, params, s)?;
        let q = g.reshape(q, &[b, 1, a])?;
        let mut pre = g.add(mem.keys, q)?;
        if let Some(loc) = &self.location {
            let w = g.param(params, loc.conv);
            let cum = g.reshape(cumulative, &[b, 1, t])?;
            let f = g.conv1d(cum, w, None, 1)?;
            let f = g.transpose(f, 1, 2)?;
            let uf = loc.proj.forward(g, params, f)?;
            pre = g.add(pre, uf)?;
        }
        let bias = g.param(params, self.bias);
        let pre = g.add(pre, bias)?;
        let act = g.tanh(pre)?;
        let e = self.energy.forward(g, params, act)?;
        g.reshape(e, &[b, t])
    }

    /// Masked softmax of the energies and the context `Σ_j α_j h_j`.
    /// Returns `(α: [b, t_x], c: [b, d])`.
    pub fn attend(&self, g: &Graph, mem: &AttentionMemory, energies: Var) -> Result<(Var, Var)> {
        attend(g, mem, energies)
    }
}

pub fn attend(g: &Graph, mem: &AttentionMemory, energies: Var) -> Result<(Var, Var)> {
    let (b, t) = (mem.batch, mem.t_x);
    let mask = if mem.mask.iter().all(|&m| m) { None } else { Some(mem.mask.as_slice()) };
    let alpha = g.softmax(energies, 1, mask)?;
    let a3 = g.reshape(alpha, &[b, 1, t])?;
    let c = g.matmul(a3, mem.values)?;
    let d = g.shape(mem.values)[2];
    let c = g.reshape(c, &[b, d])?;
    Ok((alpha, c))
}
