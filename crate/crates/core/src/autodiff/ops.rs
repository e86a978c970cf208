//! Primitive operations and their backward rules.

use std::rc::Rc;

use super::{AutogradError, Graph, Result, Var};
use crate::rng::{self, Rng};
use crate::tensor::{col2im, conv1d_single, conv_transpose1d_single, gemm, im2col, strides, Tensor};

fn mismatch(op: &'static str, detail: impl Into<String>) -> AutogradError {
    AutogradError::ShapeMismatch { op, detail: detail.into() }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each linear index of `out_shape`, the linear index of the broadcast
/// input with shape `in_shape`.
fn broadcast_map(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let n = out_shape.len();
    let in_strides = strides(in_shape);
    let mut eff = vec![0; n];
    for i in 0..in_shape.len() {
        let o = i + n - in_shape.len();
        eff[o] = if in_shape[i] == 1 { 0 } else { in_strides[i] };
    }
    let total: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut lin = 0usize;
    for _ in 0..total {
        map.push(lin);
        for d in (0..n).rev() {
            idx[d] += 1;
            lin += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            lin -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

/// Sums a gradient of `out_shape` down to a broadcast input's shape.
fn reduce_to(grad: &Tensor, in_shape: &[usize]) -> Tensor {
    if grad.shape() == in_shape {
        return grad.clone();
    }
    let map = broadcast_map(grad.shape(), in_shape);
    let mut out = Tensor::zeros(in_shape);
    let data = out.data_mut();
    for (g, &j) in grad.data().iter().zip(&map) {
        data[j] += g;
    }
    out
}

/// Elementwise binary op with broadcasting. Returns the output and the index
/// maps (None when shapes already match the output).
fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::new(a.shape(), data));
    }
    let shape = broadcast_shape(a.shape(), b.shape())
        .ok_or_else(|| mismatch(op, format!("{:?} vs {:?}", a.shape(), b.shape())))?;
    let ma = broadcast_map(&shape, a.shape());
    let mb = broadcast_map(&shape, b.shape());
    let data = ma.iter().zip(&mb).map(|(&i, &j)| f(a.data()[i], b.data()[j])).collect();
    Ok(Tensor::new(&shape, data))
}

/// Expands `small` (broadcastable) to `shape`.
fn expand(small: &Tensor, shape: &[usize]) -> Tensor {
    if small.shape() == shape {
        return small.clone();
    }
    let map = broadcast_map(shape, small.shape());
    Tensor::new(shape, map.iter().map(|&j| small.data()[j]).collect())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    fn unary(
        &self,
        op: &'static str,
        x: Var,
        f: impl Fn(f64) -> f64,
        // derivative from (input, output)
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var> {
        let xv = self.value(x);
        let out = xv.map(f);
        let outv = Rc::new(out.clone());
        let rule = Box::new(move |g: &Tensor, _: &[bool]| {
            let data =
                g.data().iter().zip(xv.data()).zip(outv.data()).map(|((&g, &x), &y)| g * df(x, y)).collect();
            vec![Some(Tensor::new(g.shape(), data))]
        });
        self.push_op(op, out, &[x], rule)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = broadcast_binary("add", &av, &bv, |x, y| x + y)?;
        let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
        let rule = Box::new(move |g: &Tensor, need: &[bool]| {
            vec![need[0].then(|| reduce_to(g, &sa)), need[1].then(|| reduce_to(g, &sb))]
        });
        self.push_op("add", out, &[a, b], rule)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = broadcast_binary("sub", &av, &bv, |x, y| x - y)?;
        let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
        let rule = Box::new(move |g: &Tensor, need: &[bool]| {
            vec![
                need[0].then(|| reduce_to(g, &sa)),
                need[1].then(|| reduce_to(&g.map(|v| -v), &sb)),
            ]
        });
        self.push_op("sub", out, &[a, b], rule)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = broadcast_binary("mul", &av, &bv, |x, y| x * y)?;
        let shape = out.shape().to_vec();
        let rule = Box::new(move |g: &Tensor, need: &[bool]| {
            let ga = need[0].then(|| {
                let be = expand(&bv, &shape);
                let t = Tensor::new(&shape, g.data().iter().zip(be.data()).map(|(x, y)| x * y).collect());
                reduce_to(&t, av.shape())
            });
            let gb = need[1].then(|| {
                let ae = expand(&av, &shape);
                let t = Tensor::new(&shape, g.data().iter().zip(ae.data()).map(|(x, y)| x * y).collect());
                reduce_to(&t, bv.shape())
            });
            vec![ga, gb]
        });
        self.push_op("mul", out, &[a, b], rule)
    }

    pub fn scale(&self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", x, move |v| c * v, move |_, _| c)
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", x, move |v| v + c, |_, _| 1.0)
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn tanh(&self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, |_, y| y)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", x, move |v| v.clamp(lo, hi), move |x, _| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 })
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor::scalar(xv.sum());
        let shape = xv.shape().to_vec();
        let rule = Box::new(move |g: &Tensor, _: &[bool]| vec![Some(Tensor::full(&shape, g.item()))]);
        self.push_op("sum", out, &[x], rule)
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if axis >= shape.len() {
            return Err(mismatch("mean_axis", format!("axis {axis} for rank {}", shape.len())));
        }
        let (outer, n, inner) = lanes(&shape, axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += xv.data()[(o * n + k) * inner + i] / n as f64;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rule = Box::new(move |g: &Tensor, _: &[bool]| {
            let mut dx = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for k in 0..n {
                    for i in 0..inner {
                        dx[(o * n + k) * inner + i] = g.data()[o * inner + i] / n as f64;
                    }
                }
            }
            vec![Some(Tensor::new(&shape, dx))]
        });
        self.push_op("mean_axis", Tensor::new(&out_shape, out), &[x], rule)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != xv.len() {
            return Err(mismatch("reshape", format!("{:?} -> {shape:?}", xv.shape())));
        }
        let orig = xv.shape().to_vec();
        let out = Tensor::new(shape, xv.data().to_vec());
        let rule = Box::new(move |g: &Tensor, _: &[bool]| vec![Some(g.clone().reshaped(&orig))]);
        self.push_op("reshape", out, &[x], rule)
    }

    /// Swaps two axes.
    pub fn transpose(&self, x: Var, a0: usize, a1: usize) -> Result<Var> {
        let xv = self.value(x);
        let rank = xv.rank();
        if a0 >= rank || a1 >= rank {
            return Err(mismatch("transpose", format!("axes ({a0},{a1}) for rank {rank}")));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a0, a1);
        let out = permute(&xv, &perm);
        let rule = Box::new(move |g: &Tensor, _: &[bool]| vec![Some(permute(g, &perm))]);
        self.push_op("transpose", out, &[x], rule)
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(AutogradError::InvalidArgument { op: "concat", detail: "no inputs".into() });
        }
        let vals: Vec<Rc<Tensor>> = xs.iter().map(|&x| self.value(x)).collect();
        let first = vals[0].shape().to_vec();
        if axis >= first.len() {
            return Err(mismatch("concat", format!("axis {axis} for rank {}", first.len())));
        }
        for v in &vals[1..] {
            let s = v.shape();
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(mismatch("concat", format!("{first:?} vs {s:?} on axis {axis}")));
            }
        }
        let sizes: Vec<usize> = vals.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = lanes(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &n) in vals.iter().zip(&sizes) {
                data.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let rule = Box::new(move |g: &Tensor, need: &[bool]| {
            let mut offset = 0;
            sizes
                .iter()
                .zip(need)
                .map(|(&n, &need)| {
                    let start = offset;
                    offset += n;
                    need.then(|| slice_tensor(g, axis, start, n))
                })
                .collect()
        });
        self.push_op("concat", Tensor::new(&shape, data), xs, rule)
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(mismatch("slice", format!("[{start}..{}] on axis {axis} of {shape:?}", start + len)));
        }
        let out = slice_tensor(&xv, axis, start, len);
        let rule = Box::new(move |g: &Tensor, _: &[bool]| {
            let (outer, n, inner) = lanes(&shape, axis);
            let mut dx = vec![0.0; outer * n * inner];
            for o in 0..outer {
                let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                dx[(o * n + start) * inner..(o * n + start + len) * inner].copy_from_slice(src);
            }
            vec![Some(Tensor::new(&shape, dx))]
        });
        self.push_op("slice", out, &[x], rule)
    }

    /// Matrix product. Supports `[m,k]·[k,n]`, batched `[b,m,k]·[b,k,n]`, and
    /// `[b,m,k]·[k,n]` with the right operand shared across the batch.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
        let (batch, m, k, n, shared) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n, true),
            ([bs, m, k], [b2, k2, n]) if bs == b2 && k == k2 => (*bs, *m, *k, *n, false),
            ([bs, m, k], [k2, n]) if k == k2 => (1, bs * m, *k, *n, true),
            _ => return Err(mismatch("matmul", format!("{sa:?} x {sb:?}"))),
        };
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let bo = if shared { 0 } else { bi * k * n };
            gemm(false, false, m, n, k, 1.0, &av.data()[bi * m * k..], &bv.data()[bo..], 0.0, &mut out[bi * m * n..]);
        }
        let out_shape = match sa.len() {
            2 => vec![m, n],
            _ if shared => vec![sa[0], sa[1], n],
            _ => vec![batch, m, n],
        };
        let rule = Box::new(move |g: &Tensor, need: &[bool]| {
            let gd = g.data();
            let ga = need[0].then(|| {
                let mut da = vec![0.0; av.len()];
                for bi in 0..batch {
                    let bo = if shared { 0 } else { bi * k * n };
                    gemm(false, true, m, k, n, 1.0, &gd[bi * m * n..], &bv.data()[bo..], 0.0, &mut da[bi * m * k..]);
                }
                Tensor::new(av.shape(), da)
            });
            let gb = need[1].then(|| {
                let mut db = vec![0.0; bv.len()];
                for bi in 0..batch {
                    let (bo, beta) = if shared { (0, if bi == 0 { 0.0 } else { 1.0 }) } else { (bi * k * n, 0.0) };
                    gemm(true, false, k, n, m, 1.0, &av.data()[bi * m * k..], &gd[bi * m * n..], beta, &mut db[bo..]);
                }
                Tensor::new(bv.shape(), db)
            });
            vec![ga, gb]
        });
        self.push_op("matmul", Tensor::new(&out_shape, out), &[a, b], rule)
    }

    /// Affine map over the last axis: `x·wᵀ + b` with `w: [out, in]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let bv = b.map(|b| self.value(b));
        let xs = xv.shape().to_vec();
        let (out_dim, in_dim) = match wv.shape() {
            [o, i] => (*o, *i),
            s => return Err(mismatch("linear", format!("weight shape {s:?}"))),
        };
        if xs.last() != Some(&in_dim) {
            return Err(mismatch("linear", format!("input {xs:?} vs weight [{out_dim}, {in_dim}]")));
        }
        if let Some(bv) = &bv {
            if bv.shape() != [out_dim] {
                return Err(mismatch("linear", format!("bias {:?} for {out_dim} outputs", bv.shape())));
            }
        }
        let rows = xv.len() / in_dim;
        let mut out = vec![0.0; rows * out_dim];
        if let Some(bv) = &bv {
            for r in out.chunks_mut(out_dim) {
                r.copy_from_slice(bv.data());
            }
        }
        gemm(false, true, rows, out_dim, in_dim, 1.0, xv.data(), wv.data(), 1.0, &mut out);
        let mut out_shape = xs.clone();
        *out_shape.last_mut().expect("rank >= 1") = out_dim;
        let mut parents = vec![x, w];
        parents.extend(b);
        let rule = Box::new(move |g: &Tensor, need: &[bool]| {
            let gd = g.data();
            let dx = need[0].then(|| {
                let mut dx = vec![0.0; rows * in_dim];
                gemm(false, false, rows, in_dim, out_dim, 1.0, gd, wv.data(), 0.0, &mut dx);
                Tensor::new(&xs, dx)
            });
            let dw = need[1].then(|| {
                let mut dw = vec![0.0; out_dim * in_dim];
                gemm(true, false, out_dim, in_dim, rows, 1.0, gd, xv.data(), 0.0, &mut dw);
                Tensor::new(&[out_dim, in_dim], dw)
            });
            let mut res = vec![dx, dw];
            if need.len() == 3 {
                res.push(need[2].then(|| {
                    let mut db = vec![0.0; out_dim];
                    for r in gd.chunks(out_dim) {
                        for (d, v) in db.iter_mut().zip(r) {
                            *d += v;
                        }
                    }
                    Tensor::new(&[out_dim], db)
                }));
            }
            res
        });
        self.push_op("linear", Tensor::new(&out_shape, out), &parents, rule)
    }

    /// Stride-1, same-padded 1-D convolution of `x: [b, c_in, t]` with
    /// `w: [c_out, c_in, k]` (odd `k`) and optional bias `[c_out]`.
    pub fn conv1d(&self, x: Var, w: Var, bias: Option<Var>, dilation: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let bv = bias.map(|b| self.value(b));
        let (batch, c_in, t) = match xv.shape() {
            [b, c, t] => (*b, *c, *t),
            s => return Err(mismatch("conv1d", format!("input {s:?} is not [b, c, t]"))),
        };
        let (c_out, k) = match wv.shape() {
            [o, i, k] if *i == c_in && k % 2 == 1 => (*o, *k),
            s => return Err(mismatch("conv1d", format!("weight {s:?} for {c_in} input channels"))),
        };
        if let Some(bv) = &bv {
            if bv.shape() != [c_out] {
                return Err(mismatch("conv1d", format!("bias {:?}", bv.shape())));
            }
        }
        let dilation = dilation.max(1);
        let mut out = Vec::with_capacity(batch * c_out * t);
        for bi in 0..batch {
            let xb = &xv.data()[bi * c_in * t..(bi + 1) * c_in * t];
            out.extend(conv1d_single(xb, c_in, t, wv.data(), bv.as_ref().map(|b| b.data()), c_out, k, dilation));
        }
        let mut parents = vec![x, w];
        parents.extend(bias);
        let rule = Box::new(move |g: &Tensor, need: &[bool]| {
            let gd = g.data();
            let mut dx = need[0].then(|| vec![0.0; batch * c_in * t]);
            let mut dw = need[1].then(|| vec![0.0; c_out * c_in * k]);
            let mut col = vec![0.0; c_in * k * t];
            let mut dcol = vec![0.0; c_in * k * t];
            for bi in 0..batch {
                let gb = &gd[bi * c_out * t..(bi + 1) * c_out * t];
                if let Some(dw) = dw.as_mut() {
                    im2col(&xv.data()[bi * c_in * t..], c_in, t, k, dilation, &mut col);
                    gemm(false, true, c_out, c_in * k, t, 1.0, gb, &col, 1.0, dw);
                }
                if let Some(dx) = dx.as_mut() {
                    gemm(true, false, c_in * k, t, c_out, 1.0, wv.data(), gb, 0.0, &mut dcol);
                    col2im(&dcol, c_in, t, k, dilation, &mut dx[bi * c_in * t..(bi + 1) * c_in * t]);
                }
            }
            let mut res = vec![
                dx.map(|d| Tensor::new(&[batch, c_in, t], d)),
                dw.map(|d| Tensor::new(&[c_out, c_in, k], d)),
            ];
            if need.len() == 3 {
                res.push(need[2].then(|| channel_sums(gd, batch, c_out, t)));
            }
            res
        });
        self.push_op("conv1d", Tensor::new(&[batch, c_out, t], out), &parents, rule)
    }

    /// Transposed convolution of `x: [b, c_in, f]` with `w: [c_in, c_out, k]`
    /// and the given stride; output length `(f−1)·stride + k`.
    pub fn conv_transpose1d(&self, x: Var, w: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let bv = bias.map(|b| self.value(b));
        let (batch, c_in, frames) = match xv.shape() {
            [b, c, f] if *f > 0 => (*b, *c, *f),
            s => return Err(mismatch("conv_transpose1d", format!("input {s:?} is not [b, c, f>0]"))),
        };
        let (c_out, k) = match wv.shape() {
            [i, o, k] if *i == c_in => (*o, *k),
            s => return Err(mismatch("conv_transpose1d", format!("weight {s:?} for {c_in} inputs"))),
        };
        if stride == 0 {
            return Err(AutogradError::InvalidArgument { op: "conv_transpose1d", detail: "stride 0".into() });
        }
        let len = (frames - 1) * stride + k;
        let mut out = Vec::with_capacity(batch * c_out * len);
        for bi in 0..batch {
            let xb = &xv.data()[bi * c_in * frames..(bi + 1) * c_in * frames];
            out.extend(conv_transpose1d_single(xb, c_in, frames, wv.data(), bv.as_ref().map(|b| b.data()), c_out, k, stride));
        }
        let mut parents = vec![x, w];
        parents.extend(bias);
        let rule = Box::new(move |g: &Tensor, need: &[bool]| {
            let gd = g.data();
            let mut dx = need[0].then(|| vec![0.0; batch * c_in * frames]);
            let mut dw = need[1].then(|| vec![0.0; c_in * c_out * k]);
            let mut dcols = vec![0.0; c_out * k * frames];
            for bi in 0..batch {
                let gb = &gd[bi * c_out * len..(bi + 1) * c_out * len];
                for co in 0..c_out {
                    for kk in 0..k {
                        for f in 0..frames {
                            dcols[(co * k + kk) * frames + f] = gb[co * len + f * stride + kk];
                        }
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    gemm(false, false, c_in, frames, c_out * k, 1.0, wv.data(), &dcols, 0.0, &mut dx[bi * c_in * frames..]);
                }
                if let Some(dw) = dw.as_mut() {
                    gemm(false, true, c_in, c_out * k, frames, 1.0, &xv.data()[bi * c_in * frames..], &dcols, 1.0, dw);
                }
            }
            let mut res = vec![
                dx.map(|d| Tensor::new(&[batch, c_in, frames], d)),
                dw.map(|d| Tensor::new(&[c_in, c_out, k], d)),
            ];
            if need.len() == 3 {
                res.push(need[2].then(|| channel_sums(gd, batch, c_out, len)));
            }
            res
        });
        self.push_op("conv_transpose1d", Tensor::new(&[batch, c_out, len], out), &parents, rule)
    }

    /// Rows of `table: [v, d]` gathered by `ids`; output shape `shape ++ [d]`.
    pub fn embedding(&self, ids: &[usize], shape: &[usize], table: Var) -> Result<Var> {
        let tv = self.value(table);
        let (vocab, dim) = match tv.shape() {
            [v, d] => (*v, *d),
            s => return Err(mismatch("embedding", format!("table {s:?}"))),
        };
        if shape.iter().product::<usize>() != ids.len() {
            return Err(mismatch("embedding", format!("{} ids for shape {shape:?}", ids.len())));
        }
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(AutogradError::IndexOutOfRange { op: "embedding", index: id, bound: vocab });
            }
            data.extend_from_slice(&tv.data()[id * dim..(id + 1) * dim]);
        }
        let mut out_shape = shape.to_vec();
        out_shape.push(dim);
        let ids = ids.to_vec();
        let rule = Box::new(move |g: &Tensor, _: &[bool]| {
            let mut dt = vec![0.0; vocab * dim];
            for (r, &id) in ids.iter().enumerate() {
                for j in 0..dim {
                    dt[id * dim + j] += g.data()[r * dim + j];
                }
            }
            vec![Some(Tensor::new(&[vocab, dim], dt))]
        });
        self.push_op("embedding", Tensor::new(&out_shape, data), &[table], rule)
    }

    /// Training-mode batch normalization over `x: [b, c]` or `[b, c, t]`,
    /// normalizing each channel with the batch statistics. Returns the output
    /// plus the per-channel batch mean and biased variance.
    pub fn batch_norm_train(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let xv = self.value(x);
        let (batch, c, t) = bn_dims(xv.shape())?;
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(mismatch("batch_norm", format!("affine {:?}/{:?} for {c} channels", gv.shape(), bv.shape())));
        }
        let n = (batch * t) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for bi in 0..batch {
            for ch in 0..c {
                for v in &xv.data()[(bi * c + ch) * t..(bi * c + ch + 1) * t] {
                    mean[ch] += v / n;
                }
            }
        }
        for bi in 0..batch {
            for ch in 0..c {
                for v in &xv.data()[(bi * c + ch) * t..(bi * c + ch + 1) * t] {
                    var[ch] += (v - mean[ch]).powi(2) / n;
                }
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for bi in 0..batch {
            for ch in 0..c {
                for i in (bi * c + ch) * t..(bi * c + ch + 1) * t {
                    xhat[i] = (xv.data()[i] - mean[ch]) * inv_std[ch];
                    out[i] = gv.data()[ch] * xhat[i] + bv.data()[ch];
                }
            }
        }
        let shape = xv.shape().to_vec();
        let inv = inv_std.clone();
        let rule = Box::new(move |g: &Tensor, need: &[bool]| {
            let gd = g.data();
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for bi in 0..batch {
                for ch in 0..c {
                    for i in (bi * c + ch) * t..(bi * c + ch + 1) * t {
                        sum_g[ch] += gd[i];
                        sum_gx[ch] += gd[i] * xhat[i];
                    }
                }
            }
            let dx = need[0].then(|| {
                let mut dx = vec![0.0; gd.len()];
                for bi in 0..batch {
                    for ch in 0..c {
                        let gam = gv.data()[ch];
                        for i in (bi * c + ch) * t..(bi * c + ch + 1) * t {
                            dx[i] = gam * inv[ch] / n * (n * gd[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
                        }
                    }
                }
                Tensor::new(&shape, dx)
            });
            vec![dx, need[1].then(|| Tensor::new(&[c], sum_gx.clone())), need[2].then(|| Tensor::new(&[c], sum_g.clone()))]
        });
        let v = self.push_op("batch_norm", Tensor::new(xv.shape(), out), &[x, gamma, beta], rule)?;
        Ok((v, mean, var))
    }

    /// Evaluation-mode batch normalization with fixed running statistics.
    pub fn batch_norm_eval(&self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (batch, c, t) = bn_dims(xv.shape())?;
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.shape() != [c] || bv.shape() != [c] || mean.len() != c || var.len() != c {
            return Err(mismatch("batch_norm_eval", format!("statistics for {c} channels")));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for bi in 0..batch {
            for ch in 0..c {
                for i in (bi * c + ch) * t..(bi * c + ch + 1) * t {
                    xhat[i] = (xv.data()[i] - mean[ch]) * inv_std[ch];
                    out[i] = gv.data()[ch] * xhat[i] + bv.data()[ch];
                }
            }
        }
        let shape = xv.shape().to_vec();
        let rule = Box::new(move |g: &Tensor, need: &[bool]| {
            let gd = g.data();
            let mut dx = vec![0.0; gd.len()];
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for bi in 0..batch {
                for ch in 0..c {
                    for i in (bi * c + ch) * t..(bi * c + ch + 1) * t {
                        dx[i] = gd[i] * gv.data()[ch] * inv_std[ch];
                        dgamma[ch] += gd[i] * xhat[i];
                        dbeta[ch] += gd[i];
                    }
                }
            }
            vec![
                need[0].then(|| Tensor::new(&shape, dx)),
                need[1].then(|| Tensor::new(&[c], dgamma)),
                need[2].then(|| Tensor::new(&[c], dbeta)),
            ]
        });
        self.push_op("batch_norm_eval", Tensor::new(xv.shape(), out), &[x, gamma, beta], rule)
    }

    /// Softmax along `axis`. Entries with `mask[i] == false` get probability
    /// zero and are excluded from the normalization.
    pub fn softmax(&self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if axis >= shape.len() {
            return Err(mismatch("softmax", format!("axis {axis} for rank {}", shape.len())));
        }
        if let Some(m) = mask {
            if m.len() != xv.len() {
                return Err(mismatch("softmax", format!("mask of {} for {} entries", m.len(), xv.len())));
            }
        }
        let keep = |i: usize| mask.map_or(true, |m| m[i]);
        let (outer, n, inner) = lanes(&shape, axis);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let max = (0..n).filter(|&k| keep(idx(k))).map(|k| xv.data()[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut z = 0.0;
                for k in 0..n {
                    if keep(idx(k)) {
                        let e = (xv.data()[idx(k)] - max).exp();
                        out[idx(k)] = e;
                        z += e;
                    }
                }
                for k in 0..n {
                    out[idx(k)] /= z;
                }
            }
        }
        let y = Rc::new(Tensor::new(&shape, out.clone()));
        let rule = Box::new(move |g: &Tensor, _: &[bool]| {
            let mut dx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * n + k) * inner + i;
                    let dot: f64 = (0..n).map(|k| g.data()[idx(k)] * y.data()[idx(k)]).sum();
                    for k in 0..n {
                        dx[idx(k)] = y.data()[idx(k)] * (g.data()[idx(k)] - dot);
                    }
                }
            }
            vec![Some(Tensor::new(y.shape(), dx))]
        });
        self.push_op("softmax", Tensor::new(&shape, out), &[x], rule)
    }

    /// Inverted dropout: zeroes each entry with probability `p` and scales
    /// survivors by `1/(1−p)`. Identity when `p == 0`.
    pub fn dropout(&self, x: Var, p: f64, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(AutogradError::InvalidArgument { op: "dropout", detail: format!("p = {p}") });
        }
        if p == 0.0 {
            return Ok(x);
        }
        let xv = self.value(x);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..xv.len()).map(|_| if rng::bernoulli(rng, p) { 0.0 } else { keep }).collect();
        let out = Tensor::new(xv.shape(), xv.data().iter().zip(&mask).map(|(x, m)| x * m).collect());
        let rule = Box::new(move |g: &Tensor, _: &[bool]| {
            vec![Some(Tensor::new(g.shape(), g.data().iter().zip(&mask).map(|(g, m)| g * m).collect()))]
        });
        self.push_op("dropout", out, &[x], rule)
    }

    /// LSTM cell nonlinearity. `gates: [b, 4h]` holds pre-activations in
    /// (input, forget, cell, output) order; `c: [b, h]` is the previous cell.
    /// Output `[b, 2h]` is the new hidden state followed by the new cell.
    pub fn lstm_pointwise(&self, gates: Var, c: Var) -> Result<Var> {
        let (zv, cv) = (self.value(gates), self.value(c));
        let (batch, h) = match cv.shape() {
            [b, h] => (*b, *h),
            s => return Err(mismatch("lstm_cell", format!("cell {s:?}"))),
        };
        if zv.shape() != [batch, 4 * h] {
            return Err(mismatch("lstm_cell", format!("gates {:?} for cell [{batch}, {h}]", zv.shape())));
        }
        // cache activations: i f g o tanh(c')
        let mut act = vec![0.0; batch * 5 * h];
        let mut out = vec![0.0; batch * 2 * h];
        for b in 0..batch {
            let z = &zv.data()[b * 4 * h..(b + 1) * 4 * h];
            for j in 0..h {
                let i = sigmoid(z[j]);
                let f = sigmoid(z[h + j]);
                let gg = z[2 * h + j].tanh();
                let o = sigmoid(z[3 * h + j]);
                let c_new = f * cv.data()[b * h + j] + i * gg;
                let tc = c_new.tanh();
                out[b * 2 * h + j] = o * tc;
                out[b * 2 * h + h + j] = c_new;
                let a = &mut act[b * 5 * h..(b + 1) * 5 * h];
                a[j] = i;
                a[h + j] = f;
                a[2 * h + j] = gg;
                a[3 * h + j] = o;
                a[4 * h + j] = tc;
            }
        }
        let rule = Box::new(move |g: &Tensor, need: &[bool]| {
            let mut dz = vec![0.0; batch * 4 * h];
            let mut dc = vec![0.0; batch * h];
            for b in 0..batch {
                let a = &act[b * 5 * h..(b + 1) * 5 * h];
                let gb = &g.data()[b * 2 * h..(b + 1) * 2 * h];
                for j in 0..h {
                    let (i, f, gg, o, tc) = (a[j], a[h + j], a[2 * h + j], a[3 * h + j], a[4 * h + j]);
                    let dh = gb[j];
                    let dcn = gb[h + j] + dh * o * (1.0 - tc * tc);
                    let z = &mut dz[b * 4 * h..(b + 1) * 4 * h];
                    z[j] = dcn * gg * i * (1.0 - i);
                    z[h + j] = dcn * cv.data()[b * h + j] * f * (1.0 - f);
                    z[2 * h + j] = dcn * i * (1.0 - gg * gg);
                    z[3 * h + j] = dh * tc * o * (1.0 - o);
                    dc[b * h + j] = dcn * f;
                }
            }
            vec![
                need[0].then(|| Tensor::new(&[batch, 4 * h], dz)),
                need[1].then(|| Tensor::new(&[batch, h], dc)),
            ]
        });
        self.push_op("lstm_cell", Tensor::new(&[batch, 2 * h], out), &[gates, c], rule)
    }

    /// Mean squared error over entries where `mask` is nonzero (all entries
    /// when `mask` is `None`). The mask weights each squared error.
    pub fn mse_loss(&self, pred: Var, target: Var, mask: Option<&Tensor>) -> Result<Var> {
        let (pv, tv) = (self.value(pred), self.value(target));
        if pv.shape() != tv.shape() || mask.is_some_and(|m| m.shape() != pv.shape()) {
            return Err(mismatch("mse_loss", format!("{:?} vs {:?}", pv.shape(), tv.shape())));
        }
        let w: Rc<Vec<f64>> = Rc::new(mask.map_or_else(|| vec![1.0; pv.len()], |m| m.data().to_vec()));
        let denom = w.iter().sum::<f64>().max(1.0);
        let loss: f64 = pv.data().iter().zip(tv.data()).zip(w.iter()).map(|((p, t), w)| w * (p - t).powi(2)).sum::<f64>() / denom;
        let rule = Box::new(move |g: &Tensor, need: &[bool]| {
            let s = 2.0 * g.item() / denom;
            let d: Vec<f64> = pv.data().iter().zip(tv.data()).zip(w.iter()).map(|((p, t), w)| s * w * (p - t)).collect();
            let neg = need[1].then(|| Tensor::new(pv.shape(), d.iter().map(|v| -v).collect()));
            vec![need[0].then(|| Tensor::new(pv.shape(), d)), neg]
        });
        self.push_op("mse_loss", Tensor::scalar(loss), &[pred, target], rule)
    }

    /// Binary cross-entropy on logits, averaged over masked entries.
    /// `pos_weight` scales the loss of positive targets.
    pub fn bce_with_logits_loss(&self, logits: Var, targets: &Tensor, mask: Option<&Tensor>, pos_weight: f64) -> Result<Var> {
        let xv = self.value(logits);
        if xv.shape() != targets.shape() || mask.is_some_and(|m| m.shape() != xv.shape()) {
            return Err(mismatch("bce_with_logits_loss", format!("{:?} vs {:?}", xv.shape(), targets.shape())));
        }
        let w: Vec<f64> = mask.map_or_else(|| vec![1.0; xv.len()], |m| m.data().to_vec());
        let t = targets.data().to_vec();
        let denom = w.iter().sum::<f64>().max(1.0);
        let loss: f64 = xv
            .data()
            .iter()
            .zip(&t)
            .zip(&w)
            .map(|((&x, &t), &w)| w * (pos_weight * t * softplus(-x) + (1.0 - t) * softplus(x)))
            .sum::<f64>()
            / denom;
        let rule = Box::new(move |g: &Tensor, _: &[bool]| {
            let s = g.item() / denom;
            let d = xv
                .data()
                .iter()
                .zip(&t)
                .zip(&w)
                .map(|((&x, &t), &w)| {
                    let p = sigmoid(x);
                    s * w * (pos_weight * t * (p - 1.0) + (1.0 - t) * p)
                })
                .collect();
            vec![Some(Tensor::new(xv.shape(), d))]
        });
        self.push_op("bce_with_logits_loss", Tensor::scalar(loss), &[logits], rule)
    }

    /// `ln |det w|` of a square matrix; gradient `w⁻ᵀ`.
    pub fn log_abs_det(&self, w: Var) -> Result<Var> {
        let wv = self.value(w);
        let n = match wv.shape() {
            [a, b] if a == b => *a,
            s => return Err(mismatch("log_abs_det", format!("{s:?} is not square"))),
        };
        let m = nalgebra::DMatrix::from_row_slice(n, n, wv.data());
        let lu = m.clone().lu();
        let det = lu.determinant();
        if det == 0.0 {
            return Err(AutogradError::InvalidArgument { op: "log_abs_det", detail: "singular matrix".into() });
        }
        let inv = lu.try_inverse().ok_or(AutogradError::InvalidArgument { op: "log_abs_det", detail: "singular matrix".into() })?;
        // row-major data of (w^-1)^T is the column-major data of w^-1
        let inv_t: Vec<f64> = inv.as_slice().to_vec();
        let rule = Box::new(move |g: &Tensor, _: &[bool]| {
            vec![Some(Tensor::new(&[n, n], inv_t.iter().map(|v| v * g.item()).collect()))]
        });
        self.push_op("log_abs_det", Tensor::scalar(det.abs().ln()), &[w], rule)
    }
}

fn bn_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [b, c] => Ok((*b, *c, 1)),
        [b, c, t] => Ok((*b, *c, *t)),
        s => Err(mismatch("batch_norm", format!("input {s:?} is not [b, c] or [b, c, t]"))),
    }
}

fn channel_sums(g: &[f64], batch: usize, c: usize, t: usize) -> Tensor {
    let mut db = vec![0.0; c];
    for bi in 0..batch {
        for (ch, d) in db.iter_mut().enumerate() {
            *d += g[(bi * c + ch) * t..(bi * c + ch + 1) * t].iter().sum::<f64>();
        }
    }
    Tensor::new(&[c], db)
}

fn slice_tensor(x: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let shape = x.shape();
    let (outer, n, inner) = lanes(shape, axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        data.extend_from_slice(&x.data()[(o * n + start) * inner..(o * n + start + len) * inner]);
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    Tensor::new(&out_shape, data)
}

/// Output axis `i` is input axis `perm[i]`; `perm` must be an involution
/// (a single swap), so the same call inverts it.
fn permute(x: &Tensor, perm: &[usize]) -> Tensor {
    let in_shape = x.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides(in_shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = x.len();
    let mut data = Vec::with_capacity(total);
    let mut idx = vec![0usize; out_shape.len()];
    let mut src = 0usize;
    for _ in 0..total {
        data.push(x.data()[src]);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Tensor::new(&out_shape, data)
}
