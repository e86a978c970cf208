//! Dense row-major arrays and the raw numeric kernels shared by the autodiff
//! graph and the vocoder's inference path.

use std::fmt::Debug;

use num_traits::Float;

/// Scalar types the kernels run on. `f64` is the training/test precision,
/// `f32` is available for inference.
pub trait Real: Float + Default + Debug + Send + Sync + 'static {
    /// `c = alpha * a·b + beta * c` over raw strided storage.
    ///
    /// # Safety
    /// Strides and dimensions must address memory inside the given buffers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64(x: f64) -> Self;
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn from_f64(x: f64) -> Self {
        x
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn from_f64(x: f64) -> Self {
        x as f32
    }
}

/// Row-major GEMM: `c[m×n] = alpha * op(a) op(b) + beta * c`.
///
/// `a` is stored `[m×k]`, or `[k×m]` when `trans_a`; likewise `b` is `[k×n]`
/// or `[n×k]` when `trans_b`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Real>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: F,
    a: &[F],
    b: &[F],
    beta: F,
    c: &mut [F],
) {
    assert!(a.len() >= m * k, "gemm: lhs buffer too small");
    assert!(b.len() >= k * n, "gemm: rhs buffer too small");
    assert!(c.len() >= m * n, "gemm: output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v = beta * *v;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: buffer sizes checked above; strides describe dense row-major
    // (or transposed) layouts of exactly those sizes.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds one `[c_in × t]` signal into `[c_in·k × t]` columns for a
/// stride-1 dilated convolution with same padding.
pub fn im2col<F: Real>(x: &[F], c_in: usize, t: usize, k: usize, dilation: usize, col: &mut [F]) {
    let pad = dilation * (k - 1) / 2;
    for c in 0..c_in {
        let row_in = &x[c * t..(c + 1) * t];
        for kk in 0..k {
            let row = &mut col[(c * k + kk) * t..(c * k + kk + 1) * t];
            let offset = (kk * dilation) as isize - pad as isize;
            for (tt, out) in row.iter_mut().enumerate() {
                let src = tt as isize + offset;
                *out = if src >= 0 && (src as usize) < t { row_in[src as usize] } else { F::zero() };
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into a `[c_in × t]` signal.
pub fn col2im<F: Real>(col: &[F], c_in: usize, t: usize, k: usize, dilation: usize, x: &mut [F]) {
    let pad = dilation * (k - 1) / 2;
    for c in 0..c_in {
        for kk in 0..k {
            let row = &col[(c * k + kk) * t..(c * k + kk + 1) * t];
            let offset = (kk * dilation) as isize - pad as isize;
            for (tt, v) in row.iter().enumerate() {
                let src = tt as isize + offset;
                if src >= 0 && (src as usize) < t {
                    x[c * t + src as usize] = x[c * t + src as usize] + *v;
                }
            }
        }
    }
}

/// Stride-1, same-padded, dilated 1-D convolution of a single `[c_in × t]`
/// signal with weights `[c_out × c_in × k]`. `k` must be odd.
pub fn conv1d_single<F: Real>(
    x: &[F],
    c_in: usize,
    t: usize,
    weight: &[F],
    bias: Option<&[F]>,
    c_out: usize,
    k: usize,
    dilation: usize,
) -> Vec<F> {
    let mut out = vec![F::zero(); c_out * t];
    if let Some(b) = bias {
        for (o, row) in out.chunks_mut(t).enumerate() {
            row.iter_mut().for_each(|v| *v = b[o]);
        }
    }
    if k == 1 {
        gemm(false, false, c_out, t, c_in, F::one(), weight, x, F::one(), &mut out);
    } else {
        let mut col = vec![F::zero(); c_in * k * t];
        im2col(x, c_in, t, k, dilation, &mut col);
        gemm(false, false, c_out, t, c_in * k, F::one(), weight, &col, F::one(), &mut out);
    }
    out
}

/// Transposed 1-D convolution of one `[c_in × frames]` signal with weights
/// `[c_in × c_out × k]` and the given stride. Output is
/// `[c_out × ((frames−1)·stride + k)]`.
pub fn conv_transpose1d_single<F: Real>(
    x: &[F],
    c_in: usize,
    frames: usize,
    weight: &[F],
    bias: Option<&[F]>,
    c_out: usize,
    k: usize,
    stride: usize,
) -> Vec<F> {
    let len = if frames == 0 { 0 } else { (frames - 1) * stride + k };
    let mut out = vec![F::zero(); c_out * len];
    if let Some(b) = bias {
        for (o, row) in out.chunks_mut(len.max(1)).enumerate().take(c_out) {
            row.iter_mut().for_each(|v| *v = b[o]);
        }
    }
    // cols[(co, kk), f] = sum_ci w[ci, co, kk] x[ci, f]
    let mut cols = vec![F::zero(); c_out * k * frames];
    gemm(true, false, c_out * k, frames, c_in, F::one(), weight, x, F::zero(), &mut cols);
    for co in 0..c_out {
        for kk in 0..k {
            let row = &cols[(co * k + kk) * frames..(co * k + kk + 1) * frames];
            for (f, v) in row.iter().enumerate() {
                let idx = co * len + f * stride + kk;
                out[idx] = out[idx] + *v;
            }
        }
    }
    out
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// An n-dimensional `f64` array in row-major order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Panics if `data.len()` differs from the product of `shape`.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len(), "reshape size mismatch");
        self.shape = shape.to_vec();
        self
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Adds `other` elementwise in place. Shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, c: f64) {
        self.data.iter_mut().for_each(|v| *v *= c);
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        assert_eq!(self.rank(), 2);
        let n = self.shape[1];
        &self.data[i * n..(i + 1) * n]
    }
}
