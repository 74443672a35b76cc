//! Dense f64 tensors and the eager kernels behind every graph op.
//!
//! Shapes are checked with assertions: a mismatch here is a programming
//! error, not a recoverable condition. Public APIs in downstream crates
//! validate their inputs before reaching these kernels.

use std::sync::Arc;

use ndarray::{ArrayView2, ArrayViewMut2};

/// Immutable dense tensor. Cloning is cheap (shared storage).
#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl RawTensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Self {
        let shape = shape.into();
        let len: usize = shape.iter().product();
        assert_eq!(data.len(), len, "data length {} != shape {:?}", data.len(), shape);
        Self { shape, data: Arc::new(data) }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let len: usize = shape.iter().product();
        Self { shape, data: Arc::new(vec![0.0; len]) }
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: f64) -> Self {
        let shape = shape.into();
        let len: usize = shape.iter().product();
        Self { shape, data: Arc::new(vec![v; len]) }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: Arc::new(vec![v]) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    pub fn as_scalar(&self) -> f64 {
        assert_eq!(self.len(), 1, "not a scalar: shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let len: usize = shape.iter().product();
        assert_eq!(len, self.len(), "reshape {:?} -> {:?}", self.shape, shape);
        Self { shape, data: Arc::clone(&self.data) }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::new(self.shape.clone(), data)
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a * b)
    }

    pub fn affine(&self, mul: f64, add: f64) -> Self {
        self.map(|v| v * mul + add)
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot_flat(&self, other: &Self) -> f64 {
        assert_eq!(self.len(), other.len());
        self.data.iter().zip(other.data.iter()).map(|(a, b)| a * b).sum()
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn view2(&self) -> ArrayView2<'_, f64> {
        assert_eq!(self.shape.len(), 2, "expected 2-d tensor, got {:?}", self.shape);
        ArrayView2::from_shape((self.shape[0], self.shape[1]), &self.data).unwrap()
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&self, other: &Self) -> Self {
        let (a, b) = (self.view2(), other.view2());
        assert_eq!(a.ncols(), b.nrows(), "matmul {:?} x {:?}", self.shape, other.shape);
        let (m, n) = (a.nrows(), b.ncols());
        let mut out = vec![0.0; m * n];
        {
            let mut c = ArrayViewMut2::from_shape((m, n), &mut out).unwrap();
            ndarray::linalg::general_mat_mul(1.0, &a, &b, 0.0, &mut c);
        }
        Self::new(vec![m, n], out)
    }

    /// `a^T x b`: `[k,m]^T x [k,n] -> [m,n]`
    pub fn matmul_tn(&self, other: &Self) -> Self {
        let (a, b) = (self.view2(), other.view2());
        assert_eq!(a.nrows(), b.nrows(), "matmul_tn {:?} x {:?}", self.shape, other.shape);
        let (m, n) = (a.ncols(), b.ncols());
        let mut out = vec![0.0; m * n];
        {
            let mut c = ArrayViewMut2::from_shape((m, n), &mut out).unwrap();
            ndarray::linalg::general_mat_mul(1.0, &a.t(), &b, 0.0, &mut c);
        }
        Self::new(vec![m, n], out)
    }

    /// `a x b^T`: `[m,k] x [n,k]^T -> [m,n]`
    pub fn matmul_nt(&self, other: &Self) -> Self {
        let (a, b) = (self.view2(), other.view2());
        assert_eq!(a.ncols(), b.ncols(), "matmul_nt {:?} x {:?}", self.shape, other.shape);
        let (m, n) = (a.nrows(), b.nrows());
        let mut out = vec![0.0; m * n];
        {
            let mut c = ArrayViewMut2::from_shape((m, n), &mut out).unwrap();
            ndarray::linalg::general_mat_mul(1.0, &a, &b.t(), 0.0, &mut c);
        }
        Self::new(vec![m, n], out)
    }

    fn bmm_impl(&self, other: &Self, ta: bool, tb: bool) -> Self {
        assert_eq!(self.shape.len(), 3, "bmm lhs {:?}", self.shape);
        assert_eq!(other.shape.len(), 3, "bmm rhs {:?}", other.shape);
        assert_eq!(self.shape[0], other.shape[0], "bmm batch mismatch");
        let bsz = self.shape[0];
        let (ar, ac) = (self.shape[1], self.shape[2]);
        let (br, bc) = (other.shape[1], other.shape[2]);
        let (m, ka) = if ta { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(ka, kb, "bmm inner dim mismatch");
        let mut out = vec![0.0; bsz * m * n];
        for i in 0..bsz {
            let a = ArrayView2::from_shape((ar, ac), &self.data[i * ar * ac..(i + 1) * ar * ac]).unwrap();
            let b =
                ArrayView2::from_shape((br, bc), &other.data[i * br * bc..(i + 1) * br * bc]).unwrap();
            let mut c = ArrayViewMut2::from_shape((m, n), &mut out[i * m * n..(i + 1) * m * n]).unwrap();
            match (ta, tb) {
                (false, false) => ndarray::linalg::general_mat_mul(1.0, &a, &b, 0.0, &mut c),
                (true, false) => ndarray::linalg::general_mat_mul(1.0, &a.t(), &b, 0.0, &mut c),
                (false, true) => ndarray::linalg::general_mat_mul(1.0, &a, &b.t(), 0.0, &mut c),
                (true, true) => ndarray::linalg::general_mat_mul(1.0, &a.t(), &b.t(), 0.0, &mut c),
            }
        }
        Self::new(vec![bsz, m, n], out)
    }

    /// Batched matmul: `[b,m,k] x [b,k,n] -> [b,m,n]`
    pub fn bmm(&self, other: &Self) -> Self {
        self.bmm_impl(other, false, false)
    }

    pub fn bmm_tn(&self, other: &Self) -> Self {
        self.bmm_impl(other, true, false)
    }

    pub fn bmm_nt(&self, other: &Self) -> Self {
        self.bmm_impl(other, false, true)
    }

    /// Generic axis permutation (copies).
    pub fn permute(&self, axes: &[usize]) -> Self {
        let nd = self.shape.len();
        assert_eq!(axes.len(), nd);
        let mut seen = vec![false; nd];
        for &a in axes {
            assert!(a < nd && !seen[a], "bad permutation {:?}", axes);
            seen[a] = true;
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let in_strides = strides_of(&self.shape);
        let out_len = self.len();
        let mut out = vec![0.0; out_len];
        let out_strides = strides_of(&out_shape);
        // For each output index, map back to input offset.
        let mut idx = vec![0usize; nd];
        for (o, slot) in out.iter_mut().enumerate() {
            let mut rem = o;
            for d in 0..nd {
                idx[d] = rem / out_strides[d];
                rem %= out_strides[d];
            }
            let mut src = 0;
            for d in 0..nd {
                src += idx[d] * in_strides[axes[d]];
            }
            *slot = self.data[src];
        }
        Self::new(out_shape, out)
    }

    /// Select index `i` along axis 0: `[a0, rest..] -> [rest..]`.
    pub fn index_axis0(&self, i: usize) -> Self {
        assert!(!self.shape.is_empty() && i < self.shape[0]);
        let chunk = self.len() / self.shape[0];
        let data = self.data[i * chunk..(i + 1) * chunk].to_vec();
        Self::new(self.shape[1..].to_vec(), data)
    }

    /// Spatial window of a `[c,h,w]` tensor.
    pub fn slice_hw(&self, y0: usize, y1: usize, x0: usize, x1: usize) -> Self {
        assert_eq!(self.shape.len(), 3, "slice_hw expects [c,h,w]");
        let (c, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        assert!(y0 < y1 && y1 <= h && x0 < x1 && x1 <= w, "bad window");
        let (oh, ow) = (y1 - y0, x1 - x0);
        let mut out = vec![0.0; c * oh * ow];
        for ci in 0..c {
            for y in 0..oh {
                let src = ci * h * w + (y0 + y) * w + x0;
                let dst = ci * oh * ow + y * ow;
                out[dst..dst + ow].copy_from_slice(&self.data[src..src + ow]);
            }
        }
        Self::new(vec![c, oh, ow], out)
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Self {
        assert!(!self.shape.is_empty());
        let n = *self.shape.last().unwrap();
        let rows = self.len() / n;
        let mut out = vec![0.0; self.len()];
        for r in 0..rows {
            let row = &self.data[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (i, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                out[r * n + i] = e;
                z += e;
            }
            for v in &mut out[r * n..(r + 1) * n] {
                *v /= z;
            }
        }
        Self::new(self.shape.clone(), out)
    }

    /// 2-d convolution, stride 1: `[n,ci,h,w] * [co,ci,kh,kw] -> [n,co,h',w']`
    /// with `h' = h + 2*pad - kh + 1`.
    pub fn conv2d(&self, weight: &Self, pad: usize) -> Self {
        let (n, ci, h, w) = dims4(&self.shape);
        let (co, wci, kh, kw) = dims4(&weight.shape);
        assert_eq!(ci, wci, "conv2d channel mismatch");
        let oh = h + 2 * pad + 1 - kh;
        let ow = w + 2 * pad + 1 - kw;
        let cols = im2col(&self.data, n, ci, h, w, kh, kw, pad, oh, ow);
        let k = ci * kh * kw;
        let l = n * oh * ow;
        let w2d = ArrayView2::from_shape((co, k), &weight.data).unwrap();
        let cv = ArrayView2::from_shape((k, l), &cols).unwrap();
        let mut out2d = vec![0.0; co * l];
        {
            let mut c = ArrayViewMut2::from_shape((co, l), &mut out2d).unwrap();
            ndarray::linalg::general_mat_mul(1.0, &w2d, &cv, 0.0, &mut c);
        }
        // [co, n, oh, ow] -> [n, co, oh, ow]
        let mut out = vec![0.0; n * co * oh * ow];
        let plane = oh * ow;
        for c in 0..co {
            for b in 0..n {
                let src = c * l + b * plane;
                let dst = b * co * plane + c * plane;
                out[dst..dst + plane].copy_from_slice(&out2d[src..src + plane]);
            }
        }
        Self::new(vec![n, co, oh, ow], out)
    }

    /// Gradient of conv2d w.r.t. its input.
    pub fn conv2d_grad_x(grad_out: &Self, weight: &Self, pad: usize, in_shape: &[usize]) -> Self {
        let (n, ci, h, w) = dims4(in_shape);
        let (co, _, kh, kw) = dims4(weight.shape());
        let (gn, gco, oh, ow) = dims4(grad_out.shape());
        assert_eq!((gn, gco), (n, co));
        let k = ci * kh * kw;
        let l = n * oh * ow;
        // grad_out to [co, l] layout
        let plane = oh * ow;
        let mut g2d = vec![0.0; co * l];
        for b in 0..n {
            for c in 0..co {
                let src = b * co * plane + c * plane;
                let dst = c * l + b * plane;
                g2d[dst..dst + plane].copy_from_slice(&grad_out.data[src..src + plane]);
            }
        }
        let w2d = ArrayView2::from_shape((co, k), &weight.data).unwrap();
        let gv = ArrayView2::from_shape((co, l), &g2d).unwrap();
        let mut dcols = vec![0.0; k * l];
        {
            let mut c = ArrayViewMut2::from_shape((k, l), &mut dcols).unwrap();
            ndarray::linalg::general_mat_mul(1.0, &w2d.t(), &gv, 0.0, &mut c);
        }
        let dx = col2im(&dcols, n, ci, h, w, kh, kw, pad, oh, ow);
        Self::new(vec![n, ci, h, w], dx)
    }

    /// Gradient of conv2d w.r.t. the weight.
    pub fn conv2d_grad_w(input: &Self, grad_out: &Self, pad: usize, w_shape: &[usize]) -> Self {
        let (n, ci, h, w) = dims4(input.shape());
        let (co, wci, kh, kw) = dims4(w_shape);
        assert_eq!(ci, wci);
        let (_, _, oh, ow) = dims4(grad_out.shape());
        let cols = im2col(&input.data, n, ci, h, w, kh, kw, pad, oh, ow);
        let k = ci * kh * kw;
        let l = n * oh * ow;
        let plane = oh * ow;
        let mut g2d = vec![0.0; co * l];
        for b in 0..n {
            for c in 0..co {
                let src = b * co * plane + c * plane;
                let dst = c * l + b * plane;
                g2d[dst..dst + plane].copy_from_slice(&grad_out.data[src..src + plane]);
            }
        }
        let gv = ArrayView2::from_shape((co, l), &g2d).unwrap();
        let cv = ArrayView2::from_shape((k, l), &cols).unwrap();
        let mut dw = vec![0.0; co * k];
        {
            let mut c = ArrayViewMut2::from_shape((co, k), &mut dw).unwrap();
            ndarray::linalg::general_mat_mul(1.0, &gv, &cv.t(), 0.0, &mut c);
        }
        Self::new(vec![co, ci, kh, kw], dw)
    }

    /// Average pooling with square window `k`, stride `k`.
    pub fn avg_pool2d(&self, k: usize) -> Self {
        let (n, c, h, w) = dims4(&self.shape);
        assert!(k >= 1 && h % k == 0 && w % k == 0, "pool size must divide");
        let (oh, ow) = (h / k, w / k);
        let inv = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; n * c * oh * ow];
        for b in 0..n {
            for ci in 0..c {
                let base = (b * c + ci) * h * w;
                let obase = (b * c + ci) * oh * ow;
                for y in 0..oh {
                    for x in 0..ow {
                        let mut s = 0.0;
                        for dy in 0..k {
                            for dx in 0..k {
                                s += self.data[base + (y * k + dy) * w + x * k + dx];
                            }
                        }
                        out[obase + y * ow + x] = s * inv;
                    }
                }
            }
        }
        Self::new(vec![n, c, oh, ow], out)
    }

    pub fn avg_pool2d_grad(grad_out: &Self, k: usize, in_shape: &[usize]) -> Self {
        let (n, c, h, w) = dims4(in_shape);
        let (_, _, oh, ow) = dims4(grad_out.shape());
        let inv = 1.0 / (k * k) as f64;
        let mut dx = vec![0.0; n * c * h * w];
        for b in 0..n {
            for ci in 0..c {
                let base = (b * c + ci) * h * w;
                let obase = (b * c + ci) * oh * ow;
                for y in 0..oh {
                    for x in 0..ow {
                        let g = grad_out.data[obase + y * ow + x] * inv;
                        for dy in 0..k {
                            for dx_ in 0..k {
                                dx[base + (y * k + dy) * w + x * k + dx_] += g;
                            }
                        }
                    }
                }
            }
        }
        Self::new(vec![n, c, h, w], dx)
    }

    /// Nearest-neighbour upsampling by integer factor `k`.
    pub fn upsample_nearest(&self, k: usize) -> Self {
        let (n, c, h, w) = dims4(&self.shape);
        let (oh, ow) = (h * k, w * k);
        let mut out = vec![0.0; n * c * oh * ow];
        for b in 0..n {
            for ci in 0..c {
                let base = (b * c + ci) * h * w;
                let obase = (b * c + ci) * oh * ow;
                for y in 0..oh {
                    for x in 0..ow {
                        out[obase + y * ow + x] = self.data[base + (y / k) * w + x / k];
                    }
                }
            }
        }
        Self::new(vec![n, c, oh, ow], out)
    }

    pub fn upsample_nearest_grad(grad_out: &Self, k: usize, in_shape: &[usize]) -> Self {
        let (n, c, h, w) = dims4(in_shape);
        let (_, _, oh, ow) = dims4(grad_out.shape());
        let mut dx = vec![0.0; n * c * h * w];
        for b in 0..n {
            for ci in 0..c {
                let base = (b * c + ci) * h * w;
                let obase = (b * c + ci) * oh * ow;
                for y in 0..oh {
                    for x in 0..ow {
                        dx[base + (y / k) * w + x / k] += grad_out.data[obase + y * ow + x];
                    }
                }
            }
        }
        Self::new(vec![n, c, h, w], dx)
    }

    /// Bilinear resize of a `[c,h,w]` tensor to `[c,oh,ow]` (half-pixel centers).
    pub fn bilinear_resize(&self, oh: usize, ow: usize) -> Self {
        let (c, h, w) = dims3(&self.shape);
        let ys = axis_weights(h, oh);
        let xs = axis_weights(w, ow);
        let mut out = vec![0.0; c * oh * ow];
        for ci in 0..c {
            let base = ci * h * w;
            let obase = ci * oh * ow;
            for (y, &(y0, y1, wy)) in ys.iter().enumerate() {
                for (x, &(x0, x1, wx)) in xs.iter().enumerate() {
                    let v00 = self.data[base + y0 * w + x0];
                    let v01 = self.data[base + y0 * w + x1];
                    let v10 = self.data[base + y1 * w + x0];
                    let v11 = self.data[base + y1 * w + x1];
                    let top = v00 * (1.0 - wx) + v01 * wx;
                    let bot = v10 * (1.0 - wx) + v11 * wx;
                    out[obase + y * ow + x] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
        Self::new(vec![c, oh, ow], out)
    }

    pub fn bilinear_resize_grad(grad_out: &Self, in_shape: &[usize]) -> Self {
        let (c, h, w) = dims3(in_shape);
        let (_, oh, ow) = dims3(grad_out.shape());
        let ys = axis_weights(h, oh);
        let xs = axis_weights(w, ow);
        let mut dx = vec![0.0; c * h * w];
        for ci in 0..c {
            let base = ci * h * w;
            let obase = ci * oh * ow;
            for (y, &(y0, y1, wy)) in ys.iter().enumerate() {
                for (x, &(x0, x1, wx)) in xs.iter().enumerate() {
                    let g = grad_out.data[obase + y * ow + x];
                    dx[base + y0 * w + x0] += g * (1.0 - wy) * (1.0 - wx);
                    dx[base + y0 * w + x1] += g * (1.0 - wy) * wx;
                    dx[base + y1 * w + x0] += g * wy * (1.0 - wx);
                    dx[base + y1 * w + x1] += g * wy * wx;
                }
            }
        }
        Self::new(vec![c, h, w], dx)
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

pub(crate) fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected 4-d shape, got {:?}", shape);
    (shape[0], shape[1], shape[2], shape[3])
}

pub(crate) fn dims3(shape: &[usize]) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 3, "expected 3-d shape, got {:?}", shape);
    (shape[0], shape[1], shape[2])
}

/// Source indices and lerp weight for one resize axis (half-pixel convention).
fn axis_weights(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let p = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = p.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, p - i0 as f64)
        })
        .collect()
}

/// `[k = ci*kh*kw, l = n*oh*ow]` patch matrix, zero padded.
#[allow(clippy::too_many_arguments)]
fn im2col(
    data: &[f64],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let k = ci * kh * kw;
    let l = n * oh * ow;
    let mut cols = vec![0.0; k * l];
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for b in 0..n {
                    let base = (b * ci + c) * h * w;
                    for y in 0..oh {
                        let sy = (y + ky) as isize - pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let dst0 = row * l + b * oh * ow + y * ow;
                        let src0 = base + sy as usize * w;
                        for x in 0..ow {
                            let sx = (x + kx) as isize - pad as isize;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            cols[dst0 + x] = data[src0 + sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of a patch matrix back to image layout.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let l = n * oh * ow;
    let mut out = vec![0.0; n * ci * h * w];
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for b in 0..n {
                    let base = (b * ci + c) * h * w;
                    for y in 0..oh {
                        let sy = (y + ky) as isize - pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src0 = row * l + b * oh * ow + y * ow;
                        let dst0 = base + sy as usize * w;
                        for x in 0..ow {
                            let sx = (x + kx) as isize - pad as isize;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            out[dst0 + sx as usize] += cols[src0 + x];
                        }
                    }
                }
            }
        }
    }
    out
}
