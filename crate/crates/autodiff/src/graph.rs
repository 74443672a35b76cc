//! Reverse-mode autodiff graph.
//!
//! A [`Tensor`] wraps a value plus the op that produced it. Ops whose inputs
//! do not require gradients collapse to leaves, so forward-only code pays no
//! graph-retention cost. `backward()` walks the graph once and returns a map
//! from tensor id to gradient.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::raw::{dims3, dims4, RawTensor};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

struct Inner {
    id: u64,
    value: RawTensor,
    op: Op,
    requires_grad: bool,
}

enum Op {
    Leaf,
    Var,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Affine { x: Tensor, mul: f64 },
    Matmul(Tensor, Tensor),
    Bmm(Tensor, Tensor),
    AddRow { x: Tensor, bias: Tensor },
    AddChannel { x: Tensor, bias: Tensor },
    Conv2d { x: Tensor, w: Tensor, pad: usize },
    AvgPool2d { x: Tensor, k: usize },
    UpsampleNearest { x: Tensor, k: usize },
    SoftmaxLast(Tensor),
    Ln(Tensor),
    Silu(Tensor),
    Sigmoid(Tensor),
    Clamp { x: Tensor, lo: f64, hi: f64 },
    Sum(Tensor),
    Mean(Tensor),
    NormalizeL2 { x: Tensor, norm: f64 },
    RmsNormChannels { x: Tensor, gamma: Tensor, eps: f64 },
    Permute { x: Tensor, axes: Vec<usize> },
    Reshape(Tensor),
    IndexAxis0 { x: Tensor, idx: usize },
    SliceHw { x: Tensor, y0: usize, x0: usize },
    BilinearResize(Tensor),
    StackScalars(Vec<Tensor>),
}

impl Tensor {
    fn from_op(value: RawTensor, op: Op) -> Self {
        let requires_grad = op_requires_grad(&op);
        let op = if requires_grad { op } else { Op::Leaf };
        Tensor { inner: Arc::new(Inner { id: fresh_id(), value, op, requires_grad }) }
    }

    /// Constant input; gradients never flow into it.
    pub fn leaf(value: RawTensor) -> Self {
        Tensor { inner: Arc::new(Inner { id: fresh_id(), value, op: Op::Leaf, requires_grad: false }) }
    }

    /// Trainable input; `backward()` reports a gradient for it.
    pub fn var(value: RawTensor) -> Self {
        Tensor { inner: Arc::new(Inner { id: fresh_id(), value, op: Op::Var, requires_grad: true }) }
    }

    pub fn scalar(v: f64) -> Self {
        Self::leaf(RawTensor::scalar(v))
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn value(&self) -> &RawTensor {
        &self.inner.value
    }

    pub fn shape(&self) -> &[usize] {
        self.inner.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_var(&self) -> bool {
        matches!(self.inner.op, Op::Var)
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.inner.value.clone())
    }

    // ---- elementwise ----

    pub fn add(&self, other: &Tensor) -> Tensor {
        let v = self.value().add(other.value());
        Tensor::from_op(v, Op::Add(self.clone(), other.clone()))
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let v = self.value().sub(other.value());
        Tensor::from_op(v, Op::Sub(self.clone(), other.clone()))
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        let v = self.value().mul(other.value());
        Tensor::from_op(v, Op::Mul(self.clone(), other.clone()))
    }

    /// `x * mul + add`, elementwise with scalar constants.
    pub fn affine(&self, mul: f64, add: f64) -> Tensor {
        let v = self.value().affine(mul, add);
        Tensor::from_op(v, Op::Affine { x: self.clone(), mul })
    }

    pub fn neg(&self) -> Tensor {
        self.affine(-1.0, 0.0)
    }

    pub fn ln(&self) -> Tensor {
        let v = self.value().map(f64::ln);
        Tensor::from_op(v, Op::Ln(self.clone()))
    }

    pub fn silu(&self) -> Tensor {
        let v = self.value().map(|x| x / (1.0 + (-x).exp()));
        Tensor::from_op(v, Op::Silu(self.clone()))
    }

    pub fn sigmoid(&self) -> Tensor {
        let v = self.value().map(|x| 1.0 / (1.0 + (-x).exp()));
        Tensor::from_op(v, Op::Sigmoid(self.clone()))
    }

    /// Elementwise clamp to `[lo, hi]`. Gradients pass through strictly
    /// inside the interval and are zero at and beyond the bounds.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        assert!(lo < hi, "clamp needs lo < hi");
        let v = self.value().map(|x| x.clamp(lo, hi));
        Tensor::from_op(v, Op::Clamp { x: self.clone(), lo, hi })
    }

    // ---- linear algebra ----

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let v = self.value().matmul(other.value());
        Tensor::from_op(v, Op::Matmul(self.clone(), other.clone()))
    }

    pub fn bmm(&self, other: &Tensor) -> Tensor {
        let v = self.value().bmm(other.value());
        Tensor::from_op(v, Op::Bmm(self.clone(), other.clone()))
    }

    /// `[m,n] + [n]` row-broadcast bias add.
    pub fn add_row(&self, bias: &Tensor) -> Tensor {
        let n = *self.shape().last().expect("add_row on scalar");
        assert_eq!(bias.shape(), [n], "bias shape mismatch");
        let rows = self.value().len() / n;
        let mut out = self.value().to_vec();
        for r in 0..rows {
            for i in 0..n {
                out[r * n + i] += bias.value().data()[i];
            }
        }
        let v = RawTensor::new(self.shape().to_vec(), out);
        Tensor::from_op(v, Op::AddRow { x: self.clone(), bias: bias.clone() })
    }

    /// `[n,c,h,w] + [c]` channel-broadcast bias add.
    pub fn add_channel(&self, bias: &Tensor) -> Tensor {
        let (n, c, h, w) = dims4(self.shape());
        assert_eq!(bias.shape(), [c], "channel bias mismatch");
        let mut out = self.value().to_vec();
        let plane = h * w;
        for b in 0..n {
            for ci in 0..c {
                let v = bias.value().data()[ci];
                let base = (b * c + ci) * plane;
                for p in &mut out[base..base + plane] {
                    *p += v;
                }
            }
        }
        let v = RawTensor::new(self.shape().to_vec(), out);
        Tensor::from_op(v, Op::AddChannel { x: self.clone(), bias: bias.clone() })
    }

    pub fn conv2d(&self, weight: &Tensor, pad: usize) -> Tensor {
        let v = self.value().conv2d(weight.value(), pad);
        Tensor::from_op(v, Op::Conv2d { x: self.clone(), w: weight.clone(), pad })
    }

    pub fn avg_pool2d(&self, k: usize) -> Tensor {
        let v = self.value().avg_pool2d(k);
        Tensor::from_op(v, Op::AvgPool2d { x: self.clone(), k })
    }

    pub fn upsample_nearest(&self, k: usize) -> Tensor {
        let v = self.value().upsample_nearest(k);
        Tensor::from_op(v, Op::UpsampleNearest { x: self.clone(), k })
    }

    pub fn softmax_last(&self) -> Tensor {
        let v = self.value().softmax_last();
        Tensor::from_op(v, Op::SoftmaxLast(self.clone()))
    }

    // ---- reductions ----

    pub fn sum(&self) -> Tensor {
        let v = RawTensor::scalar(self.value().sum_all());
        Tensor::from_op(v, Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor {
        let v = RawTensor::scalar(self.value().sum_all() / self.value().len() as f64);
        Tensor::from_op(v, Op::Mean(self.clone()))
    }

    /// Flat dot product of two equally sized tensors.
    pub fn dot(&self, other: &Tensor) -> Tensor {
        self.mul(other).sum()
    }

    /// L2-normalize the whole tensor (`eps` guards the zero vector).
    pub fn normalize_l2(&self) -> Tensor {
        let norm = (self.value().data().iter().map(|v| v * v).sum::<f64>() + 1e-12).sqrt();
        let v = self.value().affine(1.0 / norm, 0.0);
        Tensor::from_op(v, Op::NormalizeL2 { x: self.clone(), norm })
    }

    /// RMS norm over the channel axis of `[n,c,h,w]`, scaled by `gamma[c]`.
    pub fn rms_norm_channels(&self, gamma: &Tensor, eps: f64) -> Tensor {
        let (n, c, h, w) = dims4(self.shape());
        assert_eq!(gamma.shape(), [c]);
        let x = self.value().data();
        let g = gamma.value().data();
        let plane = h * w;
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            for p in 0..plane {
                let mut m = 0.0;
                for ci in 0..c {
                    let v = x[(b * c + ci) * plane + p];
                    m += v * v;
                }
                let r = 1.0 / (m / c as f64 + eps).sqrt();
                for ci in 0..c {
                    let i = (b * c + ci) * plane + p;
                    out[i] = x[i] * r * g[ci];
                }
            }
        }
        let v = RawTensor::new(self.shape().to_vec(), out);
        Tensor::from_op(v, Op::RmsNormChannels { x: self.clone(), gamma: gamma.clone(), eps })
    }

    // ---- shape ops ----

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Tensor {
        let v = self.value().reshape(shape);
        Tensor::from_op(v, Op::Reshape(self.clone()))
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor {
        let v = self.value().permute(axes);
        Tensor::from_op(v, Op::Permute { x: self.clone(), axes: axes.to_vec() })
    }

    pub fn index_axis0(&self, idx: usize) -> Tensor {
        let v = self.value().index_axis0(idx);
        Tensor::from_op(v, Op::IndexAxis0 { x: self.clone(), idx })
    }

    pub fn slice_hw(&self, y0: usize, y1: usize, x0: usize, x1: usize) -> Tensor {
        let v = self.value().slice_hw(y0, y1, x0, x1);
        Tensor::from_op(v, Op::SliceHw { x: self.clone(), y0, x0 })
    }

    pub fn bilinear_resize(&self, oh: usize, ow: usize) -> Tensor {
        let v = self.value().bilinear_resize(oh, ow);
        Tensor::from_op(v, Op::BilinearResize(self.clone()))
    }

    /// Stack scalar tensors into a vector `[n]`.
    pub fn stack_scalars(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let data: Vec<f64> = parts.iter().map(|t| t.value().as_scalar()).collect();
        let v = RawTensor::new(vec![parts.len()], data);
        Tensor::from_op(v, Op::StackScalars(parts.to_vec()))
    }

    fn parents(&self) -> Vec<Tensor> {
        match &self.inner.op {
            Op::Leaf | Op::Var => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) | Op::Bmm(a, b) => {
                vec![a.clone(), b.clone()]
            }
            Op::AddRow { x, bias } | Op::AddChannel { x, bias } => vec![x.clone(), bias.clone()],
            Op::Conv2d { x, w, .. } => vec![x.clone(), w.clone()],
            Op::RmsNormChannels { x, gamma, .. } => vec![x.clone(), gamma.clone()],
            Op::Affine { x, .. }
            | Op::AvgPool2d { x, .. }
            | Op::UpsampleNearest { x, .. }
            | Op::NormalizeL2 { x, .. }
            | Op::Permute { x, .. }
            | Op::IndexAxis0 { x, .. }
            | Op::SliceHw { x, .. } => vec![x.clone()],
            Op::SoftmaxLast(x)
            | Op::Ln(x)
            | Op::Silu(x)
            | Op::Sigmoid(x)
            | Op::Clamp { x, .. }
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::BilinearResize(x) => vec![x.clone()],
            Op::StackScalars(parts) => parts.clone(),
        }
    }

    /// Reverse-mode gradients of a scalar output with respect to every
    /// reachable tensor that requires grad.
    pub fn backward(&self) -> Gradients {
        assert_eq!(self.value().len(), 1, "backward() needs a scalar output");
        let mut grads: HashMap<u64, RawTensor> = HashMap::new();
        if !self.requires_grad() {
            return Gradients { grads };
        }
        grads.insert(self.id(), RawTensor::scalar(1.0));
        let order = topo_order(self);
        for node in order.iter().rev() {
            let Some(grad_out) = grads.get(&node.id()).cloned() else { continue };
            node.push_grads(&grad_out, &mut grads);
        }
        Gradients { grads }
    }

    fn push_grads(&self, g: &RawTensor, grads: &mut HashMap<u64, RawTensor>) {
        let mut acc = |t: &Tensor, contrib: RawTensor| {
            if !t.requires_grad() {
                return;
            }
            grads
                .entry(t.id())
                .and_modify(|cur| *cur = cur.add(&contrib))
                .or_insert(contrib);
        };
        match &self.inner.op {
            Op::Leaf | Op::Var => {}
            Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(a, g.clone());
                acc(b, g.affine(-1.0, 0.0));
            }
            Op::Mul(a, b) => {
                acc(a, g.mul(b.value()));
                acc(b, g.mul(a.value()));
            }
            Op::Affine { x, mul } => acc(x, g.affine(*mul, 0.0)),
            Op::Matmul(a, b) => {
                acc(a, g.matmul_nt(b.value()));
                acc(b, a.value().matmul_tn(g));
            }
            Op::Bmm(a, b) => {
                acc(a, g.bmm_nt(b.value()));
                acc(b, a.value().bmm_tn(g));
            }
            Op::AddRow { x, bias } => {
                acc(x, g.clone());
                if bias.requires_grad() {
                    let n = bias.value().len();
                    let rows = g.len() / n;
                    let mut db = vec![0.0; n];
                    for r in 0..rows {
                        for i in 0..n {
                            db[i] += g.data()[r * n + i];
                        }
                    }
                    acc(bias, RawTensor::new(vec![n], db));
                }
            }
            Op::AddChannel { x, bias } => {
                acc(x, g.clone());
                if bias.requires_grad() {
                    let (n, c, h, w) = dims4(x.shape());
                    let plane = h * w;
                    let mut db = vec![0.0; c];
                    for b in 0..n {
                        for ci in 0..c {
                            let base = (b * c + ci) * plane;
                            db[ci] += g.data()[base..base + plane].iter().sum::<f64>();
                        }
                    }
                    acc(bias, RawTensor::new(vec![c], db));
                }
            }
            Op::Conv2d { x, w, pad } => {
                if x.requires_grad() {
                    acc(x, RawTensor::conv2d_grad_x(g, w.value(), *pad, x.shape()));
                }
                if w.requires_grad() {
                    acc(w, RawTensor::conv2d_grad_w(x.value(), g, *pad, w.shape()));
                }
            }
            Op::AvgPool2d { x, k } => acc(x, RawTensor::avg_pool2d_grad(g, *k, x.shape())),
            Op::UpsampleNearest { x, k } => {
                acc(x, RawTensor::upsample_nearest_grad(g, *k, x.shape()))
            }
            Op::SoftmaxLast(x) => {
                let y = self.value();
                let n = *y.shape().last().unwrap();
                let rows = y.len() / n;
                let mut dx = vec![0.0; y.len()];
                for r in 0..rows {
                    let ys = &y.data()[r * n..(r + 1) * n];
                    let gs = &g.data()[r * n..(r + 1) * n];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for i in 0..n {
                        dx[r * n + i] = ys[i] * (gs[i] - dot);
                    }
                }
                acc(x, RawTensor::new(y.shape().to_vec(), dx));
            }
            Op::Ln(x) => acc(x, g.zip(x.value(), |gv, xv| gv / xv)),
            Op::Silu(x) => {
                let dx = g.zip(x.value(), |gv, xv| {
                    let s = 1.0 / (1.0 + (-xv).exp());
                    gv * s * (1.0 + xv * (1.0 - s))
                });
                acc(x, dx);
            }
            Op::Sigmoid(x) => {
                let y = self.value();
                acc(x, g.zip(y, |gv, yv| gv * yv * (1.0 - yv)));
            }
            Op::Clamp { x, lo, hi } => {
                acc(x, g.zip(x.value(), |gv, xv| if xv > *lo && xv < *hi { gv } else { 0.0 }));
            }
            Op::Sum(x) => acc(x, RawTensor::full(x.shape().to_vec(), g.as_scalar())),
            Op::Mean(x) => {
                acc(x, RawTensor::full(x.shape().to_vec(), g.as_scalar() / x.value().len() as f64))
            }
            Op::NormalizeL2 { x, norm } => {
                let y = self.value();
                let ydotg = y.dot_flat(g);
                let dx = g.zip(y, |gv, yv| (gv - yv * ydotg) / norm);
                acc(x, dx);
            }
            Op::RmsNormChannels { x, gamma, eps } => {
                let (n, c, h, w) = dims4(x.shape());
                let plane = h * w;
                let xv = x.value().data();
                let gam = gamma.value().data();
                let mut dx = vec![0.0; xv.len()];
                let mut dgamma = vec![0.0; c];
                for b in 0..n {
                    for p in 0..plane {
                        let mut m = 0.0;
                        for ci in 0..c {
                            let v = xv[(b * c + ci) * plane + p];
                            m += v * v;
                        }
                        let r = 1.0 / (m / c as f64 + eps).sqrt();
                        let r3 = r * r * r;
                        let mut s = 0.0;
                        for ci in 0..c {
                            let i = (b * c + ci) * plane + p;
                            s += g.data()[i] * gam[ci] * xv[i];
                        }
                        for ci in 0..c {
                            let i = (b * c + ci) * plane + p;
                            dx[i] = r * gam[ci] * g.data()[i] - xv[i] * r3 * s / c as f64;
                            dgamma[ci] += g.data()[i] * xv[i] * r;
                        }
                    }
                }
                acc(x, RawTensor::new(x.shape().to_vec(), dx));
                if gamma.requires_grad() {
                    acc(gamma, RawTensor::new(vec![c], dgamma));
                }
            }
            Op::Permute { x, axes } => {
                let mut inv = vec![0usize; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                acc(x, g.permute(&inv));
            }
            Op::Reshape(x) => acc(x, g.reshape(x.shape().to_vec())),
            Op::IndexAxis0 { x, idx } => {
                let chunk = g.len();
                let mut dx = vec![0.0; x.value().len()];
                dx[idx * chunk..(idx + 1) * chunk].copy_from_slice(g.data());
                acc(x, RawTensor::new(x.shape().to_vec(), dx));
            }
            Op::SliceHw { x, y0, x0 } => {
                let (c, h, w) = dims3(x.shape());
                let (_, oh, ow) = dims3(g.shape());
                let mut dx = vec![0.0; c * h * w];
                for ci in 0..c {
                    for y in 0..oh {
                        let dst = ci * h * w + (y0 + y) * w + x0;
                        let src = ci * oh * ow + y * ow;
                        dx[dst..dst + ow].copy_from_slice(&g.data()[src..src + ow]);
                    }
                }
                acc(x, RawTensor::new(x.shape().to_vec(), dx));
            }
            Op::BilinearResize(x) => acc(x, RawTensor::bilinear_resize_grad(g, x.shape())),
            Op::StackScalars(parts) => {
                for (i, p) in parts.iter().enumerate() {
                    acc(p, RawTensor::scalar(g.data()[i]));
                }
            }
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn op_requires_grad(op: &Op) -> bool {
    match op {
        Op::Leaf => false,
        Op::Var => true,
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) | Op::Bmm(a, b) => {
            a.requires_grad() || b.requires_grad()
        }
        Op::AddRow { x, bias } | Op::AddChannel { x, bias } => {
            x.requires_grad() || bias.requires_grad()
        }
        Op::Conv2d { x, w, .. } => x.requires_grad() || w.requires_grad(),
        Op::RmsNormChannels { x, gamma, .. } => x.requires_grad() || gamma.requires_grad(),
        Op::Affine { x, .. }
        | Op::AvgPool2d { x, .. }
        | Op::UpsampleNearest { x, .. }
        | Op::NormalizeL2 { x, .. }
        | Op::Permute { x, .. }
        | Op::IndexAxis0 { x, .. }
        | Op::SliceHw { x, .. } => x.requires_grad(),
        Op::SoftmaxLast(x)
        | Op::Ln(x)
        | Op::Silu(x)
        | Op::Sigmoid(x)
        | Op::Clamp { x, .. }
        | Op::Sum(x)
        | Op::Mean(x)
        | Op::Reshape(x)
        | Op::BilinearResize(x) => x.requires_grad(),
        Op::StackScalars(parts) => parts.iter().any(|p| p.requires_grad()),
    }
}

fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((node, processed)) = stack.pop() {
        if processed {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        for p in node.parents() {
            if p.requires_grad() {
                stack.push((p, false));
            }
        }
    }
    order
}

/// Gradients keyed by tensor id.
pub struct Gradients {
    grads: HashMap<u64, RawTensor>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&RawTensor> {
        self.grads.get(&t.id())
    }

    /// Gradient of `t`, or zeros when no path reached it.
    pub fn get_or_zeros(&self, t: &Tensor) -> RawTensor {
        self.grads
            .get(&t.id())
            .cloned()
            .unwrap_or_else(|| RawTensor::zeros(t.shape().to_vec()))
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
