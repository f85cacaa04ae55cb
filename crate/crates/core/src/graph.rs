//! Minimal deterministic reverse-mode autodiff.
//!
//! A [`ComputeGraph`] is a define-by-run tape: every operation appends a node
//! holding its output tensor, its input handles, and enough context to apply
//! the backward rule. Creation order is a topological order, so the backward
//! pass is a single reverse sweep that visits each node exactly once.
//! Everything is single-threaded and allocation-order deterministic.

use crate::error::{Error, Result};
use crate::kernels;
use crate::quant::QuantSpec;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`ComputeGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnKind {
    Neg,
    Abs,
    Relu,
    Exp,
    Log,
    Square,
    Softplus,
    Erf,
}

enum Op<T: Scalar> {
    Leaf,
    Constant,
    Bin { kind: BinKind, a: Var, b: Var },
    /// rhs is a per-channel vector broadcast over axis 1 of lhs.
    BinChan { kind: BinKind, a: Var, b: Var },
    Un { kind: UnKind, x: Var },
    AddScalar { x: Var },
    MulScalar { x: Var, c: T },
    /// Clamp to [lo, hi]. `open` selects the ClippedReLU-style gradient mask
    /// (pass on the open interval); closed masks pass on [lo, hi].
    Clip { x: Var, lo: T, hi: T, open: bool },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    ConvT2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Reduce { x: Var, mean: bool, axes: Vec<usize> },
    FakeQuant { x: Var, spec: QuantSpec<T> },
    /// Round onto a fixed per-channel grid (no clamping); identity gradient.
    /// Used to fold biases onto integer accumulator grids.
    GridRound { x: Var },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Reverse-mode tape over [`Tensor`] values.
pub struct ComputeGraph<T: Scalar> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for ComputeGraph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ComputeGraph<T> {
    pub fn new() -> Self {
        ComputeGraph { nodes: Vec::new(), backward_done: false }
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Register a differentiable leaf (its `requires_grad` flag is honored).
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        let rg = t.requires_grad;
        self.push(t.clone(), rg, Op::Leaf)
    }

    /// Register a non-differentiable constant.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, false, Op::Constant)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient buffer of `v` if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- elementwise binary ----

    fn bin(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let (la, lb) = (self.value(a), self.value(b));
        let info = kernels::broadcast_info(bin_name(kind), la.shape(), lb.shape())?;
        let out = match info {
            None => {
                let mut data = Vec::with_capacity(la.numel());
                for (i, (&x, &y)) in la.data().iter().zip(lb.data()).enumerate() {
                    data.push(apply_bin(kind, x, y, i)?);
                }
                Tensor::new(la.shape().to_vec(), data)?
            }
            Some((c, inner)) => {
                let rhs = lb.data();
                let mut data = Vec::with_capacity(la.numel());
                for (i, &x) in la.data().iter().enumerate() {
                    data.push(apply_bin(kind, x, rhs[kernels::chan_of(i, c, inner)], i)?);
                }
                Tensor::new(la.shape().to_vec(), data)?
            }
        };
        let rg = self.rg(a) || self.rg(b);
        let op = match info {
            None => Op::Bin { kind, a, b },
            Some(_) => Op::BinChan { kind, a, b },
        };
        Ok(self.push(out, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Mul, a, b)
    }

    /// Elementwise division; denominators with |d| < 1e-12 are rejected.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Div, a, b)
    }

    // ---- elementwise unary ----

    fn un(&mut self, kind: UnKind, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut data = Vec::with_capacity(xv.numel());
        for (i, &v) in xv.data().iter().enumerate() {
            data.push(apply_un(kind, v, i)?);
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Un { kind, x }))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.un(UnKind::Neg, x)
    }

    /// |x|; the subgradient at 0 is defined as 0.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.un(UnKind::Abs, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.un(UnKind::Relu, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.un(UnKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.un(UnKind::Log, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.un(UnKind::Square, x)
    }

    /// ln(1 + e^x), evaluated stably; gradient is the logistic sigmoid.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.un(UnKind::Softplus, x)
    }

    pub fn erf(&mut self, x: Var) -> Result<Var> {
        self.un(UnKind::Erf, x)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::AddScalar { x }))
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::MulScalar { x, c }))
    }

    /// max(lo, min(x, hi)); gradient passes on the closed interval [lo, hi].
    pub fn clip(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        if !(lo < hi) {
            return Err(Error::invalid(format!("clip bounds lo {} >= hi {}", lo, hi)));
        }
        let out = self.value(x).map(|v| clamp(v, lo, hi));
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Clip { x, lo, hi, open: false }))
    }

    /// max(0, min(x, theta)); gradient 1 on the open interval (0, theta).
    /// `theta = +inf` degrades to plain ReLU.
    pub fn clipped_relu(&mut self, x: Var, theta: T) -> Result<Var> {
        if !(theta > T::zero()) {
            return Err(Error::invalid(format!("clipped_relu theta {} must be > 0", theta)));
        }
        let out = self.value(x).map(|v| clamp(v, T::zero(), theta));
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Clip { x, lo: T::zero(), hi: theta, open: true }))
    }

    // ---- structured ops ----

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::conv2d(self.value(x), self.value(w), self.value(b), stride, pad)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, rg, Op::Conv2d { x, w, b, stride, pad }))
    }

    pub fn conv2d_transpose(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::conv2d_transpose(self.value(x), self.value(w), self.value(b), stride, pad)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, rg, Op::ConvT2d { x, w, b, stride, pad }))
    }

    pub fn reduce_sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let out = kernels::reduce(self.value(x), false, axes)?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Reduce { x, mean: false, axes: axes.to_vec() }))
    }

    pub fn reduce_mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let out = kernels::reduce(self.value(x), true, axes)?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Reduce { x, mean: true, axes: axes.to_vec() }))
    }

    /// Sum over all axes, yielding a scalar node.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).shape().len()).collect();
        self.reduce_sum(x, &axes)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).shape().len()).collect();
        self.reduce_mean(x, &axes)
    }

    /// Fake quantization with the clipped straight-through estimator:
    /// forward is dequantize(quantize(x)); the gradient is the upstream
    /// gradient masked by the indicator of [clip_lo, clip_hi].
    pub fn fake_quant(&mut self, x: Var, spec: QuantSpec<T>) -> Result<Var> {
        let out = spec.fake_apply(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::FakeQuant { x, spec }))
    }

    /// Round onto per-channel grids `scales` without clamping (identity STE).
    pub fn grid_round(&mut self, x: Var, scales: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if scales.len() != xv.numel() && scales.len() != 1 {
            return Err(Error::shape(
                "grid_round",
                format!("{} scales for {} elements", scales.len(), xv.numel()),
            ));
        }
        let data: Vec<T> = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let s = scales[if scales.len() == 1 { 0 } else { i }];
                s * T::of(crate::scalar::round_half_even(v.to64() / s.to64()))
            })
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::GridRound { x }))
    }

    // ---- backward ----

    /// Populate gradients of everything reachable from `loss`, which must be
    /// scalar. A second call without rebuilding the graph is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph(
                "backward already ran on this graph; rebuild the forward pass first".into(),
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = self.nodes[i].grad.take().expect("checked above");
            self.propagate(i, &g)?;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn ensure_grad(&mut self, v: Var) {
        if self.nodes[v.0].grad.is_none() {
            let n = self.nodes[v.0].value.numel();
            self.nodes[v.0].grad = Some(vec![T::zero(); n]);
        }
    }

    fn add_grad(&mut self, v: Var, contrib: &[T]) {
        if !self.rg(v) {
            return;
        }
        self.ensure_grad(v);
        let g = self.nodes[v.0].grad.as_mut().expect("just ensured");
        for (gi, &c) in g.iter_mut().zip(contrib) {
            *gi = *gi + c;
        }
    }

    fn propagate(&mut self, idx: usize, g: &[T]) -> Result<()> {
        // Take the op apart immutably first; contributions are buffered and
        // applied after to keep the borrow checker happy and the order fixed.
        enum Contrib<T> {
            Dense(Var, Vec<T>),
        }
        let mut out: Vec<Contrib<T>> = Vec::new();
        match &self.nodes[idx].op {
            Op::Leaf | Op::Constant => {}
            Op::Bin { kind, a, b } => {
                let (a, b, kind) = (*a, *b, *kind);
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                if self.rg(a) {
                    let da: Vec<T> = match kind {
                        BinKind::Add | BinKind::Sub => g.to_vec(),
                        BinKind::Mul => g.iter().zip(bv).map(|(&gi, &y)| gi * y).collect(),
                        BinKind::Div => g.iter().zip(bv).map(|(&gi, &y)| gi / y).collect(),
                    };
                    out.push(Contrib::Dense(a, da));
                }
                if self.rg(b) {
                    let db: Vec<T> = match kind {
                        BinKind::Add => g.to_vec(),
                        BinKind::Sub => g.iter().map(|&gi| -gi).collect(),
                        BinKind::Mul => g.iter().zip(av).map(|(&gi, &x)| gi * x).collect(),
                        BinKind::Div => g
                            .iter()
                            .zip(av.iter().zip(bv))
                            .map(|(&gi, (&x, &y))| -gi * x / (y * y))
                            .collect(),
                    };
                    out.push(Contrib::Dense(b, db));
                }
            }
            Op::BinChan { kind, a, b } => {
                let (a, b, kind) = (*a, *b, *kind);
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let c = bv.len();
                let inner: usize = self.nodes[a.0].value.shape()[2..].iter().product();
                if self.rg(a) {
                    let da: Vec<T> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| {
                            let y = bv[kernels::chan_of(i, c, inner)];
                            match kind {
                                BinKind::Add | BinKind::Sub => gi,
                                BinKind::Mul => gi * y,
                                BinKind::Div => gi / y,
                            }
                        })
                        .collect();
                    out.push(Contrib::Dense(a, da));
                }
                if self.rg(b) {
                    // accumulate in f64 for deterministic, stable reduction
                    let mut db = vec![0.0f64; c];
                    for (i, &gi) in g.iter().enumerate() {
                        let ch = kernels::chan_of(i, c, inner);
                        let y = bv[ch];
                        let x = av[i];
                        let v = match kind {
                            BinKind::Add => gi,
                            BinKind::Sub => -gi,
                            BinKind::Mul => gi * x,
                            BinKind::Div => -gi * x / (y * y),
                        };
                        db[ch] += v.to64();
                    }
                    out.push(Contrib::Dense(b, db.into_iter().map(T::of).collect()));
                }
            }
            Op::Un { kind, x } => {
                let (x, kind) = (*x, *kind);
                if self.rg(x) {
                    let xv = self.nodes[x.0].value.data();
                    let yv = self.nodes[idx].value.data();
                    let dx: Vec<T> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| {
                            let v = xv[i];
                            match kind {
                                UnKind::Neg => -gi,
                                UnKind::Abs => {
                                    if v > T::zero() {
                                        gi
                                    } else if v < T::zero() {
                                        -gi
                                    } else {
                                        T::zero()
                                    }
                                }
                                UnKind::Relu => {
                                    if v > T::zero() {
                                        gi
                                    } else {
                                        T::zero()
                                    }
                                }
                                UnKind::Exp => gi * yv[i],
                                UnKind::Log => gi / v,
                                UnKind::Square => gi * (v + v),
                                UnKind::Softplus => {
                                    // sigmoid(x), stable in both tails
                                    let s = T::of(1.0 / (1.0 + (-v.to64()).exp()));
                                    gi * s
                                }
                                UnKind::Erf => {
                                    let d = 2.0 / std::f64::consts::PI.sqrt()
                                        * (-v.to64() * v.to64()).exp();
                                    gi * T::of(d)
                                }
                            }
                        })
                        .collect();
                    out.push(Contrib::Dense(x, dx));
                }
            }
            Op::AddScalar { x } => {
                let x = *x;
                if self.rg(x) {
                    out.push(Contrib::Dense(x, g.to_vec()));
                }
            }
            Op::MulScalar { x, c } => {
                let (x, c) = (*x, *c);
                if self.rg(x) {
                    out.push(Contrib::Dense(x, g.iter().map(|&gi| gi * c).collect()));
                }
            }
            Op::Clip { x, lo, hi, open } => {
                let (x, lo, hi, open) = (*x, *lo, *hi, *open);
                if self.rg(x) {
                    let xv = self.nodes[x.0].value.data();
                    let dx: Vec<T> = g
                        .iter()
                        .zip(xv)
                        .map(|(&gi, &v)| {
                            let inside = if open { v > lo && v < hi } else { v >= lo && v <= hi };
                            if inside {
                                gi
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    out.push(Contrib::Dense(x, dx));
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let mut dx = if self.rg(x) { Some(vec![T::zero(); xv.numel()]) } else { None };
                let mut dw = if self.rg(w) { Some(vec![T::zero(); wv.numel()]) } else { None };
                let mut db =
                    if self.rg(b) { Some(vec![T::zero(); self.nodes[b.0].value.numel()]) } else { None };
                kernels::conv2d_backward(
                    xv,
                    wv,
                    g,
                    stride,
                    pad,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    out.push(Contrib::Dense(x, dx));
                }
                if let Some(dw) = dw {
                    out.push(Contrib::Dense(w, dw));
                }
                if let Some(db) = db {
                    out.push(Contrib::Dense(b, db));
                }
            }
            Op::ConvT2d { x, w, b, stride, pad } => {
                let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let mut dx = if self.rg(x) { Some(vec![T::zero(); xv.numel()]) } else { None };
                let mut dw = if self.rg(w) { Some(vec![T::zero(); wv.numel()]) } else { None };
                let mut db =
                    if self.rg(b) { Some(vec![T::zero(); self.nodes[b.0].value.numel()]) } else { None };
                kernels::conv2d_transpose_backward(
                    xv,
                    wv,
                    g,
                    stride,
                    pad,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    out.push(Contrib::Dense(x, dx));
                }
                if let Some(dw) = dw {
                    out.push(Contrib::Dense(w, dw));
                }
                if let Some(db) = db {
                    out.push(Contrib::Dense(b, db));
                }
            }
            Op::Reduce { x, mean, axes } => {
                let (x, mean) = (*x, *mean);
                let axes = axes.clone();
                if self.rg(x) {
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    let mut reduced = vec![false; shape.len()];
                    for &a in &axes {
                        reduced[a] = true;
                    }
                    let count: usize = shape
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| reduced[*i])
                        .map(|(_, &s)| s)
                        .product::<usize>()
                        .max(1);
                    let inv = T::of(1.0 / count as f64);
                    let mut out_strides = vec![0usize; shape.len()];
                    let mut s = 1usize;
                    for i in (0..shape.len()).rev() {
                        if !reduced[i] {
                            out_strides[i] = s;
                            s *= shape[i];
                        }
                    }
                    let n: usize = shape.iter().product();
                    let mut dx = vec![T::zero(); n];
                    let mut coords = vec![0usize; shape.len()];
                    for item in dx.iter_mut() {
                        let mut oi = 0usize;
                        for (i, &c) in coords.iter().enumerate() {
                            if !reduced[i] {
                                oi += c * out_strides[i];
                            }
                        }
                        let gi = g[oi];
                        *item = if mean { gi * inv } else { gi };
                        for i in (0..shape.len()).rev() {
                            coords[i] += 1;
                            if coords[i] < shape[i] {
                                break;
                            }
                            coords[i] = 0;
                        }
                    }
                    out.push(Contrib::Dense(x, dx));
                }
            }
            Op::FakeQuant { x, spec } => {
                let x = *x;
                let spec = spec.clone();
                if self.rg(x) {
                    let xv = &self.nodes[x.0].value;
                    let shape = xv.shape().to_vec();
                    let dx: Vec<T> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| {
                            if spec.ste_mask(i, &shape, xv.data()[i]) {
                                gi
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    out.push(Contrib::Dense(x, dx));
                }
            }
            Op::GridRound { x } => {
                let x = *x;
                if self.rg(x) {
                    out.push(Contrib::Dense(x, g.to_vec()));
                }
            }
        }
        for c in out {
            match c {
                Contrib::Dense(v, d) => self.add_grad(v, &d),
            }
        }
        Ok(())
    }
}

fn bin_name(kind: BinKind) -> &'static str {
    match kind {
        BinKind::Add => "add",
        BinKind::Sub => "sub",
        BinKind::Mul => "mul",
        BinKind::Div => "div",
    }
}

fn apply_bin<T: Scalar>(kind: BinKind, x: T, y: T, idx: usize) -> Result<T> {
    Ok(match kind {
        BinKind::Add => x + y,
        BinKind::Sub => x - y,
        BinKind::Mul => x * y,
        BinKind::Div => {
            if y.to64().abs() < kernels::DIV_FLOOR {
                return Err(Error::Numeric {
                    op: "div",
                    detail: format!("denominator underflow (|d| < 1e-12) at index {}", idx),
                });
            }
            x / y
        }
    })
}

fn apply_un<T: Scalar>(kind: UnKind, v: T, idx: usize) -> Result<T> {
    Ok(match kind {
        UnKind::Neg => -v,
        UnKind::Abs => v.abs(),
        UnKind::Relu => {
            if v > T::zero() {
                v
            } else {
                T::zero()
            }
        }
        UnKind::Exp => v.exp(),
        UnKind::Log => {
            if !(v.to64() > 0.0) {
                return Err(Error::Numeric {
                    op: "log",
                    detail: format!("non-positive argument {} at index {}", v, idx),
                });
            }
            v.ln()
        }
        UnKind::Square => v * v,
        UnKind::Softplus => {
            let x = v.to64();
            T::of(x.max(0.0) + (-x.abs()).exp().ln_1p())
        }
        UnKind::Erf => T::of(crate::codec::entropy::erf(v.to64())),
    })
}

fn clamp<T: Scalar>(v: T, lo: T, hi: T) -> T {
    if v < lo {
        lo
    } else if v > hi {
        hi
    } else {
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = ComputeGraph::new();
        let x = g.leaf(&t(&[3], &[1.0, 2.0, 3.0]).with_grad());
        let loss = g.sum_all(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = ComputeGraph::new();
        let x = g.leaf(&t(&[2], &[1.0, -2.0]).with_grad());
        let sq = g.square(x).unwrap();
        let loss = g.sum_all(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0]);
    }

    #[test]
    fn backward_twice_errors() {
        let mut g = ComputeGraph::new();
        let x = g.leaf(&t(&[1], &[2.0]).with_grad());
        let loss = g.sum_all(x).unwrap();
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::Graph(_))));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = ComputeGraph::new();
        let x = g.leaf(&t(&[2], &[1.0, 2.0]).with_grad());
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn clip_examples() {
        let mut g = ComputeGraph::new();
        let x = g.leaf(&t(&[3], &[-2.0, 0.5, 9.0]));
        let y = g.clip(x, 0.0, 1.0).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn clipped_relu_gradient_mask() {
        let mut g = ComputeGraph::new();
        let x = g.leaf(&t(&[3], &[-1.0, 0.5, 2.0]).with_grad());
        let y = g.clipped_relu(x, 1.0).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.5, 1.0]);
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn clipped_relu_infinite_theta_is_relu() {
        let mut g = ComputeGraph::new();
        let x = g.leaf(&t(&[3], &[-1.0, 0.5, 9.0]));
        let y = g.clipped_relu(x, f64::INFINITY).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.5, 9.0]);
    }

    #[test]
    fn div_guard_trips() {
        let mut g = ComputeGraph::new();
        let a = g.leaf(&t(&[2], &[1.0, 2.0]));
        let b = g.leaf(&t(&[2], &[4.0, 1e-13]));
        let err = g.div(a, b).unwrap_err();
        let msg = format!("{}", err);
        assert!(msg.contains("div") && msg.contains("index 1"), "{}", msg);
    }

    #[test]
    fn div_hand_arithmetic() {
        let mut g = ComputeGraph::new();
        let a = g.leaf(&t(&[2], &[1.0, 2.0]));
        let b = g.leaf(&t(&[2], &[4.0, 8.0]));
        let y = g.div(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[0.25, 0.25]);
    }

    #[test]
    fn per_channel_broadcast_mul() {
        let mut g = ComputeGraph::new();
        // [1, 2, 2, 1] times channel vector [10, 100]
        let x = g.leaf(&t(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]).with_grad());
        let v = g.leaf(&t(&[2], &[10.0, 100.0]).with_grad());
        let y = g.mul(x, v).unwrap();
        assert_eq!(g.value(y).data(), &[10.0, 20.0, 300.0, 400.0]);
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[10.0, 10.0, 100.0, 100.0]);
        assert_eq!(g.grad(v).unwrap(), &[3.0, 7.0]); // sums of x per channel
    }

    #[test]
    fn fake_quant_ste_contract() {
        use crate::quant::{QuantSpec, Signedness};
        let spec = QuantSpec::<f64>::make_spec(-1.0, 1.0, 8, Signedness::Signed).unwrap();
        let hi = spec.clip_hi(0);
        let mut g = ComputeGraph::new();
        let x = g.leaf(&t(&[2], &[0.4, hi + 1.0]).with_grad());
        let y = g.fake_quant(x, spec.clone()).unwrap();
        // out-of-range input clamps to the top of the grid
        assert!((g.value(y).data()[1] - hi).abs() < 1e-12);
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(x).unwrap();
        assert_eq!(grad[0], 1.0); // inside: pass-through
        assert_eq!(grad[1], 0.0); // outside: blocked
    }

    #[test]
    fn fake_quant_idempotent_and_on_grid() {
        use crate::quant::{QuantSpec, Signedness};
        let spec = QuantSpec::<f64>::make_spec(-2.0, 2.0, 6, Signedness::Signed).unwrap();
        let mut rng = crate::rng::Rng::new(4);
        let data: Vec<f64> = (0..64).map(|_| rng.uniform(-3.0, 3.0)).collect();
        let mut g = ComputeGraph::new();
        let x = g.leaf(&t(&[64], &data));
        let y = g.fake_quant(x, spec.clone()).unwrap();
        let z = g.fake_quant(y, spec.clone()).unwrap();
        assert_eq!(g.value(y).data(), g.value(z).data());
        let scale = spec.scales()[0];
        for &v in g.value(y).data() {
            let q = v / scale;
            assert!((q - q.round()).abs() < 1e-9);
        }
    }

    #[test]
    fn wide_16_bit_grid_is_nearly_identity() {
        use crate::quant::{QuantSpec, Signedness};
        let spec = QuantSpec::<f64>::make_spec(-8.0, 8.0, 16, Signedness::Signed).unwrap();
        let scale = spec.scales()[0];
        let mut rng = crate::rng::Rng::new(8);
        let data: Vec<f64> = (0..256).map(|_| rng.uniform(-7.0, 7.0)).collect();
        let mut g = ComputeGraph::new();
        let x = g.leaf(&t(&[256], &data));
        let y = g.fake_quant(x, spec).unwrap();
        for (a, b) in data.iter().zip(g.value(y).data()) {
            assert!((a - b).abs() <= scale / 2.0 + 1e-15);
        }
    }

    #[test]
    fn grid_round_is_identity_gradient() {
        let mut g = ComputeGraph::new();
        let x = g.leaf(&t(&[2], &[0.123, -4.56]).with_grad());
        let y = g.grid_round(x, vec![0.25]).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, -4.5]);
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
    }
}
