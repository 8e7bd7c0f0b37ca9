use std::borrow::Cow;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeometry, Layout};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Probability clamp applied inside [`Tape::bce`].
pub const BCE_EPS: f32 = 1e-7;

/// Smallest distance the sigmoid output keeps from 0 and 1 (one ulp below 1.0).
const SIGMOID_EPS: f32 = 5.960_464_5e-8;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Handle to a value recorded on a [`Tape`].
///
/// A handle is only valid on the tape that produced it, and only until that
/// tape is cleared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    tape: u64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Dense { x: usize, w: usize, b: usize },
    Conv2d { x: usize, k: usize, geom: ConvGeometry },
    ConvTranspose2d { z: usize, k: usize, geom: ConvGeometry },
    ChannelBias { x: usize, b: usize },
    Reshape { x: usize },
    LeakyRelu { x: usize, slope: f32 },
    Relu { x: usize },
    Tanh { x: usize },
    Sigmoid { x: usize },
    ChannelNorm(NormRecord),
    Bce { p: usize, target: f32 },
    L1Sum { a: usize, b: usize },
    Sum { x: usize },
    Scale { x: usize, factor: f32 },
    Add { a: usize, b: usize },
}

#[derive(Debug)]
struct NormRecord {
    x: usize,
    gamma: usize,
    beta: usize,
    mean: Vec<f32>,
    var: Vec<f32>,
    inv_std: Vec<f32>,
    /// Statistics were measured on the input (and so depend on it).
    batch_stats: bool,
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    requires_grad: bool,
    op: Op,
    grad: Option<Tensor>,
}

/// Ordered record of executed operations for reverse-mode differentiation.
///
/// Values may be owned or borrowed for `'a`, so frozen parameters can be
/// placed on the tape without copying them.
#[derive(Debug)]
pub struct Tape<'a> {
    id: u64,
    nodes: Vec<Node<'a>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            id: fresh_id(),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every recorded node. Handles issued before the call become stale.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.id = fresh_id();
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Record a borrowed tensor as a leaf.
    pub fn borrowed(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(value), requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.index(v)?].value)
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.nodes[self.index(v)?].requires_grad)
    }

    /// Gradient stored by the last backward pass, if `v` requires one.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        let i = self.index(v).ok()?;
        self.nodes[i].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        let i = self.index(v).ok()?;
        self.nodes[i].grad.take()
    }

    /// Per-channel `(mean, variance)` used by a `channel_norm` node.
    pub fn norm_stats(&self, v: Var) -> Option<(&[f32], &[f32])> {
        let i = self.index(v).ok()?;
        match &self.nodes[i].op {
            Op::ChannelNorm(rec) => Some((&rec.mean, &rec.var)),
            _ => None,
        }
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::contract("variable is not recorded on this tape"));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Cow<'a, Tensor>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Var {
            index: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    fn needs(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    /// `x·w + b` for `x: [N, I]`, `w: [I, O]`, `b: [O]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.index(x)?, self.index(w)?, self.index(b)?);
        let (xs, ws, bs) = (self.val(xi).shape(), self.val(wi).shape(), self.val(bi).shape());
        let (n, inner, outer) = match (xs, ws, bs) {
            (&[n, i], &[i2, o], &[o2]) if i == i2 && o == o2 => (n, i, o),
            _ => {
                return Err(Error::dim(format!(
                    "dense: input {xs:?}, weight {ws:?}, bias {bs:?} do not conform"
                )))
            }
        };
        let mut out = vec![0.0; n * outer];
        for row in out.chunks_exact_mut(outer) {
            row.copy_from_slice(self.val(bi).data());
        }
        kernels::gemm(
            n,
            inner,
            outer,
            self.val(xi).data(),
            Layout::Normal,
            self.val(wi).data(),
            Layout::Normal,
            1.0,
            &mut out,
        );
        let rg = self.needs(&[xi, wi, bi]);
        let t = Tensor::new(&[n, outer], out)?;
        Ok(self.push(Cow::Owned(t), rg, Op::Dense { x: xi, w: wi, b: bi }))
    }

    /// Strided, zero-padded 2-D correlation. `x: [N, C, H, W]`, `k: [F, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xi, ki) = (self.index(x)?, self.index(k)?);
        let [n, c, h, w] = self.val(xi).dims4()?;
        let [f, kc, kh, kw] = self.val(ki).dims4()?;
        if kc != c {
            return Err(Error::dim(format!(
                "conv2d: input {:?} has {c} channels, kernel {:?} expects {kc}",
                self.val(xi).shape(),
                self.val(ki).shape()
            )));
        }
        let geom = conv_geometry(c, h, w, kh, kw, stride, pad).map_err(|e| {
            Error::dim(format!(
                "conv2d: input {:?}, kernel {:?}, stride {stride}, pad {pad}: {e}",
                self.val(xi).shape(),
                self.val(ki).shape()
            ))
        })?;
        let out = kernels::conv2d_forward(self.val(xi).data(), n, self.val(ki).data(), f, &geom);
        let t = Tensor::new(&[n, f, geom.out_h, geom.out_w], out)?;
        let rg = self.needs(&[xi, ki]);
        Ok(self.push(Cow::Owned(t), rg, Op::Conv2d { x: xi, k: ki, geom }))
    }

    /// Transposed convolution, the adjoint of [`Tape::conv2d`] for the same kernel.
    /// `z: [N, C, H, W]`, `k: [C, F, kh, kw]`, output `[N, F, (H-1)·s - 2p + kh, ..]`.
    pub fn conv_transpose2d(&mut self, z: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (zi, ki) = (self.index(z)?, self.index(k)?);
        let [n, c, h, w] = self.val(zi).dims4()?;
        let [kc, f, kh, kw] = self.val(ki).dims4()?;
        let shapes = || format!("input {:?}, kernel {:?}", self.val(zi).shape(), self.val(ki).shape());
        if kc != c {
            return Err(Error::dim(format!("conv_transpose2d: channel mismatch, {}", shapes())));
        }
        if stride == 0 {
            return Err(Error::dim(format!(
                "conv_transpose2d: stride must be >= 1, {}",
                shapes()
            )));
        }
        let span = |len: usize, kern: usize| -> Option<usize> {
            let v = (len as isize - 1) * stride as isize - 2 * pad as isize + kern as isize;
            (len > 0 && v > 0).then_some(v as usize)
        };
        let (Some(oh), Some(ow)) = (span(h, kh), span(w, kw)) else {
            return Err(Error::dim(format!(
                "conv_transpose2d: stride {stride}, pad {pad} yield an empty output, {}",
                shapes()
            )));
        };
        let geom = ConvGeometry {
            channels: f,
            in_h: oh,
            in_w: ow,
            kh,
            kw,
            stride,
            pad,
            out_h: h,
            out_w: w,
        };
        let out = kernels::conv_transpose2d_forward(self.val(zi).data(), n, self.val(ki).data(), c, &geom);
        let t = Tensor::new(&[n, f, oh, ow], out)?;
        let rg = self.needs(&[zi, ki]);
        Ok(self.push(Cow::Owned(t), rg, Op::ConvTranspose2d { z: zi, k: ki, geom }))
    }

    /// Add `b[c]` to every element of channel `c` of an `[N, C, ...]` tensor.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xi, bi) = (self.index(x)?, self.index(b)?);
        let xs = self.val(xi).shape();
        let c = self.val(bi).len();
        if xs.len() < 2 || xs[1] != c || self.val(bi).shape().len() != 1 {
            return Err(Error::dim(format!(
                "add_channel_bias: input {:?}, bias {:?}",
                xs,
                self.val(bi).shape()
            )));
        }
        let plane: usize = xs[2..].iter().product();
        let mut out = self.val(xi).clone();
        let bias = self.val(bi).data();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bias[(i / plane) % c];
        }
        let rg = self.needs(&[xi, bi]);
        Ok(self.push(Cow::Owned(out), rg, Op::ChannelBias { x: xi, b: bi }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.index(x)?;
        let out = self.val(xi).clone().reshape(shape)?;
        let rg = self.needs(&[xi]);
        Ok(self.push(Cow::Owned(out), rg, Op::Reshape { x: xi }))
    }

    fn unary(&mut self, x: Var, op: impl Fn(usize) -> Op, f: impl Fn(f32) -> f32) -> Result<Var> {
        let xi = self.index(x)?;
        let src = self.val(xi);
        let out = Tensor::new(src.shape(), src.data().iter().map(|&v| f(v)).collect())?;
        let rg = self.needs(&[xi]);
        Ok(self.push(Cow::Owned(out), rg, op(xi)))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Result<Var> {
        self.unary(
            x,
            |x| Op::LeakyRelu { x, slope },
            |v| if v > 0.0 { v } else { slope * v },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |x| Op::Relu { x }, |v| v.max(0.0))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |x| Op::Tanh { x }, f32::tanh)
    }

    /// Logistic function. Outputs are kept strictly inside (0, 1).
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |x| Op::Sigmoid { x }, sigmoid)
    }

    /// Per-channel standardization over the N, H, W axes followed by
    /// `gamma[c]·x̂ + beta[c]`.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        self.norm(x, gamma, beta, eps, None)
    }

    /// Same affine normalization with externally supplied per-channel
    /// statistics (inference mode). The statistics are treated as constants.
    pub fn channel_norm_with_stats(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f32],
        var: &[f32],
        eps: f32,
    ) -> Result<Var> {
        self.norm(x, gamma, beta, eps, Some((mean, var)))
    }

    fn norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32, stats: Option<(&[f32], &[f32])>) -> Result<Var> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::contract(format!("channel_norm: eps must be > 0, got {eps}")));
        }
        let (xi, gi, bi) = (self.index(x)?, self.index(gamma)?, self.index(beta)?);
        let [n, c, h, w] = self.val(xi).dims4()?;
        if self.val(gi).shape() != [c] || self.val(bi).shape() != [c] {
            return Err(Error::dim(format!(
                "channel_norm: input {:?}, gamma {:?}, beta {:?}",
                self.val(xi).shape(),
                self.val(gi).shape(),
                self.val(bi).shape()
            )));
        }
        let plane = h * w;
        let xd = self.val(xi).data();
        let (mean, var) = match stats {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::dim(format!(
                        "channel_norm: {} channels but {} means and {} variances",
                        c,
                        m.len(),
                        v.len()
                    )));
                }
                (m.to_vec(), v.to_vec())
            }
            None => {
                let count = (n * plane) as f64;
                let mut mean = vec![0.0f32; c];
                let mut var = vec![0.0f32; c];
                for ch in 0..c {
                    let values = || (0..n).flat_map(move |s| &xd[(s * c + ch) * plane..(s * c + ch + 1) * plane]);
                    let mu = values().map(|&v| v as f64).sum::<f64>() / count;
                    let sq = values().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / count;
                    mean[ch] = mu as f32;
                    var[ch] = sq as f32;
                }
                (mean, var)
            }
        };
        let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.val(gi).data(), self.val(bi).data());
        let mut out = vec![0.0; xd.len()];
        for (i, (o, &v)) in out.iter_mut().zip(xd).enumerate() {
            let ch = (i / plane) % c;
            *o = g[ch] * (v - mean[ch]) * inv_std[ch] + b[ch];
        }
        let t = Tensor::new(&[n, c, h, w], out)?;
        let rg = self.needs(&[xi, gi, bi]);
        let rec = NormRecord {
            x: xi,
            gamma: gi,
            beta: bi,
            mean,
            var,
            inv_std,
            batch_stats: stats.is_none(),
        };
        Ok(self.push(Cow::Owned(t), rg, Op::ChannelNorm(rec)))
    }

    /// Mean binary cross-entropy of probabilities `p` against a constant
    /// target. Probabilities are clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce(&mut self, p: Var, target: f32) -> Result<Var> {
        let pi = self.index(p)?;
        let pd = self.val(pi).data();
        if pd.is_empty() {
            return Err(Error::dim("bce: empty input"));
        }
        let t = target as f64;
        let total: f64 = pd
            .iter()
            .map(|&v| {
                let pc = clamp_prob(v) as f64;
                -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln())
            })
            .sum();
        let loss = (total / pd.len() as f64) as f32;
        let rg = self.needs(&[pi]);
        Ok(self.push(Cow::Owned(Tensor::scalar(loss)), rg, Op::Bce { p: pi, target }))
    }

    /// `Σ |a - b|` over all elements.
    pub fn l1_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        if self.val(ai).shape() != self.val(bi).shape() {
            return Err(Error::dim(format!(
                "l1_sum: shapes {:?} and {:?} differ",
                self.val(ai).shape(),
                self.val(bi).shape()
            )));
        }
        let total: f64 = self
            .val(ai)
            .data()
            .iter()
            .zip(self.val(bi).data())
            .map(|(&x, &y)| (x - y).abs() as f64)
            .sum();
        let rg = self.needs(&[ai, bi]);
        Ok(self.push(Cow::Owned(Tensor::scalar(total as f32)), rg, Op::L1Sum { a: ai, b: bi }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let total: f64 = self.val(xi).data().iter().map(|&v| v as f64).sum();
        let rg = self.needs(&[xi]);
        Ok(self.push(Cow::Owned(Tensor::scalar(total as f32)), rg, Op::Sum { x: xi }))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Result<Var> {
        self.unary(x, |x| Op::Scale { x, factor }, |v| v * factor)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let (av, bv) = (self.val(ai), self.val(bi));
        if av.shape() != bv.shape() {
            return Err(Error::dim(format!(
                "add: shapes {:?} and {:?} differ",
                av.shape(),
                bv.shape()
            )));
        }
        let out = Tensor::new(
            av.shape(),
            av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect(),
        )?;
        let rg = self.needs(&[ai, bi]);
        Ok(self.push(Cow::Owned(out), rg, Op::Add { a: ai, b: bi }))
    }

    /// Reverse pass from a scalar loss. Every node that requires a gradient
    /// receives one (zeros when the loss does not depend on it); previous
    /// gradients are replaced.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() || loss.tape != self.id || loss.index >= self.nodes.len() {
            return Err(Error::EmptyTape);
        }
        let value = &self.nodes[loss.index].value;
        if value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                value.shape()
            )));
        }
        self.backward_from(loss, Tensor::new(value.shape(), vec![1.0])?)
    }

    /// Reverse pass seeded with an explicit upstream gradient for `output`.
    pub fn backward_from(&mut self, output: Var, seed: Tensor) -> Result<()> {
        if self.nodes.is_empty() || output.tape != self.id || output.index >= self.nodes.len() {
            return Err(Error::EmptyTape);
        }
        let root = output.index;
        if seed.shape() != self.nodes[root].value.shape() {
            return Err(Error::dim(format!(
                "backward seed {:?} does not match output {:?}",
                seed.shape(),
                self.nodes[root].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; root + 1];
        grads[root] = Some(seed.into_data());
        for i in (0..=root).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            node.grad = None;
            if node.requires_grad {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                node.grad = Some(Tensor::new(node.value.shape(), g)?);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let rg = |j: usize| self.nodes[j].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let &[n, inner] = self.val(x).shape() else {
                    unreachable!()
                };
                let outer = self.val(b).len();
                if rg(x) {
                    let mut dx = vec![0.0; n * inner];
                    kernels::gemm(
                        n,
                        outer,
                        inner,
                        g,
                        Layout::Normal,
                        self.val(w).data(),
                        Layout::Transposed,
                        0.0,
                        &mut dx,
                    );
                    add_into(grads, x, &dx);
                }
                if rg(w) {
                    let mut dw = vec![0.0; inner * outer];
                    kernels::gemm(
                        inner,
                        n,
                        outer,
                        self.val(x).data(),
                        Layout::Transposed,
                        g,
                        Layout::Normal,
                        0.0,
                        &mut dw,
                    );
                    add_into(grads, w, &dw);
                }
                if rg(b) {
                    let mut db = vec![0.0; outer];
                    for row in g.chunks_exact(outer) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    add_into(grads, b, &db);
                }
            }
            Op::Conv2d { x, k, geom } => {
                let (x, k) = (*x, *k);
                let xv = self.val(x);
                let kv = self.val(k);
                let n = xv.shape()[0];
                let f = kv.shape()[0];
                let mut dx = rg(x).then(|| vec![0.0; xv.len()]);
                let mut dk = rg(k).then(|| vec![0.0; kv.len()]);
                kernels::conv2d_backward(
                    xv.data(),
                    n,
                    kv.data(),
                    f,
                    geom,
                    g,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    add_into(grads, x, &dx);
                }
                if let Some(dk) = dk {
                    add_into(grads, k, &dk);
                }
            }
            Op::ConvTranspose2d { z, k, geom } => {
                let (z, k) = (*z, *k);
                let zv = self.val(z);
                let kv = self.val(k);
                let n = zv.shape()[0];
                let c = zv.shape()[1];
                let mut dz = rg(z).then(|| vec![0.0; zv.len()]);
                let mut dk = rg(k).then(|| vec![0.0; kv.len()]);
                kernels::conv_transpose2d_backward(
                    zv.data(),
                    n,
                    kv.data(),
                    c,
                    geom,
                    g,
                    dz.as_deref_mut(),
                    dk.as_deref_mut(),
                );
                if let Some(dz) = dz {
                    add_into(grads, z, &dz);
                }
                if let Some(dk) = dk {
                    add_into(grads, k, &dk);
                }
            }
            Op::ChannelBias { x, b } => {
                let (x, b) = (*x, *b);
                if rg(x) {
                    add_into(grads, x, g);
                }
                if rg(b) {
                    let shape = self.val(x).shape();
                    let c = shape[1];
                    let plane: usize = shape[2..].iter().product();
                    let mut db = vec![0.0; c];
                    for (idx, v) in g.iter().enumerate() {
                        db[(idx / plane) % c] += v;
                    }
                    add_into(grads, b, &db);
                }
            }
            Op::Reshape { x } => add_into(grads, *x, g),
            Op::LeakyRelu { x, slope } => {
                let xd = self.val(*x).data();
                let d: Vec<f32> = g
                    .iter()
                    .zip(xd)
                    .map(|(&g, &v)| if v > 0.0 { g } else { g * slope })
                    .collect();
                add_into(grads, *x, &d);
            }
            Op::Relu { x } => {
                let xd = self.val(*x).data();
                let d: Vec<f32> = g.iter().zip(xd).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }).collect();
                add_into(grads, *x, &d);
            }
            Op::Tanh { x } => {
                let d: Vec<f32> = g.iter().zip(out).map(|(&g, &y)| g * (1.0 - y * y)).collect();
                add_into(grads, *x, &d);
            }
            Op::Sigmoid { x } => {
                let d: Vec<f32> = g.iter().zip(out).map(|(&g, &y)| g * y * (1.0 - y)).collect();
                add_into(grads, *x, &d);
            }
            Op::ChannelNorm(rec) => self.norm_backward(rec, g, grads),
            Op::Bce { p, target } => {
                let pd = self.val(*p).data();
                let inv_n = 1.0 / pd.len() as f64;
                let t = *target as f64;
                let up = g[0] as f64;
                let d: Vec<f32> = pd
                    .iter()
                    .map(|&v| {
                        let pc = clamp_prob(v) as f64;
                        (up * inv_n * (-t / pc + (1.0 - t) / (1.0 - pc))) as f32
                    })
                    .collect();
                add_into(grads, *p, &d);
            }
            Op::L1Sum { a, b } => {
                let (a, b) = (*a, *b);
                let up = g[0];
                let signs: Vec<f32> = self
                    .val(a)
                    .data()
                    .iter()
                    .zip(self.val(b).data())
                    .map(|(&x, &y)| up * sign(x - y))
                    .collect();
                if rg(a) {
                    add_into(grads, a, &signs);
                }
                if rg(b) {
                    let neg: Vec<f32> = signs.iter().map(|v| -v).collect();
                    add_into(grads, b, &neg);
                }
            }
            Op::Sum { x } => {
                let d = vec![g[0]; self.val(*x).len()];
                add_into(grads, *x, &d);
            }
            Op::Scale { x, factor } => {
                let d: Vec<f32> = g.iter().map(|v| v * factor).collect();
                add_into(grads, *x, &d);
            }
            Op::Add { a, b } => {
                if rg(*a) {
                    add_into(grads, *a, g);
                }
                if rg(*b) {
                    add_into(grads, *b, g);
                }
            }
        }
    }

    fn norm_backward(&self, rec: &NormRecord, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let xv = self.val(rec.x);
        let [n, c, h, w] = xv.dims4().expect("rank checked in forward");
        let plane = h * w;
        let xd = xv.data();
        let gamma = self.val(rec.gamma).data();
        let count = (n * plane) as f64;
        let mut dgamma = vec![0.0f64; c];
        let mut dbeta = vec![0.0f64; c];
        let idx = |s: usize, ch: usize| (s * c + ch) * plane..(s * c + ch + 1) * plane;
        for ch in 0..c {
            for s in 0..n {
                for (&gv, &xvv) in g[idx(s, ch)].iter().zip(&xd[idx(s, ch)]) {
                    let xhat = ((xvv - rec.mean[ch]) * rec.inv_std[ch]) as f64;
                    dgamma[ch] += gv as f64 * xhat;
                    dbeta[ch] += gv as f64;
                }
            }
        }
        if self.nodes[rec.x].requires_grad {
            let mut dx = vec![0.0f32; xd.len()];
            for ch in 0..c {
                let scale = gamma[ch] * rec.inv_std[ch];
                if rec.batch_stats {
                    // dxhat = g·gamma; sums of dxhat and dxhat·xhat over the channel.
                    let sum_d = dbeta[ch] * gamma[ch] as f64;
                    let sum_dx = dgamma[ch] * gamma[ch] as f64;
                    for s in 0..n {
                        for ((d, &gv), &xvv) in dx[idx(s, ch)].iter_mut().zip(&g[idx(s, ch)]).zip(&xd[idx(s, ch)]) {
                            let xhat = ((xvv - rec.mean[ch]) * rec.inv_std[ch]) as f64;
                            let dxhat = (gv * gamma[ch]) as f64;
                            *d = (rec.inv_std[ch] as f64 * (dxhat - sum_d / count - xhat * sum_dx / count)) as f32;
                        }
                    }
                } else {
                    for s in 0..n {
                        for (d, &gv) in dx[idx(s, ch)].iter_mut().zip(&g[idx(s, ch)]) {
                            *d = gv * scale;
                        }
                    }
                }
            }
            add_into(grads, rec.x, &dx);
        }
        if self.nodes[rec.gamma].requires_grad {
            let d: Vec<f32> = dgamma.iter().map(|&v| v as f32).collect();
            add_into(grads, rec.gamma, &d);
        }
        if self.nodes[rec.beta].requires_grad {
            let d: Vec<f32> = dbeta.iter().map(|&v| v as f32).collect();
            add_into(grads, rec.beta, &d);
        }
    }
}

fn add_into(grads: &mut [Option<Vec<f32>>], j: usize, d: &[f32]) {
    match &mut grads[j] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(d) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(d.to_vec()),
    }
}

/// Subgradient of `|v|` with `sign(0) = 0`.
fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn clamp_prob(p: f32) -> f32 {
    p.clamp(BCE_EPS, 1.0 - BCE_EPS)
}

fn sigmoid(v: f32) -> f32 {
    let s = if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    };
    s.clamp(SIGMOID_EPS, 1.0 - SIGMOID_EPS)
}

fn conv_geometry(
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<ConvGeometry, String> {
    if stride == 0 {
        return Err("stride must be >= 1".into());
    }
    let out = |len: usize, k: usize| -> Result<usize, String> {
        let padded = len + 2 * pad;
        if k == 0 || k > padded {
            return Err(format!("kernel extent {k} exceeds padded extent {padded}"));
        }
        if (padded - k) % stride != 0 {
            return Err(format!(
                "padded extent {padded} minus kernel {k} is not divisible by stride {stride}"
            ));
        }
        Ok((padded - k) / stride + 1)
    };
    Ok(ConvGeometry {
        channels: c,
        in_h: h,
        in_w: w,
        kh,
        kw,
        stride,
        pad,
        out_h: out(h, kh)?,
        out_w: out(w, kw)?,
    })
}
