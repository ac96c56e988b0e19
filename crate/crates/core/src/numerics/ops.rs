//! Differentiable operations over [`Var`].
//!
//! Shapes must match exactly. The only implicit broadcast is a rank-0 operand
//! in [`add`], [`sub`] and [`mul`]. Channel-first batched layouts `[B×C×L]`
//! are used by [`linear`], [`conv1d_depthwise`], [`scale_channels`] and
//! [`channel_norm`]; each also accepts an unbatched `[C×L]`.

use alloc::vec;
use alloc::vec::Vec;
// shadowed by inherent methods whenever std is linked (tests)
#[allow(unused_imports)]
use num_traits::Float;

use super::tensor::{gemm, gemm_nt, gemm_tn};
use super::{Function, Tensor, Var};
use crate::error::{invalid, shape_mismatch, Result};

// ── elementwise ─────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Exp,
    Sigmoid,
    Tanh,
    Silu,
    Softplus,
    Relu,
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Exp => "exp",
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
            Unary::Silu => "silu",
            Unary::Softplus => "softplus",
            Unary::Relu => "relu",
        }
    }

    fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::Sigmoid => sigmoid_scalar(x),
            Unary::Tanh => x.tanh(),
            Unary::Silu => x * sigmoid_scalar(x),
            Unary::Softplus => softplus_scalar(x),
            Unary::Relu => x.max(0.0),
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Exp => y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Silu => {
                let s = sigmoid_scalar(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Softplus => sigmoid_scalar(x),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl Function for Unary {
    fn name(&self) -> &'static str {
        Unary::name(*self)
    }

    fn backward(&self, inputs: &[Var], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0].value().data();
        let data =
            grad.data().iter().zip(x).zip(output.data()).map(|((g, &x), &y)| g * self.derivative(x, y)).collect();
        vec![Some(Tensor::from_parts(grad.shape().to_vec(), data))]
    }
}

fn unary(x: &Var, op: Unary) -> Result<Var> {
    Var::from_op(x.value().map(|v| op.eval(v)), vec![x.clone()], op)
}

pub fn exp(x: &Var) -> Result<Var> {
    unary(x, Unary::Exp)
}

pub fn sigmoid(x: &Var) -> Result<Var> {
    unary(x, Unary::Sigmoid)
}

pub fn tanh(x: &Var) -> Result<Var> {
    unary(x, Unary::Tanh)
}

/// `x · sigmoid(x)`.
pub fn silu(x: &Var) -> Result<Var> {
    unary(x, Unary::Silu)
}

pub fn softplus(x: &Var) -> Result<Var> {
    unary(x, Unary::Softplus)
}

pub fn relu(x: &Var) -> Result<Var> {
    unary(x, Unary::Relu)
}

struct Scale(f64);

impl Function for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, _: &[Var], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(grad.map(|g| g * self.0))]
    }
}

/// Multiplication by a constant.
pub fn scale(x: &Var, factor: f64) -> Result<Var> {
    Var::from_op(x.value().map(|v| v * factor), vec![x.clone()], Scale(factor))
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        }
    }

    fn eval(self, a: f64, b: f64) -> f64 {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
        }
    }
}

fn reduce_to(shape: &[usize], grad: Tensor) -> Tensor {
    if shape.is_empty() && grad.rank() != 0 {
        Tensor::scalar(grad.sum())
    } else {
        grad
    }
}

impl Function for Binary {
    fn name(&self) -> &'static str {
        Binary::name(*self)
    }

    fn backward(&self, inputs: &[Var], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (a, b) = (inputs[0].value(), inputs[1].value());
        let at = |t: &Tensor, i: usize| if t.rank() == 0 { t.item() } else { t.data()[i] };
        let (ga, gb) = match self {
            Binary::Add => (grad.clone(), grad.clone()),
            Binary::Sub => (grad.clone(), grad.map(|g| -g)),
            Binary::Mul => {
                let ga = Tensor::from_fn(grad.shape(), |i| grad.data()[i] * at(b, i));
                let gb = Tensor::from_fn(grad.shape(), |i| grad.data()[i] * at(a, i));
                (ga, gb)
            }
        };
        vec![Some(reduce_to(a.shape(), ga)), Some(reduce_to(b.shape(), gb))]
    }
}

fn binary(a: &Var, b: &Var, op: Binary) -> Result<Var> {
    let (ta, tb) = (a.value(), b.value());
    let value = if ta.shape() == tb.shape() {
        ta.zip_map(tb, |x, y| op.eval(x, y))?
    } else if tb.rank() == 0 {
        let s = tb.item();
        ta.map(|x| op.eval(x, s))
    } else if ta.rank() == 0 {
        let s = ta.item();
        tb.map(|y| op.eval(s, y))
    } else {
        return Err(shape_mismatch(op.name(), ta.shape(), tb.shape()));
    };
    Var::from_op(value, vec![a.clone(), b.clone()], op)
}

pub fn add(a: &Var, b: &Var) -> Result<Var> {
    binary(a, b, Binary::Add)
}

pub fn sub(a: &Var, b: &Var) -> Result<Var> {
    binary(a, b, Binary::Sub)
}

pub fn mul(a: &Var, b: &Var) -> Result<Var> {
    binary(a, b, Binary::Mul)
}

struct MeanPair;

impl Function for MeanPair {
    fn name(&self) -> &'static str {
        "mean_pair"
    }

    fn backward(&self, _: &[Var], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let half = grad.map(|g| 0.5 * g);
        vec![Some(half.clone()), Some(half)]
    }
}

/// `(a + b) / 2`.
pub fn mean_pair(a: &Var, b: &Var) -> Result<Var> {
    if a.shape() != b.shape() {
        return Err(shape_mismatch("mean_pair", a.shape(), b.shape()));
    }
    let value = a.value().zip_map(b.value(), |x, y| 0.5 * (x + y))?;
    Var::from_op(value, vec![a.clone(), b.clone()], MeanPair)
}

// ── reductions ──────────────────────────────────────────────────────────

struct Sum {
    mean: bool,
}

impl Function for Sum {
    fn name(&self) -> &'static str {
        if self.mean {
            "mean"
        } else {
            "sum"
        }
    }

    fn backward(&self, inputs: &[Var], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0].value();
        let g = if self.mean { grad.item() / x.numel() as f64 } else { grad.item() };
        vec![Some(Tensor::full(x.shape(), g))]
    }
}

/// Sum of all elements, as a rank-0 tensor.
pub fn sum(x: &Var) -> Result<Var> {
    Var::from_op(Tensor::scalar(x.value().sum()), vec![x.clone()], Sum { mean: false })
}

pub fn mean(x: &Var) -> Result<Var> {
    let n = x.value().numel().max(1) as f64;
    Var::from_op(Tensor::scalar(x.value().sum() / n), vec![x.clone()], Sum { mean: true })
}

// ── layout ──────────────────────────────────────────────────────────────

struct FlipLast;

impl Function for FlipLast {
    fn name(&self) -> &'static str {
        "flip_last_axis"
    }

    fn backward(&self, _: &[Var], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(grad.flip_last_axis())]
    }
}

pub fn flip_last_axis(x: &Var) -> Result<Var> {
    Var::from_op(x.value().flip_last_axis(), vec![x.clone()], FlipLast)
}

struct Permute {
    inverse: Vec<usize>,
}

impl Function for Permute {
    fn name(&self) -> &'static str {
        "permute"
    }

    fn backward(&self, _: &[Var], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![grad.permute(&self.inverse).ok()]
    }
}

/// Materialized permutation; `out.shape[i] == x.shape[axes[i]]`.
pub fn permute(x: &Var, axes: &[usize]) -> Result<Var> {
    let value = x.value().permute(axes)?;
    let mut inverse = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inverse[a] = i;
    }
    Var::from_op(value, vec![x.clone()], Permute { inverse })
}

struct Reshape;

impl Function for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, inputs: &[Var], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![grad.reshape(inputs[0].shape()).ok()]
    }
}

pub fn reshape(x: &Var, shape: &[usize]) -> Result<Var> {
    Var::from_op(x.value().reshape(shape)?, vec![x.clone()], Reshape)
}

struct Select {
    index: usize,
}

impl Function for Select {
    fn name(&self) -> &'static str {
        "select"
    }

    fn backward(&self, inputs: &[Var], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let mut g = Tensor::zeros(inputs[0].shape());
        let n = grad.numel();
        g.data_mut()[self.index * n..(self.index + 1) * n].copy_from_slice(grad.data());
        vec![Some(g)]
    }
}

/// Slice `index` of the leading axis, dropping that axis.
pub fn select(x: &Var, index: usize) -> Result<Var> {
    let shape = x.shape();
    if shape.is_empty() || index >= shape[0] {
        return Err(invalid("select", alloc::format!("index {index} out of range for shape {shape:?}")));
    }
    let rest = shape[1..].to_vec();
    let n: usize = rest.iter().product();
    let data = x.value().data()[index * n..(index + 1) * n].to_vec();
    Var::from_op(Tensor::from_parts(rest, data), vec![x.clone()], Select { index })
}

struct ResizeLast;

fn resize_last_tensor(t: &Tensor, len: usize) -> Tensor {
    let shape = t.shape();
    let old = *shape.last().unwrap_or(&1);
    let rows = t.numel() / old.max(1);
    let mut data = vec![0.0; rows * len];
    let keep = old.min(len);
    for r in 0..rows {
        data[r * len..r * len + keep].copy_from_slice(&t.data()[r * old..r * old + keep]);
    }
    let mut new_shape = shape.to_vec();
    if let Some(last) = new_shape.last_mut() {
        *last = len;
    }
    Tensor::from_parts(new_shape, data)
}

impl Function for ResizeLast {
    fn name(&self) -> &'static str {
        "resize_last"
    }

    fn backward(&self, inputs: &[Var], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let len = *inputs[0].shape().last().unwrap_or(&1);
        vec![Some(resize_last_tensor(grad, len))]
    }
}

/// Truncates or zero-pads (at the end) the last axis to `len`.
pub fn resize_last(x: &Var, len: usize) -> Result<Var> {
    if x.value().rank() == 0 {
        return Err(invalid("resize_last", "rank-0 input"));
    }
    Var::from_op(resize_last_tensor(x.value(), len), vec![x.clone()], ResizeLast)
}

// ── linear algebra ──────────────────────────────────────────────────────

struct MatMul;

impl Function for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, inputs: &[Var], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (a, b) = (inputs[0].value(), inputs[1].value());
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let ga = inputs[0].requires_grad().then(|| {
            let mut out = vec![0.0; m * k];
            gemm_nt(m, n, k, grad.data(), b.data(), &mut out);
            Tensor::from_parts(vec![m, k], out)
        });
        let gb = inputs[1].requires_grad().then(|| {
            let mut out = vec![0.0; k * n];
            gemm_tn(k, m, n, a.data(), grad.data(), &mut out);
            Tensor::from_parts(vec![k, n], out)
        });
        vec![ga, gb]
    }
}

/// `[m×k] · [k×n] → [m×n]`.
pub fn matmul(a: &Var, b: &Var) -> Result<Var> {
    let value = a.value().matmul(b.value())?;
    Var::from_op(value, vec![a.clone(), b.clone()], MatMul)
}

/// Splits a channel-first shape into `(batch, channels, length)`.
pub fn channel_first_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, l] if c > 0 && l > 0 => Ok((1, c, l)),
        [b, c, l] if c > 0 && l > 0 => Ok((b, c, l)),
        _ => Err(invalid(op, alloc::format!("expected non-empty [C×L] or [B×C×L], got {shape:?}"))),
    }
}

fn with_channels(shape: &[usize], channels: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    let n = s.len();
    s[n - 2] = channels;
    s
}

struct Linear;

impl Function for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(&self, inputs: &[Var], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (x, w) = (inputs[0].value(), inputs[1].value());
        let (batch, cin, len) = channel_first_dims("linear", x.shape()).expect("validated in forward");
        let cout = w.shape()[0];
        let g = grad.data();

        let gx = inputs[0].requires_grad().then(|| {
            let mut out = vec![0.0; x.numel()];
            for b in 0..batch {
                gemm_tn(
                    cin,
                    cout,
                    len,
                    w.data(),
                    &g[b * cout * len..(b + 1) * cout * len],
                    &mut out[b * cin * len..(b + 1) * cin * len],
                );
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        });
        let gw = inputs[1].requires_grad().then(|| {
            let mut out = vec![0.0; cout * cin];
            for b in 0..batch {
                gemm_nt(
                    cout,
                    len,
                    cin,
                    &g[b * cout * len..(b + 1) * cout * len],
                    &x.data()[b * cin * len..(b + 1) * cin * len],
                    &mut out,
                );
            }
            Tensor::from_parts(vec![cout, cin], out)
        });
        let mut grads = vec![gx, gw];
        if let Some(bias) = inputs.get(2) {
            grads.push(bias.requires_grad().then(|| {
                let mut out = vec![0.0; cout];
                for (row, slot) in g.chunks(len).zip((0..batch).flat_map(|_| 0..cout)) {
                    out[slot] += row.iter().sum::<f64>();
                }
                Tensor::from_parts(vec![cout], out)
            }));
        }
        grads
    }
}

/// Channel-mixing linear map: `out[b,o,l] = Σᵢ w[o,i]·x[b,i,l] + bias[o]`.
pub fn linear(x: &Var, weight: &Var, bias: Option<&Var>) -> Result<Var> {
    let (batch, cin, len) = channel_first_dims("linear", x.shape())?;
    let ws = weight.shape();
    if ws.len() != 2 || ws[1] != cin {
        return Err(shape_mismatch("linear", x.shape(), ws));
    }
    let cout = ws[0];
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(shape_mismatch("linear bias", &[cout], b.shape()));
        }
    }
    let mut out = vec![0.0; batch * cout * len];
    for b in 0..batch {
        let dst = &mut out[b * cout * len..(b + 1) * cout * len];
        if let Some(bias) = bias {
            for (row, &bv) in dst.chunks_mut(len).zip(bias.value().data()) {
                row.fill(bv);
            }
        }
        gemm(cout, cin, len, weight.value().data(), &x.value().data()[b * cin * len..(b + 1) * cin * len], dst);
    }
    let mut inputs = vec![x.clone(), weight.clone()];
    inputs.extend(bias.cloned());
    Var::from_op(Tensor::from_parts(with_channels(x.shape(), cout), out), inputs, Linear)
}

// ── convolution ─────────────────────────────────────────────────────────

struct Conv1dDepthwise;

impl Function for Conv1dDepthwise {
    fn name(&self) -> &'static str {
        "conv1d_depthwise"
    }

    fn backward(&self, inputs: &[Var], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (x, k) = (inputs[0].value(), inputs[1].value());
        let (batch, ch, len) = channel_first_dims("conv1d_depthwise", x.shape()).expect("validated");
        let width = k.shape()[1];
        let mut gx = vec![0.0; x.numel()];
        let mut gk = vec![0.0; k.numel()];
        let mut gb = vec![0.0; ch];
        for b in 0..batch {
            for e in 0..ch {
                let base = (b * ch + e) * len;
                let xs = &x.data()[base..base + len];
                let gs = &grad.data()[base..base + len];
                let taps = &k.data()[e * width..(e + 1) * width];
                for (t, &g) in gs.iter().enumerate() {
                    gb[e] += g;
                    for (j, &w) in taps.iter().enumerate() {
                        // input index t - (width - 1) + j
                        if let Some(src) = (t + j).checked_sub(width - 1) {
                            gx[base + src] += w * g;
                            gk[e * width + j] += g * xs[src];
                        }
                    }
                }
            }
        }
        vec![
            Some(Tensor::from_parts(x.shape().to_vec(), gx)),
            Some(Tensor::from_parts(k.shape().to_vec(), gk)),
            Some(Tensor::from_parts(vec![ch], gb)),
        ]
    }
}

/// Per-channel causal convolution: `W − 1` zeros are implicitly prepended, so
/// `out[e,t] = bias[e] + Σⱼ kernel[e,j]·x[e, t − (W−1) + j]` and the output
/// length equals the input length.
pub fn conv1d_depthwise(x: &Var, kernel: &Var, bias: &Var) -> Result<Var> {
    let (batch, ch, len) = channel_first_dims("conv1d_depthwise", x.shape())?;
    let ks = kernel.shape();
    if ks.len() != 2 || ks[0] != ch {
        return Err(shape_mismatch("conv1d_depthwise", x.shape(), ks));
    }
    if ks[1] == 0 {
        return Err(invalid("conv1d_depthwise", "kernel width must be at least 1"));
    }
    if bias.shape() != [ch] {
        return Err(shape_mismatch("conv1d_depthwise bias", &[ch], bias.shape()));
    }
    let width = ks[1];
    let mut out = vec![0.0; x.value().numel()];
    for b in 0..batch {
        for e in 0..ch {
            let base = (b * ch + e) * len;
            let xs = &x.value().data()[base..base + len];
            let taps = &kernel.value().data()[e * width..(e + 1) * width];
            let bv = bias.value().data()[e];
            for (t, o) in out[base..base + len].iter_mut().enumerate() {
                let mut acc = bv;
                for (j, &w) in taps.iter().enumerate() {
                    if let Some(src) = (t + j).checked_sub(width - 1) {
                        acc += w * xs[src];
                    }
                }
                *o = acc;
            }
        }
    }
    Var::from_op(
        Tensor::from_parts(x.shape().to_vec(), out),
        vec![x.clone(), kernel.clone(), bias.clone()],
        Conv1dDepthwise,
    )
}

struct ScaleChannels;

impl Function for ScaleChannels {
    fn name(&self) -> &'static str {
        "scale_channels"
    }

    fn backward(&self, inputs: &[Var], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (x, v) = (inputs[0].value(), inputs[1].value());
        let (_, ch, len) = channel_first_dims("scale_channels", x.shape()).expect("validated");
        let mut gx = vec![0.0; x.numel()];
        let mut gv = vec![0.0; ch];
        for (row, ((gs, xs), gxs)) in
            grad.data().chunks(len).zip(x.data().chunks(len)).zip(gx.chunks_mut(len)).enumerate()
        {
            let e = row % ch;
            let scale = v.data()[e];
            for ((g, xv), gxv) in gs.iter().zip(xs).zip(gxs.iter_mut()) {
                *gxv = g * scale;
                gv[e] += g * xv;
            }
        }
        vec![Some(Tensor::from_parts(x.shape().to_vec(), gx)), Some(Tensor::from_parts(vec![ch], gv))]
    }
}

/// `out[b,e,l] = x[b,e,l] · v[e]`.
pub fn scale_channels(x: &Var, v: &Var) -> Result<Var> {
    let (_, ch, len) = channel_first_dims("scale_channels", x.shape())?;
    if v.shape() != [ch] {
        return Err(shape_mismatch("scale_channels", x.shape(), v.shape()));
    }
    let mut out = x.value().data().to_vec();
    for (row, chunk) in out.chunks_mut(len.max(1)).enumerate() {
        let s = v.value().data()[row % ch];
        chunk.iter_mut().for_each(|o| *o *= s);
    }
    Var::from_op(Tensor::from_parts(x.shape().to_vec(), out), vec![x.clone(), v.clone()], ScaleChannels)
}

// ── normalization ───────────────────────────────────────────────────────

/// Normalization applied over the channel axis at every position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// `x·g / √max(mean(x²), ε)`
    RmsNorm,
    /// `(x − μ)·g / √max(var, ε) + b`
    LayerNorm,
}

/// Floor on the mean square (or variance). A floor rather than an additive
/// term keeps the norm exactly invariant to input scale above it.
pub const NORM_EPS: f64 = 1e-8;

struct ChannelNorm {
    kind: NormKind,
}

/// Per-position statistics: (mean removed, 1/√max(·, ε), floor active).
fn norm_stats(kind: NormKind, column: impl Iterator<Item = f64> + Clone, ch: usize) -> (f64, f64, bool) {
    let n = ch as f64;
    let (mu, spread) = match kind {
        NormKind::RmsNorm => (0.0, column.map(|v| v * v).sum::<f64>() / n),
        NormKind::LayerNorm => {
            let mu = column.clone().sum::<f64>() / n;
            (mu, column.map(|v| (v - mu) * (v - mu)).sum::<f64>() / n)
        }
    };
    let floored = spread < NORM_EPS;
    (mu, 1.0 / spread.max(NORM_EPS).sqrt(), floored)
}

impl Function for ChannelNorm {
    fn name(&self) -> &'static str {
        match self.kind {
            NormKind::RmsNorm => "rmsnorm",
            NormKind::LayerNorm => "layernorm",
        }
    }

    fn backward(&self, inputs: &[Var], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0].value();
        let gain = inputs[1].value().data();
        let (batch, ch, len) = channel_first_dims("channel_norm", x.shape()).expect("validated");
        let xd = x.data();
        let gd = grad.data();
        let mut gx = vec![0.0; x.numel()];
        let mut ggain = vec![0.0; ch];
        let mut gbias = vec![0.0; ch];
        let mut xhat = vec![0.0; ch];
        let mut dxhat = vec![0.0; ch];
        let n = ch as f64;
        for b in 0..batch {
            for l in 0..len {
                let idx = |c: usize| (b * ch + c) * len + l;
                let (mu, inv, floored) = norm_stats(self.kind, (0..ch).map(|c| xd[idx(c)]), ch);
                for c in 0..ch {
                    xhat[c] = (xd[idx(c)] - mu) * inv;
                    let g = gd[idx(c)];
                    dxhat[c] = g * gain[c];
                    ggain[c] += g * xhat[c];
                    gbias[c] += g;
                }
                let dot = if floored { 0.0 } else { dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n };
                let mean_d = match self.kind {
                    NormKind::RmsNorm => 0.0,
                    NormKind::LayerNorm => dxhat.iter().sum::<f64>() / n,
                };
                for c in 0..ch {
                    gx[idx(c)] = (dxhat[c] - mean_d - xhat[c] * dot) * inv;
                }
            }
        }
        let mut grads =
            vec![Some(Tensor::from_parts(x.shape().to_vec(), gx)), Some(Tensor::from_parts(vec![ch], ggain))];
        if inputs.len() > 2 {
            grads.push(Some(Tensor::from_parts(vec![ch], gbias)));
        }
        grads
    }
}

/// Normalizes `[B×C×L]` (or `[C×L]`) over `C` at every `(b, l)`.
/// `bias` is only used (and required) for [`NormKind::LayerNorm`].
pub fn channel_norm(x: &Var, kind: NormKind, gain: &Var, bias: Option<&Var>) -> Result<Var> {
    let (batch, ch, len) = channel_first_dims("channel_norm", x.shape())?;
    if gain.shape() != [ch] {
        return Err(shape_mismatch("channel_norm gain", &[ch], gain.shape()));
    }
    let bias = match (kind, bias) {
        (NormKind::RmsNorm, _) => None,
        (NormKind::LayerNorm, Some(b)) if b.shape() == [ch] => Some(b),
        (NormKind::LayerNorm, Some(b)) => return Err(shape_mismatch("channel_norm bias", &[ch], b.shape())),
        (NormKind::LayerNorm, None) => return Err(invalid("channel_norm", "layernorm needs a bias")),
    };
    let xd = x.value().data();
    let g = gain.value().data();
    let mut out = vec![0.0; xd.len()];
    for b in 0..batch {
        for l in 0..len {
            let idx = |c: usize| (b * ch + c) * len + l;
            let (mu, inv, _) = norm_stats(kind, (0..ch).map(|c| xd[idx(c)]), ch);
            for c in 0..ch {
                let shift = bias.map_or(0.0, |bv| bv.value().data()[c]);
                out[idx(c)] = (xd[idx(c)] - mu) * inv * g[c] + shift;
            }
        }
    }
    let mut inputs = vec![x.clone(), gain.clone()];
    inputs.extend(bias.cloned());
    Var::from_op(Tensor::from_parts(x.shape().to_vec(), out), inputs, ChannelNorm { kind })
}

// ── framing ─────────────────────────────────────────────────────────────

struct Frames {
    stride: usize,
}

impl Function for Frames {
    fn name(&self) -> &'static str {
        "frames"
    }

    fn backward(&self, inputs: &[Var], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let len = inputs[0].value().numel();
        vec![Some(overlap_add_tensor(grad, self.stride, len))]
    }
}

fn frames_tensor(x: &Tensor, width: usize, stride: usize) -> Tensor {
    let n = (x.numel() - width) / stride + 1;
    let mut out = vec![0.0; width * n];
    for j in 0..width {
        for f in 0..n {
            out[j * n + f] = x.data()[f * stride + j];
        }
    }
    Tensor::from_parts(vec![width, n], out)
}

fn overlap_add_tensor(frames: &Tensor, stride: usize, len: usize) -> Tensor {
    let (width, n) = (frames.shape()[0], frames.shape()[1]);
    let mut out = vec![0.0; len];
    for j in 0..width {
        for f in 0..n {
            out[f * stride + j] += frames.data()[j * n + f];
        }
    }
    Tensor::from_parts(vec![len], out)
}

/// Slices a 1-D signal of length `T` into `N = (T − width)/stride + 1`
/// overlapping windows, returned column-wise as `[width × N]`.
/// `T − width` must be a multiple of `stride`.
pub fn frames(x: &Var, width: usize, stride: usize) -> Result<Var> {
    let len = x.value().numel();
    if x.value().rank() != 1 || width == 0 || stride == 0 || len < width || !(len - width).is_multiple_of(stride) {
        return Err(invalid(
            "frames",
            alloc::format!("signal {:?} cannot be framed with width {width}, stride {stride}", x.shape()),
        ));
    }
    Var::from_op(frames_tensor(x.value(), width, stride), vec![x.clone()], Frames { stride })
}

struct OverlapAdd {
    width: usize,
    stride: usize,
}

impl Function for OverlapAdd {
    fn name(&self) -> &'static str {
        "overlap_add"
    }

    fn backward(&self, _: &[Var], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(frames_tensor(grad, self.width, self.stride))]
    }
}

/// Adjoint of [`frames`]: sums `[width × N]` windows placed `stride` apart into
/// a signal of length `(N − 1)·stride + width`.
pub fn overlap_add(x: &Var, stride: usize) -> Result<Var> {
    let shape = x.shape();
    if shape.len() != 2 || stride == 0 || shape[1] == 0 {
        return Err(invalid("overlap_add", alloc::format!("bad frame matrix {shape:?}")));
    }
    let (width, n) = (shape[0], shape[1]);
    let len = (n - 1) * stride + width;
    Var::from_op(overlap_add_tensor(x.value(), stride, len), vec![x.clone()], OverlapAdd { width, stride })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Var {
        Var::constant(Tensor::new(shape, data.to_vec()).unwrap())
    }

    #[test]
    fn silu_at_zero_is_zero() {
        let y = silu(&t(&[1], &[0.0])).unwrap();
        assert_eq!(y.value().item(), 0.0);
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        assert_eq!(softplus_scalar(800.0), 800.0);
        assert!(softplus_scalar(-800.0) >= 0.0);
        assert!((softplus_scalar(0.0) - core::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn matmul_identity() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(matmul(&eye, &x).unwrap().value(), x.value());
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let err = matmul(&t(&[2, 3], &[0.0; 6]), &t(&[2, 3], &[0.0; 6])).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn conv_running_sum() {
        let x = Var::constant(Tensor::ones(&[2, 8]));
        let k = Var::constant(Tensor::ones(&[2, 4]));
        let b = Var::constant(Tensor::zeros(&[2]));
        let y = conv1d_depthwise(&x, &k, &b).unwrap();
        let expected = [1.0, 2.0, 3.0, 4.0, 4.0, 4.0, 4.0, 4.0];
        assert_eq!(&y.value().data()[..8], &expected);
        assert_eq!(&y.value().data()[8..], &expected);
    }

    #[test]
    fn conv_identity_tap_delays_by_width_minus_one() {
        let x = t(&[1, 6], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let k = t(&[1, 4], &[1.0, 0.0, 0.0, 0.0]);
        let b = t(&[1], &[0.0]);
        let y = conv1d_depthwise(&x, &k, &b).unwrap();
        assert_eq!(y.value().data(), &[0.0, 0.0, 0.0, 1.0, 2.0, 3.0]);
        // the last tap is the undelayed identity
        let k = t(&[1, 4], &[0.0, 0.0, 0.0, 1.0]);
        let y = conv1d_depthwise(&x, &k, &b).unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = t(&[2, 4], &[0.0; 8]);
        let k = t(&[3, 4], &[0.0; 12]);
        let b = t(&[2], &[0.0; 2]);
        assert!(conv1d_depthwise(&x, &k, &b).is_err());
    }

    #[test]
    fn flip_is_an_involution() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let f = flip_last_axis(&x).unwrap();
        assert_eq!(f.value().data(), &[3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
        assert_eq!(flip_last_axis(&f).unwrap().value(), x.value());
    }

    #[test]
    fn scalar_broadcast_only() {
        let x = t(&[3], &[1.0, 2.0, 3.0]);
        let s = Var::constant(Tensor::scalar(2.0));
        assert_eq!(mul(&x, &s).unwrap().value().data(), &[2.0, 4.0, 6.0]);
        assert!(add(&x, &t(&[1], &[1.0])).is_err());
    }

    #[test]
    fn rmsnorm_leaves_unit_rms_vectors_unchanged() {
        let x = t(&[4, 1], &[1.0, -1.0, 1.0, -1.0]);
        let g = Var::constant(Tensor::ones(&[4]));
        let y = channel_norm(&x, NormKind::RmsNorm, &g, None).unwrap();
        assert!(y.value().max_abs_diff(x.value()).unwrap() < 1e-8);
    }

    #[test]
    fn layernorm_of_constant_is_zero() {
        let x = t(&[3, 2], &[5.0, -2.0, 5.0, -2.0, 5.0, -2.0]);
        let g = Var::constant(Tensor::ones(&[3]));
        let b = Var::constant(Tensor::zeros(&[3]));
        let y = channel_norm(&x, NormKind::LayerNorm, &g, Some(&b)).unwrap();
        assert!(y.value().max_abs() < 1e-12);
    }

    #[test]
    fn frames_and_overlap_add_are_adjoint_shapes() {
        let x = Var::constant(Tensor::from_fn(&[32], |i| i as f64));
        let f = frames(&x, 16, 8).unwrap();
        assert_eq!(f.shape(), &[16, 3]);
        assert_eq!(f.value().data()[3 + 1], 9.0); // tap 1 of frame 1
        let y = overlap_add(&f, 8).unwrap();
        assert_eq!(y.shape(), &[32]);
        // interior samples are covered twice, edges once
        assert_eq!(y.value().data()[3], 3.0);
        assert_eq!(y.value().data()[12], 24.0);
        assert!(frames(&Var::constant(Tensor::zeros(&[20])), 16, 8).is_err());
    }

    #[test]
    fn select_and_resize() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(select(&x, 1).unwrap().value().data(), &[4.0, 5.0, 6.0]);
        assert!(select(&x, 2).is_err());
        let r = resize_last(&x, 4).unwrap();
        assert_eq!(r.value().data(), &[1.0, 2.0, 3.0, 0.0, 4.0, 5.0, 6.0, 0.0]);
        let r = resize_last(&x, 2).unwrap();
        assert_eq!(r.value().data(), &[1.0, 2.0, 4.0, 5.0]);
    }
}
