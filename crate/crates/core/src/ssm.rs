//! Selective state-space scans.
//!
//! A diagonal SSM per channel `e` evolves `H` states
//!
//! ```text
//! h[t] = exp(Δ[e,t]·A[e]) ⊙ h[t-1] + gain(Δ[e,t], A[e]) ⊙ B[t] · x[e,t]
//! y[e,t] = C[t] · h[t]
//! ```
//!
//! with `gain = Δ` ([`Discretization::Euler`]) or `gain = (exp(ΔA) − 1)/A`
//! ([`Discretization::Zoh`]). `Δ`, `B` and `C` vary with `t`, which is what
//! makes the scan selective. [`scan_sequential`] runs the recurrence directly,
//! [`scan_parallel`] evaluates it as an associative prefix scan, and
//! [`kernel_convolve`] is a dense time-invariant oracle that materializes the
//! convolution kernel through a matrix exponential.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
// shadowed by inherent methods whenever std is linked (tests)
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{invalid, shape_mismatch, Error, Result};
use crate::numerics::ops::{self, channel_first_dims};
use crate::numerics::{Function, Tensor, Var};
use crate::params::{fan_in, Bound, Init, ParamId, ParamSink, ParamStore};

/// How the continuous input matrix is discretized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Discretization {
    /// `B̄ = Δ·B`.
    #[default]
    Euler,
    /// Exact zero-order hold, `B̄ = (ΔA)⁻¹(exp(ΔA) − I)·ΔB`.
    Zoh,
}

/// `(Ā, B̄/B)` for one diagonal entry.
#[inline]
fn coefficients(mode: Discretization, delta: f64, a: f64) -> (f64, f64) {
    let da = delta * a;
    let gain = match mode {
        Discretization::Euler => delta,
        Discretization::Zoh => da.exp_m1() / a,
    };
    (da.exp(), gain)
}

/// Per-channel, per-step parameters of a diagonal selective SSM.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    /// Continuous-time diagonal state matrix, `[E×H]`, strictly negative.
    pub a: Tensor,
    /// Step sizes `[E×L]`, strictly positive.
    pub delta: Tensor,
    /// Input projections `[L×H]`.
    pub b: Tensor,
    /// Output projections `[L×H]`.
    pub c: Tensor,
}

impl SsmParams {
    pub fn new(a: Tensor, delta: Tensor, b: Tensor, c: Tensor) -> Result<Self> {
        let p = Self { a, delta, b, c };
        p.validate()?;
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn state_dim(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.delta.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<()> {
        let [e, h] = *self.a.shape() else {
            return Err(invalid("SsmParams", "A must be [E×H]"));
        };
        let [de, l] = *self.delta.shape() else {
            return Err(invalid("SsmParams", "delta must be [E×L]"));
        };
        if de != e {
            return Err(shape_mismatch("SsmParams delta", self.a.shape(), self.delta.shape()));
        }
        for (name, m) in [("B", &self.b), ("C", &self.c)] {
            if m.shape() != [l, h] {
                return Err(invalid("SsmParams", format!("{name} must be [L×H] = [{l}×{h}], got {:?}", m.shape())));
            }
        }
        check_step_and_decay(self.delta.data(), self.a.data())
    }
}

fn check_step_and_decay(delta: &[f64], a: &[f64]) -> Result<()> {
    if let Some(&d) = delta.iter().find(|&&d| !(d > 0.0)) {
        return Err(Error::NonPositiveDelta(d));
    }
    if let Some(&v) = a.iter().find(|&&v| !(v < 0.0)) {
        return Err(Error::UnstableStateMatrix(v));
    }
    Ok(())
}

/// Discretizes a diagonal SSM: returns `(Ā, B̄)`, both `[E×L×H]`.
pub fn discretize(a: &Tensor, delta: &Tensor, b: &Tensor, mode: Discretization) -> Result<(Tensor, Tensor)> {
    let (e, h) = match *a.shape() {
        [e, h] => (e, h),
        _ => return Err(invalid("discretize", "A must be [E×H]")),
    };
    let l = match *delta.shape() {
        [de, l] if de == e => l,
        _ => return Err(shape_mismatch("discretize", a.shape(), delta.shape())),
    };
    if b.shape() != [l, h] {
        return Err(shape_mismatch("discretize B", &[l, h], b.shape()));
    }
    check_step_and_decay(delta.data(), a.data())?;
    let mut abar = vec![0.0; e * l * h];
    let mut bbar = vec![0.0; e * l * h];
    for ch in 0..e {
        for t in 0..l {
            for s in 0..h {
                let (decay, gain) = coefficients(mode, delta.data()[ch * l + t], a.data()[ch * h + s]);
                let i = (ch * l + t) * h + s;
                abar[i] = decay;
                bbar[i] = gain * b.data()[t * h + s];
            }
        }
    }
    if abar.iter().chain(&bbar).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("discretize"));
    }
    Ok((Tensor::new(&[e, l, h], abar)?, Tensor::new(&[e, l, h], bbar)?))
}

/// Strided view of a `B` or `C` projection for one sequence.
#[derive(Clone, Copy)]
struct Proj<'a> {
    data: &'a [f64],
    t_stride: usize,
    h_stride: usize,
}

impl Proj<'_> {
    #[inline]
    fn at(&self, t: usize, h: usize) -> f64 {
        self.data[t * self.t_stride + h * self.h_stride]
    }
}

/// One channel of one sequence.
#[derive(Clone, Copy)]
struct Channel<'a> {
    x: &'a [f64],
    delta: &'a [f64],
    a: &'a [f64],
    b: Proj<'a>,
    c: Proj<'a>,
}

fn scan_channel_sequential(ch: Channel<'_>, mode: Discretization, state: &mut [f64], out: &mut [f64]) {
    state.fill(0.0);
    for (t, y) in out.iter_mut().enumerate() {
        let (xt, dt) = (ch.x[t], ch.delta[t]);
        let mut acc = 0.0;
        for (s, hs) in state.iter_mut().enumerate() {
            let (decay, gain) = coefficients(mode, dt, ch.a[s]);
            *hs = decay * *hs + gain * ch.b.at(t, s) * xt;
            acc += ch.c.at(t, s) * *hs;
        }
        *y = acc;
    }
}

/// The affine map `h ↦ a·h + b`; composition is associative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub a: f64,
    pub b: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine { a: 1.0, b: 0.0 };

    /// `next ∘ self`: apply `self` first, then `next`.
    #[inline]
    pub fn then(self, next: Affine) -> Affine {
        Affine { a: next.a * self.a, b: next.a * self.b + next.b }
    }
}

const SCAN_BLOCK: usize = 32;

/// In-place inclusive prefix composition: afterwards `maps[t]` is
/// `maps[t] ∘ … ∘ maps[0]`. With a zero initial state, `maps[t].b` is `h[t]`.
///
/// Blocked three-phase scan: local scans inside each block, a recursive scan
/// of block totals, then a carry-in fix-up. Phases one and three touch each
/// block independently. O(L) work, O(log L) recursion depth.
pub fn inclusive_scan(maps: &mut [Affine]) {
    if maps.len() <= SCAN_BLOCK {
        for t in 1..maps.len() {
            maps[t] = maps[t - 1].then(maps[t]);
        }
        return;
    }
    for block in maps.chunks_mut(SCAN_BLOCK) {
        for t in 1..block.len() {
            block[t] = block[t - 1].then(block[t]);
        }
    }
    let mut totals: Vec<Affine> = maps.chunks(SCAN_BLOCK).map(|b| b[b.len() - 1]).collect();
    inclusive_scan(&mut totals);
    for (k, block) in maps.chunks_mut(SCAN_BLOCK).enumerate().skip(1) {
        let carry = totals[k - 1];
        for m in block {
            *m = carry.then(*m);
        }
    }
}

fn scan_channel_parallel(ch: Channel<'_>, mode: Discretization, maps: &mut [Affine], out: &mut [f64]) {
    out.fill(0.0);
    for (s, &a) in ch.a.iter().enumerate() {
        for (t, m) in maps.iter_mut().enumerate() {
            let (decay, gain) = coefficients(mode, ch.delta[t], a);
            *m = Affine { a: decay, b: gain * ch.b.at(t, s) * ch.x[t] };
        }
        inclusive_scan(maps);
        for (t, y) in out.iter_mut().enumerate() {
            *y += ch.c.at(t, s) * maps[t].b;
        }
    }
}

fn checked_input(x: &Tensor, p: &SsmParams) -> Result<()> {
    p.validate()?;
    if x.shape() != p.delta.shape() {
        return Err(shape_mismatch("scan", x.shape(), p.delta.shape()));
    }
    Ok(())
}

fn channel<'a>(x: &'a Tensor, p: &'a SsmParams, e: usize) -> Channel<'a> {
    let (l, h) = (p.len(), p.state_dim());
    let row = e * l..(e + 1) * l;
    let proj = |m: &'a Tensor| Proj { data: m.data(), t_stride: h, h_stride: 1 };
    Channel {
        x: &x.data()[row.clone()],
        delta: &p.delta.data()[row],
        a: &p.a.data()[e * h..(e + 1) * h],
        b: proj(&p.b),
        c: proj(&p.c),
    }
}

/// Direct recurrence from `h[0] = 0`: O(L·E·H) time, O(H) state per channel.
pub fn scan_sequential(x: &Tensor, p: &SsmParams, mode: Discretization) -> Result<Tensor> {
    checked_input(x, p)?;
    let (e, l) = (p.channels(), p.len());
    let mut out = vec![0.0; e * l];
    let mut state = vec![0.0; p.state_dim()];
    for ch in 0..e {
        scan_channel_sequential(channel(x, p, ch), mode, &mut state, &mut out[ch * l..(ch + 1) * l]);
    }
    Tensor::new(&[e, l], out)
}

/// Same result as [`scan_sequential`], computed with [`inclusive_scan`] over
/// `(Ā[t], B̄[t]·x[t])` pairs for each state dimension.
pub fn scan_parallel(x: &Tensor, p: &SsmParams, mode: Discretization) -> Result<Tensor> {
    checked_input(x, p)?;
    let (e, l) = (p.channels(), p.len());
    let mut out = vec![0.0; e * l];
    let mut maps = vec![Affine::IDENTITY; l];
    for ch in 0..e {
        scan_channel_parallel(channel(x, p, ch), mode, &mut maps, &mut out[ch * l..(ch + 1) * l]);
    }
    Tensor::new(&[e, l], out)
}

/// Every hidden state, `[E×L×H]`. Diagnostic only: this is the `L×H`
/// storage the scans avoid.
pub fn hidden_states(x: &Tensor, p: &SsmParams, mode: Discretization) -> Result<Tensor> {
    checked_input(x, p)?;
    let (e, l, h) = (p.channels(), p.len(), p.state_dim());
    let mut out = vec![0.0; e * l * h];
    for ch in 0..e {
        let view = channel(x, p, ch);
        let mut state = vec![0.0; h];
        for t in 0..l {
            for s in 0..h {
                let (decay, gain) = coefficients(mode, view.delta[t], view.a[s]);
                state[s] = decay * state[s] + gain * view.b.at(t, s) * view.x[t];
                out[(ch * l + t) * h + s] = state[s];
            }
        }
    }
    Tensor::new(&[e, l, h], out)
}

// ── dense oracle ────────────────────────────────────────────────────────

/// Time-invariant single-input single-output SSM with a full state matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseSsm {
    /// `[H×H]`
    pub a: Tensor,
    /// `[H]`
    pub b: Tensor,
    /// `[H]`
    pub c: Tensor,
    pub delta: f64,
    pub mode: Discretization,
}

/// Largest state dimension [`kernel_convolve`] accepts.
pub const ORACLE_MAX_STATE: usize = 32;
/// Longest sequence [`kernel_convolve`] accepts.
pub const ORACLE_MAX_LEN: usize = 1024;

impl DenseSsm {
    /// Embeds one channel of a diagonal SSM with time-invariant parameters.
    pub fn from_diagonal(a: &[f64], b: &[f64], c: &[f64], delta: f64, mode: Discretization) -> Result<Self> {
        let h = a.len();
        if b.len() != h || c.len() != h {
            return Err(invalid("DenseSsm::from_diagonal", "A, B, C lengths differ"));
        }
        let mut dense = vec![0.0; h * h];
        for (i, &v) in a.iter().enumerate() {
            dense[i * h + i] = v;
        }
        Ok(Self {
            a: Tensor::new(&[h, h], dense)?,
            b: Tensor::new(&[h], b.to_vec())?,
            c: Tensor::new(&[h], c.to_vec())?,
            delta,
            mode,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.b.numel()
    }

    /// `(Ā, B̄)` via the exponential of the augmented matrix
    /// `[[ΔA, ΔB], [0, 0]]`, whose top-right column is the zero-order-hold `B̄`.
    pub fn discretized(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let h = self.state_dim();
        if self.a.shape() != [h, h] || self.c.numel() != h {
            return Err(invalid("DenseSsm", format!("inconsistent shapes for H = {h}")));
        }
        let n = h + 1;
        let mut aug = vec![0.0; n * n];
        for i in 0..h {
            for j in 0..h {
                aug[i * n + j] = self.delta * self.a.data()[i * h + j];
            }
            aug[i * n + h] = self.delta * self.b.data()[i];
        }
        let e = expm(&aug, n);
        let abar: Vec<f64> = (0..h * h).map(|k| e[(k / h) * n + k % h]).collect();
        let bbar = match self.mode {
            Discretization::Zoh => (0..h).map(|i| e[i * n + h]).collect(),
            Discretization::Euler => self.b.data().iter().map(|b| self.delta * b).collect(),
        };
        Ok((abar, bbar))
    }

    /// `K̄ = (C·B̄, C·Ā·B̄, …, C·Ā^{L−1}·B̄)`.
    pub fn kernel(&self, len: usize) -> Result<Vec<f64>> {
        let h = self.state_dim();
        guard_oracle(h, len)?;
        let (abar, bbar) = self.discretized()?;
        let mut v = bbar;
        let mut k = Vec::with_capacity(len);
        for _ in 0..len {
            k.push(self.c.data().iter().zip(&v).map(|(c, v)| c * v).sum());
            v = (0..h).map(|i| (0..h).map(|j| abar[i * h + j] * v[j]).sum()).collect();
        }
        Ok(k)
    }
}

fn guard_oracle(h: usize, len: usize) -> Result<()> {
    if h > ORACLE_MAX_STATE || len > ORACLE_MAX_LEN {
        return Err(Error::OracleTooLarge(format!(
            "H = {h} (max {ORACLE_MAX_STATE}), L = {len} (max {ORACLE_MAX_LEN})"
        )));
    }
    Ok(())
}

/// Convolves `x` (`[1×L]` or `[L]`) with the materialized SSM kernel.
pub fn kernel_convolve(x: &Tensor, ssm: &DenseSsm) -> Result<Tensor> {
    let len = match *x.shape() {
        [1, l] | [l] => l,
        _ => return Err(invalid("kernel_convolve", format!("expected [1×L], got {:?}", x.shape()))),
    };
    let k = ssm.kernel(len)?;
    let xs = x.data();
    let y = (0..len).map(|t| (0..=t).map(|j| k[j] * xs[t - j]).sum()).collect();
    Tensor::new(x.shape(), y)
}

/// Matrix exponential by scaling and squaring with a Taylor core.
fn expm(m: &[f64], n: usize) -> Vec<f64> {
    let norm = (0..n).map(|j| (0..n).map(|i| m[i * n + j].abs()).sum::<f64>()).fold(0.0, f64::max);
    let mut squarings = 0;
    let mut scale = 1.0;
    while norm * scale > 0.25 {
        scale *= 0.5;
        squarings += 1;
    }
    let scaled: Vec<f64> = m.iter().map(|v| v * scale).collect();
    let matmul = |a: &[f64], b: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n * n];
        crate::numerics::gemm(n, n, n, a, b, &mut out);
        out
    };
    let mut result: Vec<f64> = (0..n * n).map(|k| if k / n == k % n { 1.0 } else { 0.0 }).collect();
    let mut term = result.clone();
    for k in 1..=18 {
        term = matmul(&term, &scaled).into_iter().map(|v| v / k as f64).collect();
        for (r, t) in result.iter_mut().zip(&term) {
            *r += t;
        }
    }
    for _ in 0..squarings {
        result = matmul(&result, &result);
    }
    result
}

// ── differentiable scan ─────────────────────────────────────────────────

struct SelectiveScan {
    mode: Discretization,
}

struct ScanDims {
    batch: usize,
    channels: usize,
    len: usize,
    state: usize,
}

impl ScanDims {
    #[allow(clippy::too_many_arguments)]
    fn view<'a>(
        &self,
        x: &'a [f64],
        delta: &'a [f64],
        a: &'a [f64],
        b: &'a [f64],
        c: &'a [f64],
        bi: usize,
        e: usize,
    ) -> Channel<'a> {
        let (l, h) = (self.len, self.state);
        let row = (bi * self.channels + e) * l;
        let proj = |m: &'a [f64]| Proj { data: &m[bi * h * l..(bi + 1) * h * l], t_stride: 1, h_stride: l };
        Channel { x: &x[row..row + l], delta: &delta[row..row + l], a: &a[e * h..(e + 1) * h], b: proj(b), c: proj(c) }
    }
}

fn scan_dims(x: &Var, delta: &Var, a: &Var, b: &Var, c: &Var) -> Result<ScanDims> {
    let (batch, channels, len) = channel_first_dims("selective_scan", x.shape())?;
    if delta.shape() != x.shape() {
        return Err(shape_mismatch("selective_scan delta", x.shape(), delta.shape()));
    }
    let state = match *a.shape() {
        [e, h] if e == channels => h,
        _ => return Err(shape_mismatch("selective_scan A", &[channels, 0], a.shape())),
    };
    let expect: Vec<usize> = if x.value().rank() == 3 { vec![batch, state, len] } else { vec![state, len] };
    for m in [b, c] {
        if m.shape() != expect.as_slice() {
            return Err(shape_mismatch("selective_scan B/C", &expect, m.shape()));
        }
    }
    Ok(ScanDims { batch, channels, len, state })
}

impl Function for SelectiveScan {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, inputs: &[Var], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let [x, delta, a, b, c] = inputs else { unreachable!("selective_scan has five inputs") };
        let dims = scan_dims(x, delta, a, b, c).expect("validated in forward");
        let (l, h) = (dims.len, dims.state);
        let (xd, dd, ad, bd, cd) =
            (x.value().data(), delta.value().data(), a.value().data(), b.value().data(), c.value().data());
        let mut gx = vec![0.0; xd.len()];
        let mut gdelta = vec![0.0; dd.len()];
        let mut ga = vec![0.0; ad.len()];
        let mut gb = vec![0.0; bd.len()];
        let mut gc = vec![0.0; cd.len()];

        // hidden states of one channel, recomputed on demand
        let mut states = vec![0.0; l * h];
        let mut carry = vec![0.0; h];
        for bi in 0..dims.batch {
            let bc_base = bi * h * l;
            for e in 0..dims.channels {
                let ch = dims.view(xd, dd, ad, bd, cd, bi, e);
                let row = (bi * dims.channels + e) * l;
                let g = &grad.data()[row..row + l];

                let mut prev = vec![0.0; h];
                for t in 0..l {
                    for s in 0..h {
                        let (decay, gain) = coefficients(self.mode, ch.delta[t], ch.a[s]);
                        prev[s] = decay * prev[s] + gain * ch.b.at(t, s) * ch.x[t];
                        states[t * h + s] = prev[s];
                    }
                }

                carry.fill(0.0);
                for t in (0..l).rev() {
                    let (xt, dt) = (ch.x[t], ch.delta[t]);
                    let mut dx = 0.0;
                    let mut ddelta = 0.0;
                    for s in 0..h {
                        let av = ch.a[s];
                        let (decay, gain) = coefficients(self.mode, dt, av);
                        let bv = ch.b.at(t, s);
                        let dh = g[t] * ch.c.at(t, s) + carry[s];
                        gc[bc_base + s * l + t] += g[t] * states[t * h + s];

                        let h_prev = if t > 0 { states[(t - 1) * h + s] } else { 0.0 };
                        let d_decay = dh * h_prev;
                        let d_bbar = dh * xt;
                        dx += dh * gain * bv;
                        gb[bc_base + s * l + t] += d_bbar * gain;
                        let d_gain = d_bbar * bv;

                        // Ā = exp(ΔA)
                        ddelta += d_decay * decay * av;
                        ga[e * h + s] += d_decay * decay * dt;
                        match self.mode {
                            Discretization::Euler => ddelta += d_gain,
                            Discretization::Zoh => {
                                let da = dt * av;
                                ddelta += d_gain * decay;
                                ga[e * h + s] += d_gain * (da * decay - da.exp_m1()) / (av * av);
                            }
                        }
                        carry[s] = dh * decay;
                    }
                    gx[row + t] += dx;
                    gdelta[row + t] += ddelta;
                }
            }
        }
        let t = |v: &Var, d: Vec<f64>| Some(Tensor::new(v.shape(), d).expect("shape preserved"));
        vec![t(x, gx), t(delta, gdelta), t(a, ga), t(b, gb), t(c, gc)]
    }
}

/// Differentiable selective scan.
///
/// `x`, `delta`: `[B×E×L]` (or `[E×L]`); `a`: `[E×H]`, negative;
/// `b`, `c`: `[B×H×L]` (or `[H×L]`). The backward pass recomputes the hidden
/// states one channel at a time instead of storing `E×L×H` activations.
pub fn selective_scan(x: &Var, delta: &Var, a: &Var, b: &Var, c: &Var, mode: Discretization) -> Result<Var> {
    let dims = scan_dims(x, delta, a, b, c)?;
    check_step_and_decay(delta.value().data(), a.value().data())?;
    let (xd, dd, ad, bd, cd) =
        (x.value().data(), delta.value().data(), a.value().data(), b.value().data(), c.value().data());
    let l = dims.len;
    let mut out = vec![0.0; xd.len()];
    let mut state = vec![0.0; dims.state];
    for bi in 0..dims.batch {
        for e in 0..dims.channels {
            let row = (bi * dims.channels + e) * l;
            let ch = dims.view(xd, dd, ad, bd, cd, bi, e);
            scan_channel_sequential(ch, mode, &mut state, &mut out[row..row + l]);
        }
    }
    Var::from_op(
        Tensor::new(x.shape(), out)?,
        vec![x.clone(), delta.clone(), a.clone(), b.clone(), c.clone()],
        SelectiveScan { mode },
    )
}

// ── input-selective parameterization ────────────────────────────────────

/// Step-size projection rank for a model of width `d_model`: `⌈d_model/16⌉`.
pub fn step_rank(d_model: usize) -> usize {
    d_model.div_ceil(16).max(1)
}

/// Parameters that make `Δ`, `B`, `C` functions of the input.
#[derive(Clone, Debug)]
pub struct SelectiveSsm {
    /// `[R×E]`, first factor of the low-rank `Δ` projection.
    pub dt_down: ParamId,
    /// `[E×R]`
    pub dt_up: ParamId,
    /// `[E]`
    pub dt_bias: ParamId,
    /// `[H×E]`
    pub w_b: ParamId,
    /// `[H×E]`
    pub w_c: ParamId,
    /// `[E×H]`; `A = −exp(a_log)`.
    pub a_log: ParamId,
    pub channels: usize,
    pub state_dim: usize,
    pub rank: usize,
}

impl SelectiveSsm {
    pub fn declare(sink: &mut dyn ParamSink, prefix: &str, channels: usize, state_dim: usize, rank: usize) -> Self {
        let name = |n: &str| -> String { format!("{prefix}.{n}") };
        Self {
            dt_down: sink.declare(name("dt_down"), &[rank, channels], fan_in(channels)),
            dt_up: sink.declare(name("dt_up"), &[channels, rank], fan_in(rank)),
            dt_bias: sink.declare(name("dt_bias"), &[channels], Init::StepBias { min: 1e-3, max: 1e-1 }),
            w_b: sink.declare(name("w_b"), &[state_dim, channels], fan_in(channels)),
            w_c: sink.declare(name("w_c"), &[state_dim, channels], fan_in(channels)),
            a_log: sink.declare(name("a_log"), &[channels, state_dim], Init::StateDecay),
            channels,
            state_dim,
            rank,
        }
    }

    /// `(Δ, A, B, C)` as graph values for an input `[B×E×L]` or `[E×L]`.
    pub fn parameterize(&self, p: &Bound, x: &Var) -> Result<(Var, Var, Var, Var)> {
        let low = ops::linear(x, &p[self.dt_down], None)?;
        let delta = ops::softplus(&ops::linear(&low, &p[self.dt_up], Some(&p[self.dt_bias]))?)?;
        let a = ops::scale(&ops::exp(&p[self.a_log])?, -1.0)?;
        let b = ops::linear(x, &p[self.w_b], None)?;
        let c = ops::linear(x, &p[self.w_c], None)?;
        Ok((delta, a, b, c))
    }

    /// `y = SSM(x)` with input-dependent parameters.
    pub fn forward(&self, p: &Bound, x: &Var, mode: Discretization) -> Result<Var> {
        let (delta, a, b, c) = self.parameterize(p, x)?;
        selective_scan(x, &delta, &a, &b, &c, mode)
    }
}

/// Evaluates the selective parameterization of `x: [E×L]` into plain
/// [`SsmParams`].
pub fn selective_parameterize(store: &ParamStore, ssm: &SelectiveSsm, x: &Tensor) -> Result<SsmParams> {
    let bound = store.bind(false);
    let (delta, a, b, c) = ssm.parameterize(&bound, &Var::constant(x.clone()))?;
    SsmParams::new(a.value().clone(), delta.value().clone(), b.value().t()?, c.value().t()?)
}
