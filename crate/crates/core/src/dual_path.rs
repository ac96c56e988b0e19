//! Chunking, overlap-add and the dual-path block.
//!
//! A feature sequence `[B×D×N]` is right-padded with zeros and cut into `S`
//! chunks of `K` frames with hop `K/2`, giving `[B×D×K×S]`. Each DP block
//! runs a residual Mamba unit along `K` inside every chunk, then along `S`
//! across chunks at every in-chunk position.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::mamba::BiMamba;
use crate::numerics::ops::{self, NormKind};
use crate::numerics::{Function, Tensor, Var};
use crate::params::{Bound, Init, ParamId, ParamSink};
use crate::ssm::Discretization;

/// How `N` frames map onto overlapping chunks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChunkGeometry {
    /// Frames before padding.
    pub frames: usize,
    pub chunk: usize,
    pub hop: usize,
    /// Number of chunks `S`.
    pub chunks: usize,
}

impl ChunkGeometry {
    /// `S = 1` when `N ≤ K`, otherwise `⌈(N − K)/hop⌉ + 1`.
    pub fn new(frames: usize, chunk: usize, hop: usize) -> Result<Self> {
        if frames == 0 || chunk == 0 || hop == 0 || hop > chunk {
            return Err(invalid(
                "chunk",
                format!("need N ≥ 1 and 1 ≤ hop ≤ K, got N = {frames}, K = {chunk}, hop = {hop}"),
            ));
        }
        let chunks = if frames <= chunk { 1 } else { (frames - chunk).div_ceil(hop) + 1 };
        Ok(Self { frames, chunk, hop, chunks })
    }

    /// Half-overlapping chunks, the layout the model uses. `K` must be even.
    pub fn half_overlap(frames: usize, chunk: usize) -> Result<Self> {
        if !chunk.is_multiple_of(2) {
            return Err(invalid("chunk", format!("K must be even, got {chunk}")));
        }
        Self::new(frames, chunk, chunk / 2)
    }

    /// Length after zero padding, `(S − 1)·hop + K`.
    pub fn padded(&self) -> usize {
        (self.chunks - 1) * self.hop + self.chunk
    }

    pub fn padding(&self) -> usize {
        self.padded() - self.frames
    }

    /// How many chunks cover frame `n`.
    pub fn coverage(&self, n: usize) -> usize {
        let first = (n + 1).saturating_sub(self.chunk).div_ceil(self.hop);
        let last = (n / self.hop).min(self.chunks - 1);
        last + 1 - first
    }
}

fn split_frames(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [d, n] => Ok((1, d, n)),
        [b, d, n] => Ok((b, d, n)),
        _ => Err(invalid(op, format!("expected [B×D×N] or [D×N], got {shape:?}"))),
    }
}

fn chunk_tensor(x: &Tensor, g: ChunkGeometry, rows: usize, out_shape: Vec<usize>) -> Tensor {
    let (n, k, s_count) = (g.frames, g.chunk, g.chunks);
    let mut out = vec![0.0; rows * k * s_count];
    for r in 0..rows {
        let src = &x.data()[r * n..(r + 1) * n];
        let dst = &mut out[r * k * s_count..(r + 1) * k * s_count];
        for s in 0..s_count {
            for i in 0..k {
                let t = s * g.hop + i;
                if t < n {
                    dst[i * s_count + s] = src[t];
                }
            }
        }
    }
    Tensor::new(&out_shape, out).expect("chunk layout")
}

/// Sum of every chunk value that lands on each original frame.
fn gather_tensor(c: &Tensor, g: ChunkGeometry, rows: usize, out_shape: Vec<usize>) -> Tensor {
    let (n, k, s_count) = (g.frames, g.chunk, g.chunks);
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        let src = &c.data()[r * k * s_count..(r + 1) * k * s_count];
        let dst = &mut out[r * n..(r + 1) * n];
        for s in 0..s_count {
            for i in 0..k {
                let t = s * g.hop + i;
                if t < n {
                    dst[t] += src[i * s_count + s];
                }
            }
        }
    }
    Tensor::new(&out_shape, out).expect("frame layout")
}

fn chunk_shape(lead: &[usize], g: ChunkGeometry) -> Vec<usize> {
    let mut s = lead.to_vec();
    s.extend([g.chunk, g.chunks]);
    s
}

struct Chunk {
    geometry: ChunkGeometry,
}

impl Function for Chunk {
    fn name(&self) -> &'static str {
        "chunk"
    }

    fn backward(&self, inputs: &[Var], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let shape = inputs[0].shape().to_vec();
        let rows = shape[..shape.len() - 1].iter().product();
        vec![Some(gather_tensor(grad, self.geometry, rows, shape))]
    }
}

struct Dechunk {
    geometry: ChunkGeometry,
}

impl Function for Dechunk {
    fn name(&self) -> &'static str {
        "dechunk"
    }

    fn backward(&self, inputs: &[Var], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let g = self.geometry;
        let shape = inputs[0].shape();
        let rows = shape[..shape.len() - 2].iter().product();
        let scaled = normalize(grad, g);
        vec![Some(chunk_tensor(&scaled, g, rows, shape.to_vec()))]
    }
}

/// Divides each frame by its chunk coverage.
fn normalize(x: &Tensor, g: ChunkGeometry) -> Tensor {
    let n = g.frames;
    let inv: Vec<f64> = (0..n).map(|t| 1.0 / g.coverage(t) as f64).collect();
    Tensor::from_fn(x.shape(), |i| x.data()[i] * inv[i % n])
}

/// `[B×D×N]` (or `[D×N]`) to `[B×D×K×S]` (or `[D×K×S]`), zero padded.
pub fn chunk(x: &Var, geometry: ChunkGeometry) -> Result<Var> {
    let (b, d, n) = split_frames("chunk", x.shape())?;
    if n != geometry.frames {
        return Err(invalid("chunk", format!("geometry is for N = {}, input has {n}", geometry.frames)));
    }
    let lead = &x.shape()[..x.shape().len() - 1];
    let value = chunk_tensor(x.value(), geometry, b * d, chunk_shape(lead, geometry));
    Var::from_op(value, vec![x.clone()], Chunk { geometry })
}

/// Overlap-add back to `[B×D×N]`, dividing each frame by its coverage and
/// dropping padding frames.
pub fn dechunk(c: &Var, geometry: ChunkGeometry) -> Result<Var> {
    let shape = c.shape();
    let rank = shape.len();
    if !(3..=4).contains(&rank) || shape[rank - 2..] != [geometry.chunk, geometry.chunks] {
        return Err(invalid(
            "dechunk",
            format!("expected [.. × {} × {}], got {shape:?}", geometry.chunk, geometry.chunks),
        ));
    }
    let rows = shape[..rank - 2].iter().product();
    let mut out_shape = shape[..rank - 2].to_vec();
    out_shape.push(geometry.frames);
    let summed = gather_tensor(c.value(), geometry, rows, out_shape);
    Var::from_op(normalize(&summed, geometry), vec![c.clone()], Dechunk { geometry })
}

/// A chunked feature together with the geometry needed to undo chunking.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkedFeature {
    /// `[D×K×S]`
    pub data: Tensor,
    pub geometry: ChunkGeometry,
}

impl ChunkedFeature {
    /// Chunks `h: [D×N]` with half-overlapping windows of `chunk` frames.
    pub fn from_frames(h: &Tensor, chunk_size: usize) -> Result<Self> {
        let [_, n] = *h.shape() else {
            return Err(invalid("chunk", format!("expected [D×N], got {:?}", h.shape())));
        };
        let geometry = ChunkGeometry::half_overlap(n, chunk_size)?;
        let data = chunk(&Var::constant(h.clone()), geometry)?.value().clone();
        Ok(Self { data, geometry })
    }

    pub fn original_length(&self) -> usize {
        self.geometry.frames
    }

    /// The `[D×N]` feature, exactly as chunked.
    pub fn to_frames(&self) -> Result<Tensor> {
        Ok(dechunk(&Var::constant(self.data.clone()), self.geometry)?.value().clone())
    }
}

// ── normalization and the DP block ──────────────────────────────────────

/// Learnable channel normalization.
#[derive(Clone, Debug)]
pub struct Norm {
    pub kind: NormKind,
    pub gain: ParamId,
    pub bias: Option<ParamId>,
}

impl Norm {
    pub fn declare(sink: &mut dyn ParamSink, prefix: &str, kind: NormKind, channels: usize) -> Self {
        Self {
            kind,
            gain: sink.declare(format!("{prefix}.gain"), &[channels], Init::Ones),
            bias: (kind == NormKind::LayerNorm)
                .then(|| sink.declare(format!("{prefix}.bias"), &[channels], Init::Zeros)),
        }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        ops::channel_norm(x, self.kind, &p[self.gain], self.bias.map(|b| &p[b]))
    }
}

/// Residual `x + Mamba(Norm(x))` over `[B'×D×L]`.
#[derive(Clone, Debug)]
pub struct ResidualMamba {
    pub norm: Norm,
    pub mamba: BiMamba,
}

impl ResidualMamba {
    fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        ops::add(x, &self.mamba.forward(p, &self.norm.forward(p, x)?)?)
    }
}

/// Options shared by every DP block of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockOptions {
    pub d_model: usize,
    pub state_dim: usize,
    pub norm: NormKind,
    pub bidirectional: bool,
    pub discretization: Discretization,
}

/// One intra-chunk plus one inter-chunk residual Mamba unit.
#[derive(Clone, Debug)]
pub struct DpBlock {
    pub intra: ResidualMamba,
    pub inter: ResidualMamba,
}

impl DpBlock {
    pub fn declare(sink: &mut dyn ParamSink, prefix: &str, o: BlockOptions) -> Self {
        let unit = |sink: &mut dyn ParamSink, name: &str| ResidualMamba {
            norm: Norm::declare(sink, &format!("{prefix}.{name}.norm"), o.norm, o.d_model),
            mamba: BiMamba::declare(
                sink,
                &format!("{prefix}.{name}.mamba"),
                o.d_model,
                o.state_dim,
                o.bidirectional,
                o.discretization,
            ),
        };
        Self { intra: unit(sink, "intra"), inter: unit(sink, "inter") }
    }

    /// `[B×D×K×S]` (or `[D×K×S]`) to the same shape.
    pub fn forward(&self, p: &Bound, h: &Var) -> Result<Var> {
        let unbatched = h.shape().len() == 3;
        let h4 = if unbatched {
            let mut s = vec![1];
            s.extend_from_slice(h.shape());
            ops::reshape(h, &s)?
        } else {
            h.clone()
        };
        let [b, d, k, s] = *h4.shape() else {
            return Err(invalid("dp_block", format!("expected [B×D×K×S], got {:?}", h.shape())));
        };
        // intra: every chunk is a length-K sequence
        let x = ops::reshape(&ops::permute(&h4, &[0, 3, 1, 2])?, &[b * s, d, k])?;
        let x = self.intra.forward(p, &x)?;
        let x = ops::permute(&ops::reshape(&x, &[b, s, d, k])?, &[0, 2, 3, 1])?;
        // inter: every in-chunk position is a length-S sequence
        let y = ops::reshape(&ops::permute(&x, &[0, 2, 1, 3])?, &[b * k, d, s])?;
        let y = self.inter.forward(p, &y)?;
        let y = ops::permute(&ops::reshape(&y, &[b, k, d, s])?, &[0, 2, 1, 3])?;
        if unbatched {
            ops::reshape(&y, h.shape())
        } else {
            Ok(y)
        }
    }
}
