//! The end-to-end masking separator.
//!
//! ```text
//! x [T] ─ pad ─ frames(16, 8) ─ W_enc ─ h [D×N]
//! h ─ norm ─ W_in ─ chunk ─ R × DpBlock ─ dechunk ─ W_split ─ [2×D×N]
//!   ─ tanh(W_o·) ⊙ sigmoid(W_g·) ─ W_mask ─ relu ─ m₁, m₂
//! ŝᵢ = trim(overlap_add(W_dec · (mᵢ ⊙ h), 8), T)
//! ```

use alloc::format;
use alloc::vec::Vec;

use crate::dual_path::{chunk, dechunk, BlockOptions, ChunkGeometry, DpBlock, Norm};
use crate::error::{invalid, Result};
use crate::numerics::ops::{self, NormKind};
use crate::numerics::{Tensor, Var};
use crate::params::{fan_in, Bound, Init, ParamCounter, ParamId, ParamSink, ParamStore};
use crate::ssm::Discretization;

/// Encoder window length in samples.
pub const ENC_KERNEL: usize = 16;
/// Encoder hop in samples.
pub const ENC_STRIDE: usize = 8;
pub const NUM_SPEAKERS: usize = 2;

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Encoder and model width `D`.
    pub d_model: usize,
    /// Number of DP blocks `R`.
    pub blocks: usize,
    /// SSM states per channel `H`.
    pub state_dim: usize,
    /// Chunk size `K`, even.
    pub chunk: usize,
    pub norm: NormKind,
    pub bidirectional: bool,
    /// Exact zero-order-hold input discretization instead of `Δ·B`.
    pub exact_zoh: bool,
    /// ReLU after the encoder.
    pub encoder_relu: bool,
}

impl ModelConfig {
    fn preset(d_model: usize, blocks: usize) -> Self {
        Self {
            d_model,
            blocks,
            state_dim: 16,
            chunk: 250,
            norm: NormKind::RmsNorm,
            bidirectional: true,
            exact_zoh: false,
            encoder_relu: false,
        }
    }

    pub fn xs() -> Self {
        Self::preset(128, 8)
    }

    pub fn s() -> Self {
        Self::preset(256, 8)
    }

    pub fn m() -> Self {
        Self::preset(256, 16)
    }

    pub fn l() -> Self {
        Self::preset(512, 16)
    }

    /// Gradient-check scale: D = 4, R = 1, H = 2, K = 4.
    pub fn tiny() -> Self {
        Self { state_dim: 2, chunk: 4, ..Self::preset(4, 1) }
    }

    /// Overfitting scale: D = 16, R = 2, H = 8, K = 32 (16,784 parameters).
    pub fn toy() -> Self {
        Self { state_dim: 8, chunk: 32, ..Self::preset(16, 2) }
    }

    /// Looks up `xs`, `s`, `m`, `l`, `toy` or `tiny`.
    pub fn named(name: &str) -> Option<Self> {
        Some(match name.to_ascii_lowercase().as_str() {
            "xs" => Self::xs(),
            "s" => Self::s(),
            "m" => Self::m(),
            "l" => Self::l(),
            "toy" => Self::toy(),
            "tiny" => Self::tiny(),
            _ => return None,
        })
    }

    /// `E = 2D`.
    pub fn expanded(&self) -> usize {
        2 * self.d_model
    }

    pub fn discretization(&self) -> Discretization {
        if self.exact_zoh {
            Discretization::Zoh
        } else {
            Discretization::Euler
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Err(invalid("ModelConfig", format!("{reason}: {self:?}")));
        if self.d_model == 0 || self.blocks == 0 || self.state_dim == 0 {
            return bad("D, R and H must be positive");
        }
        if self.chunk < 2 || !self.chunk.is_multiple_of(2) {
            return bad("chunk size must be even and at least 2");
        }
        Ok(())
    }

    fn block_options(&self) -> BlockOptions {
        BlockOptions {
            d_model: self.d_model,
            state_dim: self.state_dim,
            norm: self.norm,
            bidirectional: self.bidirectional,
            discretization: self.discretization(),
        }
    }
}

/// Exact trainable-parameter count of a configuration.
pub fn count_parameters(config: &ModelConfig) -> Result<usize> {
    let mut counter = ParamCounter::default();
    DpMamba::declare(&mut counter, *config)?;
    Ok(counter.scalars)
}

/// Padded waveform length: the smallest `T' ≥ T` with `(T' − 16) % 8 == 0`.
pub fn padded_len(samples: usize) -> usize {
    if samples <= ENC_KERNEL {
        ENC_KERNEL
    } else {
        ENC_KERNEL + (samples - ENC_KERNEL).div_ceil(ENC_STRIDE) * ENC_STRIDE
    }
}

/// Encoder frames for a waveform of `samples` samples.
pub fn frame_count(samples: usize) -> usize {
    (padded_len(samples) - ENC_KERNEL) / ENC_STRIDE + 1
}

/// Parameter layout of the full model.
#[derive(Clone, Debug)]
pub struct DpMamba {
    pub config: ModelConfig,
    /// `[D×16]`
    pub encoder: ParamId,
    pub norm_in: Norm,
    /// `[D×D]`
    pub in_proj: ParamId,
    pub blocks: Vec<DpBlock>,
    /// `[2D×D]`, `[2D]`
    pub split: (ParamId, ParamId),
    /// `[D×D]`, `[D]`
    pub out_tanh: (ParamId, ParamId),
    /// `[D×D]`, `[D]`
    pub out_gate: (ParamId, ParamId),
    /// `[D×D]`
    pub mask: ParamId,
    /// `[16×D]`
    pub decoder: ParamId,
}

impl DpMamba {
    pub fn declare(sink: &mut dyn ParamSink, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let encoder = sink.declare("encoder.weight".into(), &[d, ENC_KERNEL], fan_in(ENC_KERNEL));
        let norm_in = Norm::declare(sink, "masknet.norm_in", config.norm, d);
        let in_proj = sink.declare("masknet.in_proj.weight".into(), &[d, d], fan_in(d));
        let blocks = (0..config.blocks)
            .map(|r| DpBlock::declare(sink, &format!("masknet.block{r}"), config.block_options()))
            .collect();
        let mut with_bias = |name: &str, rows: usize| {
            (
                sink.declare(format!("{name}.weight"), &[rows, d], fan_in(d)),
                sink.declare(format!("{name}.bias"), &[rows], Init::Zeros),
            )
        };
        let split = with_bias("masknet.split", NUM_SPEAKERS * d);
        let out_tanh = with_bias("masknet.out_tanh", d);
        let out_gate = with_bias("masknet.out_gate", d);
        let mask = sink.declare("masknet.mask.weight".into(), &[d, d], fan_in(d));
        let decoder = sink.declare("decoder.weight".into(), &[ENC_KERNEL, d], fan_in(d));
        Ok(Self { config, encoder, norm_in, in_proj, blocks, split, out_tanh, out_gate, mask, decoder })
    }

    /// Declares the layout into a fresh store seeded with `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new(seed);
        let model = Self::declare(&mut store, config)?;
        Ok((model, store))
    }

    fn waveform_len(x: &Var) -> Result<usize> {
        match *x.shape() {
            [t] | [1, t] if t >= ENC_KERNEL => Ok(t),
            _ => Err(invalid("waveform", format!("expected [T] or [1×T] with T ≥ {ENC_KERNEL}, got {:?}", x.shape()))),
        }
    }

    /// `x: [T]` or `[1×T]` to `h: [D×N]` with `N = frame_count(T)`.
    pub fn encode(&self, p: &Bound, x: &Var) -> Result<Var> {
        let t = Self::waveform_len(x)?;
        let flat = ops::resize_last(&ops::reshape(x, &[t])?, padded_len(t))?;
        let frames = ops::frames(&flat, ENC_KERNEL, ENC_STRIDE)?;
        let h = ops::matmul(&p[self.encoder], &frames)?;
        if self.config.encoder_relu {
            ops::relu(&h)
        } else {
            Ok(h)
        }
    }

    /// Both masks, stacked as `[2×D×N]`; every entry is nonnegative.
    pub fn masks(&self, p: &Bound, h: &Var) -> Result<Var> {
        let [d, n] = *h.shape() else {
            return Err(invalid("masknet", format!("expected [D×N], got {:?}", h.shape())));
        };
        if d != self.config.d_model {
            return Err(invalid("masknet", format!("expected D = {}, got {d}", self.config.d_model)));
        }
        let geometry = ChunkGeometry::half_overlap(n, self.config.chunk)?;
        let x = ops::linear(&self.norm_in.forward(p, h)?, &p[self.in_proj], None)?;
        let mut c = chunk(&x, geometry)?;
        for block in &self.blocks {
            c = block.forward(p, &c)?;
        }
        let y = dechunk(&c, geometry)?;
        let split = ops::linear(&y, &p[self.split.0], Some(&p[self.split.1]))?;
        let per_speaker = ops::reshape(&split, &[NUM_SPEAKERS, d, n])?;
        let shaped = ops::tanh(&ops::linear(&per_speaker, &p[self.out_tanh.0], Some(&p[self.out_tanh.1]))?)?;
        let gate = ops::sigmoid(&ops::linear(&per_speaker, &p[self.out_gate.0], Some(&p[self.out_gate.1]))?)?;
        ops::relu(&ops::linear(&ops::mul(&shaped, &gate)?, &p[self.mask], None)?)
    }

    /// `h: [D×N]` back to a waveform of `samples` samples.
    pub fn decode(&self, p: &Bound, h: &Var, samples: usize) -> Result<Var> {
        let frames = ops::matmul(&p[self.decoder], h)?;
        ops::resize_last(&ops::overlap_add(&frames, ENC_STRIDE)?, samples)
    }

    /// Two estimated sources with the shape of `x`.
    pub fn separate(&self, p: &Bound, x: &Var) -> Result<[Var; NUM_SPEAKERS]> {
        let t = Self::waveform_len(x)?;
        let h = self.encode(p, x)?;
        let masks = self.masks(p, &h)?;
        let source = |i: usize| -> Result<Var> {
            let masked = ops::mul(&ops::select(&masks, i)?, &h)?;
            ops::reshape(&self.decode(p, &masked, t)?, x.shape())
        };
        Ok([source(0)?, source(1)?])
    }

    /// Inference on plain tensors; no graph is retained.
    pub fn separate_tensor(&self, store: &ParamStore, x: &Tensor) -> Result<[Tensor; NUM_SPEAKERS]> {
        let [a, b] = self.separate(&store.bind(false), &Var::constant(x.clone()))?;
        Ok([a.value().clone(), b.value().clone()])
    }
}
