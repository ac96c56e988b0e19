//! The bidirectional Mamba unit.
//!
//! ```text
//! h→ = W_in·h          z = W_gate·h          g = silu(z)
//! x→ = silu(conv→(h→))                 x← = silu(conv←(flip(h→)))
//! y→ = (SSM→(x→) + D→⊙x→) ⊙ g          y← = (SSM←(x←) + D←⊙x←) ⊙ flip(g)
//! out = W_out · (y→ + flip(y←)) / 2
//! ```
//!
//! The backward branch runs in reversed time, so its gate is reversed too and
//! each gate value multiplies the same waveform position in both branches.
//! The unidirectional variant drops the backward branch and the average.

use alloc::format;

use crate::error::{invalid, Result};
use crate::numerics::ops;
use crate::numerics::Var;
use crate::params::{fan_in, Bound, Init, ParamId, ParamSink};
use crate::ssm::{step_rank, Discretization, SelectiveSsm};

/// Width of the depthwise causal convolution.
pub const CONV_WIDTH: usize = 4;

/// Convolution, selective SSM and skip vector for one scan direction.
#[derive(Clone, Debug)]
pub struct Direction {
    /// `[E×W]`
    pub conv_kernel: ParamId,
    /// `[E]`
    pub conv_bias: ParamId,
    pub ssm: SelectiveSsm,
    /// `[E]`
    pub skip: ParamId,
}

impl Direction {
    fn declare(sink: &mut dyn ParamSink, prefix: &str, e: usize, h: usize, rank: usize) -> Self {
        Self {
            conv_kernel: sink.declare(format!("{prefix}.conv_kernel"), &[e, CONV_WIDTH], fan_in(CONV_WIDTH)),
            conv_bias: sink.declare(format!("{prefix}.conv_bias"), &[e], fan_in(CONV_WIDTH)),
            ssm: SelectiveSsm::declare(sink, &format!("{prefix}.ssm"), e, h, rank),
            skip: sink.declare(format!("{prefix}.skip"), &[e], Init::Ones),
        }
    }

    /// `SSM(x) + D⊙x` with `x = silu(conv(u))`, ungated.
    fn run(&self, p: &Bound, u: &Var, mode: Discretization) -> Result<Var> {
        let x = ops::silu(&ops::conv1d_depthwise(u, &p[self.conv_kernel], &p[self.conv_bias])?)?;
        let y = self.ssm.forward(p, &x, mode)?;
        ops::add(&y, &ops::scale_channels(&x, &p[self.skip])?)
    }
}

/// Parameter layout of one (bi)directional Mamba unit.
#[derive(Clone, Debug)]
pub struct BiMamba {
    /// `[E×D]`
    pub w_in: ParamId,
    /// `[E×D]`
    pub w_gate: ParamId,
    /// `[D×E]`
    pub w_out: ParamId,
    pub forward: Direction,
    /// `None` for the unidirectional variant.
    pub backward: Option<Direction>,
    pub d_model: usize,
    pub expanded: usize,
    pub mode: Discretization,
}

impl BiMamba {
    /// Declares a unit of width `d_model` with `E = 2·d_model` and `state_dim`
    /// states per channel.
    pub fn declare(
        sink: &mut dyn ParamSink,
        prefix: &str,
        d_model: usize,
        state_dim: usize,
        bidirectional: bool,
        mode: Discretization,
    ) -> Self {
        let e = 2 * d_model;
        let rank = step_rank(d_model);
        Self {
            w_in: sink.declare(format!("{prefix}.w_in"), &[e, d_model], fan_in(d_model)),
            w_gate: sink.declare(format!("{prefix}.w_gate"), &[e, d_model], fan_in(d_model)),
            forward: Direction::declare(sink, &format!("{prefix}.fwd"), e, state_dim, rank),
            backward: bidirectional.then(|| Direction::declare(sink, &format!("{prefix}.bwd"), e, state_dim, rank)),
            w_out: sink.declare(format!("{prefix}.w_out"), &[d_model, e], fan_in(e)),
            d_model,
            expanded: e,
            mode,
        }
    }

    pub fn is_bidirectional(&self) -> bool {
        self.backward.is_some()
    }

    /// `h: [B×D×L]` (or `[D×L]`) to the same shape.
    pub fn forward(&self, p: &Bound, h: &Var) -> Result<Var> {
        let (_, d, _) = ops::channel_first_dims("bimamba", h.shape())?;
        if d != self.d_model {
            return Err(invalid("bimamba", format!("expected D = {}, got {d}", self.d_model)));
        }
        let hf = ops::linear(h, &p[self.w_in], None)?;
        let gate = ops::silu(&ops::linear(h, &p[self.w_gate], None)?)?;
        let yf = ops::mul(&self.forward.run(p, &hf, self.mode)?, &gate)?;
        let merged = match &self.backward {
            None => yf,
            Some(bwd) => {
                let hb = ops::flip_last_axis(&hf)?;
                let yb = ops::mul(&bwd.run(p, &hb, self.mode)?, &ops::flip_last_axis(&gate)?)?;
                ops::mean_pair(&yf, &ops::flip_last_axis(&yb)?)?
            }
        };
        ops::linear(&merged, &p[self.w_out], None)
    }
}
