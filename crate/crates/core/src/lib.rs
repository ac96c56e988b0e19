//! Dual-path bidirectional Mamba for time-domain speech separation.
//!
//! Everything here is `no_std` + `alloc`: a small dense tensor engine with
//! reverse-mode differentiation ([`numerics`]), selective state-space scans
//! ([`ssm`]), the bidirectional Mamba unit ([`mamba`]), chunking and the
//! dual-path block ([`dual_path`]), the end-to-end masking model ([`model`]),
//! and the SI-SNR training harness ([`training`]). File formats, WAV IO and
//! the command line live in the `dpmamba` crate.

#![no_std]
// `!(x > 0.0)` style checks are meant to reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod checks;
pub mod dual_path;
pub mod error;
pub mod mamba;
pub mod model;
pub mod numerics;
pub mod params;
pub mod ssm;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{NormKind, Tensor, Var};
