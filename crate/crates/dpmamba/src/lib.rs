//! File formats, WAV IO, corpus synthesis, benchmarks and the command line
//! around [`dpmamba_core`].

// `!(x <= tol)` style checks are meant to reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod manifest;
pub mod memory;
pub mod wav;

pub use dpmamba_core as core;
pub use error::{Error, Result};
