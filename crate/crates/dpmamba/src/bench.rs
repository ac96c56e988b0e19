//! Wall time and peak memory of the scan kernels.
//!
//! Every implementation runs the same time-invariant problem, so the dense
//! oracle can take part; inputs are built before measuring starts.

use std::fmt;
use std::time::Instant;

use dpmamba_core::ssm::{kernel_convolve, scan_parallel, scan_sequential, DenseSsm, Discretization, SsmParams};
use dpmamba_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::memory;

pub const CSV_HEADER: &str = "impl,L,E,H,wall_ns,peak_bytes";

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ScanImpl {
    Seq,
    Par,
    Oracle,
}

impl fmt::Display for ScanImpl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Seq => "seq",
            Self::Par => "par",
            Self::Oracle => "oracle",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchRow {
    pub implementation: ScanImpl,
    pub len: usize,
    pub channels: usize,
    pub state_dim: usize,
    pub wall_ns: u128,
    pub peak_bytes: usize,
}

impl fmt::Display for BenchRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{}",
            self.implementation, self.len, self.channels, self.state_dim, self.wall_ns, self.peak_bytes
        )
    }
}

struct Problem {
    x: Tensor,
    params: SsmParams,
    /// Per-channel step, `B` and `C` for the oracle.
    delta: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
}

fn problem(len: usize, channels: usize, state_dim: usize, seed: u64) -> Result<Problem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Tensor::from_fn(&[channels, state_dim], |i| -((i % state_dim) as f64 + 1.0));
    let delta: Vec<f64> = (0..channels).map(|_| rng.random_range(0.01..0.1)).collect();
    let b: Vec<f64> = (0..state_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let c: Vec<f64> = (0..state_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let params = SsmParams::new(
        a,
        Tensor::from_fn(&[channels, len], |i| delta[i / len.max(1)]),
        Tensor::from_fn(&[len, state_dim], |i| b[i % state_dim]),
        Tensor::from_fn(&[len, state_dim], |i| c[i % state_dim]),
    )?;
    let x = Tensor::uniform(&[channels, len], -1.0, 1.0, &mut rng);
    Ok(Problem { x, params, delta, b, c })
}

fn oracle(p: &Problem, mode: Discretization) -> Result<Tensor> {
    let [e, l] = *p.x.shape() else { unreachable!("built as [E×L]") };
    let h = p.params.state_dim();
    let mut out = Vec::with_capacity(e * l);
    for ch in 0..e {
        let a = &p.params.a.data()[ch * h..(ch + 1) * h];
        let dense = DenseSsm::from_diagonal(a, &p.b, &p.c, p.delta[ch], mode)?;
        let row = Tensor::new(&[l], p.x.data()[ch * l..(ch + 1) * l].to_vec())?;
        out.extend_from_slice(kernel_convolve(&row, &dense)?.data());
    }
    Ok(Tensor::new(&[e, l], out)?)
}

/// Runs one implementation on a random problem of the given size.
/// `peak_bytes` is `0` unless [`memory::CountingAlloc`] is installed.
pub fn run(implementation: ScanImpl, len: usize, channels: usize, state_dim: usize, seed: u64) -> Result<BenchRow> {
    let p = problem(len, channels, state_dim, seed)?;
    let mode = Discretization::Zoh;
    let start = Instant::now();
    let (out, peak_bytes) = memory::measure(|| match implementation {
        ScanImpl::Seq => scan_sequential(&p.x, &p.params, mode).map_err(Error::from),
        ScanImpl::Par => scan_parallel(&p.x, &p.params, mode).map_err(Error::from),
        ScanImpl::Oracle => oracle(&p, mode),
    });
    let wall_ns = start.elapsed().as_nanos();
    std::hint::black_box(out?);
    Ok(BenchRow { implementation, len, channels, state_dim, wall_ns, peak_bytes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn implementations_agree_on_the_bench_problem() {
        let p = problem(50, 3, 4, 1).unwrap();
        let seq = scan_sequential(&p.x, &p.params, Discretization::Zoh).unwrap();
        let par = scan_parallel(&p.x, &p.params, Discretization::Zoh).unwrap();
        let dense = oracle(&p, Discretization::Zoh).unwrap();
        assert!(seq.max_abs_diff(&par).unwrap() < 1e-10);
        assert!(seq.max_abs_diff(&dense).unwrap() < 1e-10);
    }

    #[test]
    fn row_format() {
        let row = run(ScanImpl::Seq, 8, 2, 3, 0).unwrap();
        let text = row.to_string();
        assert!(text.starts_with("seq,8,2,3,"), "{text}");
        assert_eq!(text.split(',').count(), CSV_HEADER.split(',').count());
        assert!(run(ScanImpl::Oracle, 2000, 1, 4, 0).is_err());
    }
}
