//! Finite-difference gradient suites, runnable by module name.
//!
//! Inputs are drawn from `U[−2, 2]` with fixed seeds. Every loss is a
//! random-weighted projection of the op output, so no gradient is
//! trivially uniform, except where a suite checks a specific scalar loss.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dual_path::{chunk, dechunk, BlockOptions, ChunkGeometry, DpBlock};
use crate::error::{invalid, Result};
use crate::mamba::BiMamba;
use crate::model::{DpMamba, ModelConfig};
use crate::numerics::gradcheck::{check, GradCheck};
use crate::numerics::ops::{self, NormKind};
use crate::numerics::{Tensor, Var};
use crate::params::{Bound, ParamStore};
use crate::ssm::{Discretization, SelectiveSsm};
use crate::training::{pit_loss, si_snr_var};

/// Tolerance for single primitives.
pub const PRIMITIVE_TOL: f64 = 1e-6;
/// Tolerance for composite units (scan, Mamba, DP block).
pub const UNIT_TOL: f64 = 1e-5;
/// Tolerance for the full model.
pub const MODEL_TOL: f64 = 1e-4;

/// Suite names accepted by [`run`].
pub const MODULES: [&str; 6] = ["numerics", "ssm", "mamba", "dual_path", "model", "training"];

/// Runs one named suite.
pub fn run(module: &str) -> Result<Vec<GradCheck>> {
    match module {
        "numerics" => numerics(),
        "ssm" => ssm(),
        "mamba" => mamba(),
        "dual_path" => dual_path(),
        "model" => model(),
        "training" => training(),
        _ => Err(invalid("gradcheck", format!("unknown module {module}; expected one of {MODULES:?}"))),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn u(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -2.0, 2.0, r)
}

fn project(out: &Var, seed: u64) -> Result<Var> {
    let w = Var::constant(Tensor::uniform(out.shape(), -1.0, 1.0, &mut rng(seed)));
    ops::sum(&ops::mul(out, &w)?)
}

/// Checks `f(x)` through every parameter of `store` plus the extra inputs.
fn with_params(
    name: &str,
    store: &ParamStore,
    extra: &[Tensor],
    tol: f64,
    f: impl Fn(&Bound, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    let n = store.len();
    let mut inputs = store.tensors().to_vec();
    inputs.extend_from_slice(extra);
    check(name, &inputs, tol, |v| f(&Bound::from_vars(v[..n].to_vec()), &v[n..]))
}

fn numerics() -> Result<Vec<GradCheck>> {
    const TOL: f64 = PRIMITIVE_TOL;
    type Unary = fn(&Var) -> Result<Var>;
    let mut out = Vec::new();
    let mut r = rng(1);

    let mm = [u(&[3, 4], &mut r), u(&[4, 2], &mut r)];
    out.push(check("matmul", &mm, TOL, |v| ops::sum(&ops::matmul(&v[0], &v[1])?))?);
    out.push(check("matmul(weighted)", &mm, TOL, |v| project(&ops::matmul(&v[0], &v[1])?, 2))?);

    let lin = [u(&[2, 3, 5], &mut r), u(&[4, 3], &mut r), u(&[4], &mut r)];
    out.push(check("linear", &lin, TOL, |v| project(&ops::linear(&v[0], &v[1], Some(&v[2]))?, 4))?);
    out.push(check("linear(no bias)", &lin[..2], TOL, |v| project(&ops::linear(&v[0], &v[1], None)?, 4))?);

    let conv = [u(&[2, 3, 7], &mut r), u(&[3, 4], &mut r), u(&[3], &mut r)];
    out.push(check("conv1d_depthwise", &conv, TOL, |v| project(&ops::conv1d_depthwise(&v[0], &v[1], &v[2])?, 6))?);
    let short = [u(&[3, 2], &mut r), u(&[3, 4], &mut r), u(&[3], &mut r)];
    out.push(check("conv1d_depthwise(L<W)", &short, TOL, |v| {
        project(&ops::conv1d_depthwise(&v[0], &v[1], &v[2])?, 7)
    })?);

    let unary: [(&str, Unary); 6] = [
        ("exp", ops::exp),
        ("sigmoid", ops::sigmoid),
        ("tanh", ops::tanh),
        ("silu", ops::silu),
        ("softplus", ops::softplus),
        ("relu", ops::relu),
    ];
    let x = u(&[3, 5], &mut r);
    for (i, (name, op)) in unary.into_iter().enumerate() {
        out.push(check(name, core::slice::from_ref(&x), TOL, |v| project(&op(&v[0])?, 10 + i as u64))?);
    }
    let points = Tensor::new(&[3], alloc::vec![-3.0, 0.0, 3.0])?;
    out.push(check("softplus{-3,0,3}", &[points], TOL, |v| ops::sum(&ops::softplus(&v[0])?))?);

    let pair = [u(&[2, 4], &mut r), u(&[2, 4], &mut r)];
    out.push(check("add", &pair, TOL, |v| project(&ops::add(&v[0], &v[1])?, 21))?);
    out.push(check("sub", &pair, TOL, |v| project(&ops::sub(&v[0], &v[1])?, 22))?);
    out.push(check("mul", &pair, TOL, |v| project(&ops::mul(&v[0], &v[1])?, 23))?);
    out.push(check("mean_pair", &pair, TOL, |v| project(&ops::mean_pair(&v[0], &v[1])?, 24))?);
    let with_scalar = [u(&[2, 4], &mut r), Tensor::scalar(0.7)];
    out.push(check("mul(scalar)", &with_scalar, TOL, |v| project(&ops::mul(&v[0], &v[1])?, 25))?);
    out.push(check("scale", &pair[..1], TOL, |v| project(&ops::scale(&v[0], -1.7)?, 26))?);

    let t = [u(&[2, 3, 4], &mut r)];
    out.push(check("flip_last_axis", &t, TOL, |v| project(&ops::flip_last_axis(&v[0])?, 31))?);
    out.push(check("permute", &t, TOL, |v| project(&ops::permute(&v[0], &[2, 0, 1])?, 32))?);
    out.push(check("reshape", &t, TOL, |v| project(&ops::reshape(&v[0], &[6, 4])?, 33))?);
    out.push(check("select", &t, TOL, |v| project(&ops::select(&v[0], 1)?, 34))?);
    out.push(check("resize_last(pad)", &t, TOL, |v| project(&ops::resize_last(&v[0], 6)?, 35))?);
    out.push(check("resize_last(trim)", &t, TOL, |v| project(&ops::resize_last(&v[0], 2)?, 36))?);
    out.push(check("mean", &t, TOL, |v| ops::mean(&ops::mul(&v[0], &v[0])?))?);

    let ch = [u(&[2, 3, 5], &mut r), u(&[3], &mut r), u(&[3], &mut r)];
    out.push(check("scale_channels", &ch[..2], TOL, |v| project(&ops::scale_channels(&v[0], &v[1])?, 41))?);
    out.push(check("rmsnorm", &ch[..2], TOL, |v| {
        project(&ops::channel_norm(&v[0], NormKind::RmsNorm, &v[1], None)?, 42)
    })?);
    out.push(check("layernorm", &ch, TOL, |v| {
        project(&ops::channel_norm(&v[0], NormKind::LayerNorm, &v[1], Some(&v[2]))?, 43)
    })?);

    out.push(check("frames", &[u(&[40], &mut r)], TOL, |v| project(&ops::frames(&v[0], 16, 8)?, 51))?);
    out.push(check("overlap_add", &[u(&[16, 4], &mut r)], TOL, |v| project(&ops::overlap_add(&v[0], 8)?, 52))?);

    let g = ChunkGeometry::half_overlap(7, 4)?;
    out.push(check("chunk", &[u(&[2, 3, 7], &mut r)], TOL, |v| project(&chunk(&v[0], g)?, 61))?);
    out.push(check("dechunk", &[u(&[2, 3, 4, g.chunks], &mut r)], TOL, |v| project(&dechunk(&v[0], g)?, 62))?);
    Ok(out)
}

fn ssm() -> Result<Vec<GradCheck>> {
    // 2 channels, H = 2, L = 4, batch of 2
    let mut out = Vec::new();
    for (mode, name) in [(Discretization::Euler, "selective_scan(euler)"), (Discretization::Zoh, "selective_scan(zoh)")]
    {
        let mut store = ParamStore::new(9);
        let s = SelectiveSsm::declare(&mut store, "ssm", 2, 2, 1);
        let x = u(&[2, 2, 4], &mut rng(4));
        out.push(with_params(name, &store, &[x], UNIT_TOL, |p, v| project(&s.forward(p, &v[0], mode)?, 5))?);
    }
    Ok(out)
}

fn mamba() -> Result<Vec<GradCheck>> {
    // D = 2, E = 4, H = 2, L = 3
    let mut out = Vec::new();
    let cases = [
        ("bimamba(euler)", true, Discretization::Euler),
        ("bimamba(zoh)", true, Discretization::Zoh),
        ("mamba_unidirectional", false, Discretization::Euler),
    ];
    for (name, bidirectional, mode) in cases {
        let mut store = ParamStore::new(12);
        let m = BiMamba::declare(&mut store, "m", 2, 2, bidirectional, mode);
        let x = u(&[2, 3], &mut rng(13));
        out.push(with_params(name, &store, &[x], UNIT_TOL, |p, v| project(&m.forward(p, &v[0])?, 14))?);
    }
    Ok(out)
}

fn dual_path() -> Result<Vec<GradCheck>> {
    // D = 2, K = 4, S = 3, H = 2
    let mut out = Vec::new();
    for (name, norm) in [("dp_block(rmsnorm)", NormKind::RmsNorm), ("dp_block(layernorm)", NormKind::LayerNorm)] {
        let mut store = ParamStore::new(8);
        let options =
            BlockOptions { d_model: 2, state_dim: 2, norm, bidirectional: true, discretization: Discretization::Euler };
        let b = DpBlock::declare(&mut store, "dp", options);
        let x = u(&[2, 4, 3], &mut rng(9));
        out.push(with_params(name, &store, &[x], UNIT_TOL, |p, v| project(&b.forward(p, &v[0])?, 10))?);
    }
    Ok(out)
}

fn model() -> Result<Vec<GradCheck>> {
    // D = 4, R = 1, K = 4, H = 2, T = 64, PIT SI-SNR loss
    let (m, store) = DpMamba::init(ModelConfig::tiny(), 11)?;
    let mut r = rng(12);
    let x = Tensor::uniform(&[64], -0.5, 0.5, &mut r);
    let refs = [Tensor::uniform(&[64], -0.5, 0.5, &mut r), Tensor::uniform(&[64], -0.5, 0.5, &mut r)];
    let check = with_params("dpmamba(tiny)", &store, &[], MODEL_TOL, |p, _| {
        let ests = m.separate(p, &Var::constant(x.clone()))?;
        Ok(pit_loss(&ests, [refs[0].data(), refs[1].data()])?.0)
    })?;
    Ok(alloc::vec![check])
}

fn training() -> Result<Vec<GradCheck>> {
    let mut r = rng(70);
    let reference = u(&[32], &mut r);
    let est = u(&[32], &mut r);
    let noisy = est.zip_map(&reference, |e, s| 0.3 * e + s)?;
    let mut out = Vec::new();
    out.push(check("si_snr", &[est], PRIMITIVE_TOL, |v| si_snr_var(&v[0], reference.data()))?);
    out.push(check("si_snr(near reference)", &[noisy], PRIMITIVE_TOL, |v| si_snr_var(&v[0], reference.data()))?);
    let refs = [u(&[24], &mut r), u(&[24], &mut r)];
    let ests = [u(&[24], &mut r), u(&[24], &mut r)];
    out.push(check("pit_loss", &ests, PRIMITIVE_TOL, |v| {
        Ok(pit_loss(&[v[0].clone(), v[1].clone()], [refs[0].data(), refs[1].data()])?.0)
    })?);
    Ok(out)
}
