//! Objective, metrics, optimizer, schedule and the toy training loop.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;
// shadowed by inherent methods whenever std is linked (tests)
#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape_mismatch, Error, Result};
use crate::model::{DpMamba, NUM_SPEAKERS};
use crate::numerics::ops;
use crate::numerics::{Function, Tensor, Var};
use crate::params::ParamStore;

/// Relative noise floor: caps a perfect estimate at `10·log10(1/ε) = 80` dB.
pub const SNR_EPS: f64 = 1e-8;
/// Absolute guard so a zero projection stays finite.
const SNR_TINY: f64 = 1e-30;

fn zero_mean(x: &[f64]) -> Vec<f64> {
    let mu = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - mu).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Projection of `est` onto `reference` and the residual.
struct Projection {
    target: Vec<f64>,
    noise: Vec<f64>,
    target_energy: f64,
    noise_energy: f64,
}

fn project(est: &[f64], reference: &[f64]) -> Result<Projection> {
    let rr = dot(reference, reference);
    if rr == 0.0 {
        return Err(Error::ZeroReference);
    }
    let a = dot(est, reference) / rr;
    let target: Vec<f64> = reference.iter().map(|r| a * r).collect();
    let noise: Vec<f64> = est.iter().zip(&target).map(|(e, s)| e - s).collect();
    Ok(Projection { target_energy: dot(&target, &target), noise_energy: dot(&noise, &noise), target, noise })
}

impl Projection {
    fn db(&self) -> f64 {
        10.0 * ((self.target_energy + SNR_TINY) / (self.noise_energy + SNR_EPS * self.target_energy + SNR_TINY)).log10()
    }
}

fn check_lengths(est: &[f64], reference: &[f64]) -> Result<()> {
    if est.len() != reference.len() || est.is_empty() {
        return Err(shape_mismatch("si_snr", &[est.len()], &[reference.len()]));
    }
    Ok(())
}

/// Scale-invariant SNR in dB of `est` against `reference`, both made zero-mean.
pub fn si_snr(est: &[f64], reference: &[f64]) -> Result<f64> {
    check_lengths(est, reference)?;
    Ok(project(&zero_mean(est), &zero_mean(reference))?.db())
}

/// SNR after least-squares scaling of the reference, without mean removal.
pub fn sdr(est: &[f64], reference: &[f64]) -> Result<f64> {
    check_lengths(est, reference)?;
    Ok(project(est, reference)?.db())
}

struct SiSnr {
    reference: Vec<f64>,
}

impl Function for SiSnr {
    fn name(&self) -> &'static str {
        "si_snr"
    }

    fn backward(&self, inputs: &[Var], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let est = zero_mean(inputs[0].value().data());
        let p = project(&est, &self.reference).expect("validated in forward");
        let k = grad.item() * 10.0 / core::f64::consts::LN_10;
        let signal = 2.0 / (p.target_energy + SNR_TINY);
        let denom = p.noise_energy + SNR_EPS * p.target_energy + SNR_TINY;
        let mut g: Vec<f64> =
            p.target.iter().zip(&p.noise).map(|(s, n)| k * (signal * s - 2.0 * (n + SNR_EPS * s) / denom)).collect();
        // through the mean removal
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        g.iter_mut().for_each(|v| *v -= mean);
        vec![Some(Tensor::new(inputs[0].shape(), g).expect("same shape"))]
    }
}

/// Differentiable [`si_snr`] of a waveform against a fixed reference.
pub fn si_snr_var(est: &Var, reference: &[f64]) -> Result<Var> {
    check_lengths(est.value().data(), reference)?;
    let reference = zero_mean(reference);
    let value = project(&zero_mean(est.value().data()), &reference)?.db();
    Var::from_op(Tensor::scalar(value), vec![est.clone()], SiSnr { reference })
}

/// `perm[i]` is the estimate assigned to reference `i`.
pub type Permutation = [usize; NUM_SPEAKERS];

const PERMUTATIONS: [Permutation; 2] = [[0, 1], [1, 0]];

/// Best assignment and its mean SI-SNR.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PitScore {
    pub permutation: Permutation,
    pub si_snr: f64,
}

/// Mean SI-SNR under each assignment.
fn assignment_scores(ests: [&[f64]; 2], refs: [&[f64]; 2]) -> Result<[f64; 2]> {
    let mut table = [[0.0; 2]; 2];
    for (e, row) in table.iter_mut().enumerate() {
        for (r, cell) in row.iter_mut().enumerate() {
            *cell = si_snr(ests[e], refs[r])?;
        }
    }
    Ok(PERMUTATIONS.map(|p| (table[p[0]][0] + table[p[1]][1]) / 2.0))
}

/// Utterance-level permutation-invariant SI-SNR.
pub fn pit(ests: [&[f64]; 2], refs: [&[f64]; 2]) -> Result<PitScore> {
    let scores = assignment_scores(ests, refs)?;
    let best = if scores[1] > scores[0] { 1 } else { 0 };
    Ok(PitScore { permutation: PERMUTATIONS[best], si_snr: scores[best] })
}

/// `−max_π mean SI-SNR`, differentiable in the estimates.
pub fn pit_loss(ests: &[Var; 2], refs: [&[f64]; 2]) -> Result<(Var, Permutation)> {
    let score = pit([ests[0].value().data(), ests[1].value().data()], refs)?;
    let [p0, p1] = score.permutation;
    let a = si_snr_var(&ests[p0], refs[0])?;
    let b = si_snr_var(&ests[p1], refs[1])?;
    Ok((ops::scale(&ops::add(&a, &b)?, -0.5)?, score.permutation))
}

/// Improvements over the unprocessed mixture, averaged over speakers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Improvement {
    pub si_snri: f64,
    pub sdri: f64,
    pub permutation: Permutation,
}

pub fn improvement(ests: [&[f64]; 2], refs: [&[f64]; 2], mixture: &[f64]) -> Result<Improvement> {
    let perm = pit(ests, refs)?.permutation;
    let (mut si, mut sd) = (0.0, 0.0);
    for (r, &e) in perm.iter().enumerate() {
        si += si_snr(ests[e], refs[r])? - si_snr(mixture, refs[r])?;
        sd += sdr(ests[e], refs[r])? - sdr(mixture, refs[r])?;
    }
    Ok(Improvement { si_snri: si / 2.0, sdri: sd / 2.0, permutation: perm })
}

// ── optimization ────────────────────────────────────────────────────────

/// Linear warmup from 0 to `peak_lr`, then cosine decay to
/// `floor_ratio·peak_lr` at `total_steps`, constant afterwards.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub floor_ratio: f64,
}

impl Schedule {
    pub fn new(peak_lr: f64, warmup_steps: usize, total_steps: usize) -> Result<Self> {
        if warmup_steps > total_steps || !(peak_lr > 0.0) {
            return Err(invalid(
                "Schedule",
                format!("need peak > 0 and warmup ≤ total, got {peak_lr}, {warmup_steps}, {total_steps}"),
            ));
        }
        Ok(Self { peak_lr, warmup_steps, total_steps, floor_ratio: 0.1 })
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let cosine = 0.5 * (1.0 + (core::f64::consts::PI * progress).cos());
        self.peak_lr * (self.floor_ratio + (1.0 - self.floor_ratio) * cosine)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(invalid("Adam::step", "parameter list changed"));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() {
                return Err(shape_mismatch("Adam::step", p.shape(), g.shape()));
            }
            let triples = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((pv, &gv), (mv, vv)) in triples {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= k));
    }
    norm
}

// ── data ────────────────────────────────────────────────────────────────

/// `mixture = gains[0]·pool[ids[0]] + gains[1]·pool[ids[1]]` over one
/// aligned segment; `sources` holds the two gained terms.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    pub ids: [usize; 2],
    pub offset: usize,
    pub gains: [f64; 2],
    pub sources: [Vec<f64>; 2],
    pub mixture: Vec<f64>,
}

impl Mixture {
    /// Mixes two equal-length signals at the given gains.
    pub fn from_sources(a: &[f64], b: &[f64], gains: [f64; 2]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(shape_mismatch("Mixture", &[a.len()], &[b.len()]));
        }
        let s0: Vec<f64> = a.iter().map(|v| gains[0] * v).collect();
        let s1: Vec<f64> = b.iter().map(|v| gains[1] * v).collect();
        let mixture = s0.iter().zip(&s1).map(|(x, y)| x + y).collect();
        Ok(Self { ids: [0, 1], offset: 0, gains, sources: [s0, s1], mixture })
    }

    pub fn refs(&self) -> [&[f64]; 2] {
        [&self.sources[0], &self.sources[1]]
    }
}

/// Dynamic-mixing parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixSpec {
    /// Relative level of the second source, uniform in this range (dB).
    pub snr_db: (f64, f64),
    /// Segment length in samples.
    pub segment: usize,
    pub seed: u64,
}

fn rms(x: &[f64]) -> f64 {
    (dot(x, x) / x.len().max(1) as f64).sqrt()
}

/// Draws fresh two-source mixtures from a source pool.
#[derive(Clone, Debug)]
pub struct DynamicMixer {
    pool: Vec<Vec<f64>>,
    /// Speaker identity of each pool entry; mixtures never pair a speaker with itself.
    speakers: Vec<usize>,
    spec: MixSpec,
    rng: ChaCha8Rng,
}

impl DynamicMixer {
    pub fn new(pool: Vec<Vec<f64>>, speakers: Vec<usize>, spec: MixSpec) -> Result<Self> {
        if pool.len() != speakers.len() {
            return Err(invalid("DynamicMixer", "one speaker id per source"));
        }
        if pool.iter().any(|s| s.len() < spec.segment || rms(&s[..spec.segment]) == 0.0) {
            return Err(invalid("DynamicMixer", format!("every source needs {} non-silent samples", spec.segment)));
        }
        let first = speakers.first().copied();
        if speakers.iter().all(|&s| Some(s) == first) {
            return Err(invalid("DynamicMixer", "need at least two distinct speakers"));
        }
        if !(spec.snr_db.0 <= spec.snr_db.1) {
            return Err(invalid("DynamicMixer", "empty SNR range"));
        }
        Ok(Self { pool, speakers, rng: ChaCha8Rng::seed_from_u64(spec.seed), spec })
    }

    pub fn pool(&self) -> &[Vec<f64>] {
        &self.pool
    }

    pub fn next_mixture(&mut self) -> Result<Mixture> {
        let n = self.pool.len();
        let a = self.rng.random_range(0..n);
        let b = loop {
            let b = self.rng.random_range(0..n);
            if self.speakers[b] != self.speakers[a] {
                break b;
            }
        };
        let seg = self.spec.segment;
        let max_offset = self.pool[a].len().min(self.pool[b].len()) - seg;
        let offset = self.rng.random_range(0..=max_offset);
        let (sa, sb) = (&self.pool[a][offset..offset + seg], &self.pool[b][offset..offset + seg]);
        let (lo, hi) = self.spec.snr_db;
        let db = if lo < hi { self.rng.random_range(lo..hi) } else { lo };
        let (ra, rb) = (rms(sa), rms(sb));
        if ra == 0.0 || rb == 0.0 {
            return Err(Error::ZeroReference);
        }
        let gains = [1.0 / ra, 10f64.powf(-db / 20.0) / rb];
        let mut m = Mixture::from_sources(sa, sb, gains)?;
        m.ids = [a, b];
        m.offset = offset;
        Ok(m)
    }
}

/// Where training batches come from.
pub trait BatchSource {
    fn batch(&mut self, step: usize) -> Result<Vec<Mixture>>;
}

/// The same mixtures every step.
#[derive(Clone, Debug)]
pub struct FixedBatch(pub Vec<Mixture>);

impl BatchSource for FixedBatch {
    fn batch(&mut self, _: usize) -> Result<Vec<Mixture>> {
        Ok(self.0.clone())
    }
}

/// `batch_size` fresh mixtures per step.
#[derive(Clone, Debug)]
pub struct DynamicBatch {
    pub mixer: DynamicMixer,
    pub batch_size: usize,
}

impl BatchSource for DynamicBatch {
    fn batch(&mut self, _: usize) -> Result<Vec<Mixture>> {
        (0..self.batch_size).map(|_| self.mixer.next_mixture()).collect()
    }
}

// ── loop ────────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub schedule: Schedule,
    /// Joint gradient-norm clip, if any.
    pub clip_norm: Option<f64>,
    /// Validation period in steps; `0` disables validation.
    pub eval_every: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub si_snri_on_val: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    /// `step,lr,loss,si_snri_on_val`; validation is blank on steps without it.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,loss,si_snri_on_val\n");
        for r in &self.rows {
            let val = r.si_snri_on_val.map(|v| format!("{v}")).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{}", r.step, r.lr, r.loss, val);
        }
        out
    }

    pub fn last_validation(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.si_snri_on_val)
    }
}

/// Mean SI-SNRi of `model` over `mixtures`.
pub fn evaluate(model: &DpMamba, store: &ParamStore, mixtures: &[Mixture]) -> Result<Improvement> {
    let (mut si, mut sd) = (0.0, 0.0);
    let mut perm = [0, 1];
    for m in mixtures {
        let [a, b] = model.separate_tensor(store, &Tensor::new(&[m.mixture.len()], m.mixture.clone())?)?;
        let imp = improvement([a.data(), b.data()], m.refs(), &m.mixture)?;
        si += imp.si_snri;
        sd += imp.sdri;
        perm = imp.permutation;
    }
    let n = mixtures.len().max(1) as f64;
    Ok(Improvement { si_snri: si / n, sdri: sd / n, permutation: perm })
}

/// Mean PIT loss over a batch and its parameter gradients, in store order.
pub fn loss_and_grads(model: &DpMamba, store: &ParamStore, batch: &[Mixture]) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(invalid("train", "empty batch"));
    }
    let bound = store.bind(true);
    let mut total: Option<Var> = None;
    for m in batch {
        let x = Var::constant(Tensor::new(&[m.mixture.len()], m.mixture.clone())?);
        let ests = model.separate(&bound, &x)?;
        let (loss, _) = pit_loss(&ests, m.refs())?;
        total = Some(match total {
            None => loss,
            Some(t) => ops::add(&t, &loss)?,
        });
    }
    let loss = ops::scale(&total.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
    loss.backward()?;
    Ok((loss.value().item(), bound.grads()))
}

/// Runs `schedule.total_steps` Adam steps; step `s` (from 1) uses `lr(s)`.
/// Stops with [`Error::Diverged`] on a non-finite loss or gradient.
pub fn train_toy(
    model: &DpMamba,
    store: &mut ParamStore,
    data: &mut dyn BatchSource,
    validation: &[Mixture],
    options: &TrainOptions,
    mut on_step: impl FnMut(&LogRow),
) -> Result<TrainLog> {
    let mut adam = Adam::new(store.tensors());
    let mut log = TrainLog::default();
    for step in 1..=options.schedule.total_steps {
        let batch = data.batch(step)?;
        let (loss, mut grads) = match loss_and_grads(model, store, &batch) {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => return Err(Error::Diverged { step, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, loss });
        }
        if let Some(c) = options.clip_norm {
            clip_grad_norm(&mut grads, c);
        }
        let lr = options.schedule.lr(step);
        adam.step(store.tensors_mut(), &grads, lr)?;
        let validate = options.eval_every > 0
            && !validation.is_empty()
            && (step % options.eval_every == 0 || step == options.schedule.total_steps);
        let si_snri_on_val = if validate { Some(evaluate(model, store, validation)?.si_snri) } else { None };
        let row = LogRow { step, lr, loss, si_snri_on_val };
        on_step(&row);
        log.rows.push(row);
    }
    Ok(log)
}
