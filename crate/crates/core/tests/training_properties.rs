//! Objective, assignment, schedule, mixing and loop contracts.

use dpmamba_core::model::{DpMamba, ModelConfig};
use dpmamba_core::synth::{spectral_centroid, utterance, SAMPLE_RATE};
use dpmamba_core::training::{
    improvement, pit, sdr, si_snr, train_toy, Adam, BatchSource, DynamicBatch, DynamicMixer, FixedBatch, MixSpec,
    Mixture, Schedule, TrainOptions,
};
use dpmamba_core::{Error, Result, Tensor};
use proptest::prelude::*;
use std::f64::consts::PI;

fn tone(n: usize, cycles: f64, amp: f64, phase: f64) -> Vec<f64> {
    (0..n).map(|t| amp * (2.0 * PI * cycles * t as f64 / n as f64 + phase).sin()).collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

#[test]
fn si_snr_with_orthogonal_noise() {
    // whole periods: zero mean and mutually orthogonal
    let s = tone(400, 3.0, 1.0, 0.0);
    for amp in [0.5, 0.1, 2.0] {
        let est = add(&s, &tone(400, 5.0, amp, 0.3));
        let ratio = 1.0 / (amp * amp + 1e-8);
        let expect = 10.0 * ratio.log10();
        let got = si_snr(&est, &s).unwrap();
        assert!((got - expect).abs() < 1e-9, "amp {amp}: {got} vs {expect}");
    }
}

#[test]
fn si_snr_ignores_offset_but_sdr_does_not() {
    let s = tone(400, 3.0, 1.0, 0.0);
    let shifted: Vec<f64> = s.iter().map(|v| v + 0.5).collect();
    assert!((si_snr(&shifted, &s).unwrap() - 80.0).abs() < 1e-9);
    // offset of 0.5 against a unit sine: noise energy 0.25·N vs signal 0.5·N
    let expect = 10.0 * (0.5f64 / (0.25 + 0.5e-8)).log10();
    assert!((sdr(&shifted, &s).unwrap() - expect).abs() < 1e-9);
}

#[test]
fn mismatched_lengths_are_rejected() {
    assert!(matches!(si_snr(&[1.0, 2.0], &[1.0]), Err(Error::ShapeMismatch { .. })));
    assert!(si_snr(&[], &[]).is_err());
}

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let v = || prop::collection::vec(-1.0f64..1.0, 32);
    (v(), v(), v(), v())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pit_is_symmetric_in_estimate_order((e0, e1, r0, r1) in pair()) {
        let a = pit([&e0, &e1], [&r0, &r1]).unwrap();
        let b = pit([&e1, &e0], [&r0, &r1]).unwrap();
        prop_assert!((a.si_snr - b.si_snr).abs() < 1e-12);
        prop_assert_eq!(a.permutation, [b.permutation[1], b.permutation[0]]);
    }

    #[test]
    fn pit_dominates_both_assignments((e0, e1, r0, r1) in pair()) {
        let best = pit([&e0, &e1], [&r0, &r1]).unwrap().si_snr;
        let straight = (si_snr(&e0, &r0).unwrap() + si_snr(&e1, &r1).unwrap()) / 2.0;
        let crossed = (si_snr(&e1, &r0).unwrap() + si_snr(&e0, &r1).unwrap()) / 2.0;
        prop_assert!(best >= straight && best >= crossed);
        prop_assert!(best == straight || best == crossed);
    }

    #[test]
    fn schedule_is_bounded_and_decays_after_warmup(warm in 0usize..50, extra in 1usize..200, s in 0usize..400) {
        let sched = Schedule::new(1.5e-4, warm, warm + extra).unwrap();
        let lr = sched.lr(s);
        prop_assert!((0.0..=1.5e-4 * (1.0 + 1e-12)).contains(&lr));
        if s >= warm {
            prop_assert!(sched.lr(s + 1) <= lr + 1e-18);
            prop_assert!(lr >= 0.1 * 1.5e-4 * (1.0 - 1e-12));
        }
    }
}

#[test]
fn schedule_is_continuous_at_the_warmup_boundary() {
    let sched = Schedule::new(1.5e-4, 200, 2000).unwrap();
    assert_eq!(sched.lr(0), 0.0);
    assert!((sched.lr(199) - 1.5e-4 * 199.0 / 200.0).abs() < 1e-18);
    assert_eq!(sched.lr(200), 1.5e-4);
    assert!((sched.lr(2000) - 1.5e-5).abs() < 1e-18);
    assert!((sched.lr(5000) - 1.5e-5).abs() < 1e-18);
    assert!((sched.lr(1100) - 1.5e-4 * 0.55).abs() < 1e-15, "cosine midpoint");
    assert!(Schedule::new(1e-3, 10, 5).is_err());
}

#[test]
fn improvement_of_the_mixture_is_zero() {
    let r0 = tone(400, 3.0, 1.0, 0.0);
    let r1 = tone(400, 7.0, 0.7, 1.0);
    let mix = add(&r0, &r1);
    let imp = improvement([&mix, &mix], [&r0, &r1], &mix).unwrap();
    assert_eq!(imp.si_snri, 0.0);
    assert_eq!(imp.sdri, 0.0);
}

#[test]
fn improvement_of_the_references_is_the_cap_minus_the_mixture() {
    let r0 = tone(400, 3.0, 1.0, 0.0);
    let r1 = tone(400, 7.0, 0.5, 1.0);
    let mix = add(&r0, &r1);
    // orthogonal sources: the mixture scores 10·log10(|rᵢ|²/|rⱼ|²) against rᵢ
    let m0 = 10.0 * (1.0f64 / (0.25 + 1e-8)).log10();
    let m1 = 10.0 * (0.25f64 / (1.0 + 0.25e-8)).log10();
    let expect = 80.0 - (m0 + m1) / 2.0;
    let imp = improvement([&r1, &r0], [&r0, &r1], &mix).unwrap();
    assert_eq!(imp.permutation, [1, 0]);
    assert!((imp.si_snri - expect).abs() < 1e-8, "{} vs {expect}", imp.si_snri);
    assert!((imp.sdri - expect).abs() < 1e-8);
}

#[test]
fn adam_reaches_the_minimum_of_a_quadratic() {
    let target = [1.5, -2.0, 0.25];
    let mut p = vec![Tensor::zeros(&[3])];
    let mut adam = Adam::new(&p);
    for _ in 0..3000 {
        let g: Vec<f64> = p[0].data().iter().zip(target).map(|(x, t)| 2.0 * (x - t)).collect();
        adam.step(&mut p, &[Tensor::new(&[3], g).unwrap()], 0.01).unwrap();
    }
    for (x, t) in p[0].data().iter().zip(target) {
        assert!((x - t).abs() < 1e-3, "{x} vs {t}");
    }
}

fn pool() -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut sources = Vec::new();
    let mut speakers = Vec::new();
    for spk in 0..3 {
        for utt in 0..2 {
            sources.push(utterance(spk, utt, 600, SAMPLE_RATE, 9));
            speakers.push(spk);
        }
    }
    (sources, speakers)
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

#[test]
fn dynamic_mixtures_reproduce_their_gains() {
    let (sources, speakers) = pool();
    let spec = MixSpec { snr_db: (-5.0, 5.0), segment: 400, seed: 3 };
    let mut mixer = DynamicMixer::new(sources.clone(), speakers.clone(), spec).unwrap();
    for _ in 0..20 {
        let m = mixer.next_mixture().unwrap();
        assert_ne!(speakers[m.ids[0]], speakers[m.ids[1]]);
        for i in 0..2 {
            let raw = &sources[m.ids[i]][m.offset..m.offset + 400];
            let rebuilt: Vec<f64> = raw.iter().map(|v| m.gains[i] * v).collect();
            assert_eq!(rebuilt, m.sources[i]);
        }
        assert_eq!(add(&m.sources[0], &m.sources[1]), m.mixture);
        assert!((rms(&m.sources[0]) - 1.0).abs() < 1e-12);
        let level = 20.0 * rms(&m.sources[1]).log10();
        assert!((-5.0 - 1e-9..=5.0 + 1e-9).contains(&-level), "{level}");
    }
}

#[test]
fn dynamic_mixing_is_deterministic_per_seed() {
    let (sources, speakers) = pool();
    let spec = |seed| MixSpec { snr_db: (0.0, 5.0), segment: 300, seed };
    let draw = |seed| {
        let mixer = DynamicMixer::new(sources.clone(), speakers.clone(), spec(seed)).unwrap();
        DynamicBatch { mixer, batch_size: 4 }.batch(1).unwrap()
    };
    assert_eq!(draw(1), draw(1));
    assert_ne!(draw(1), draw(2));
}

#[test]
fn mixer_rejects_a_single_speaker_pool() {
    let (sources, _) = pool();
    let spec = MixSpec { snr_db: (0.0, 0.0), segment: 300, seed: 0 };
    assert!(DynamicMixer::new(sources.clone(), vec![4; sources.len()], spec).is_err());
}

#[test]
fn synthetic_speakers_have_ordered_centroids() {
    let centroids: Vec<f64> =
        (0..4).map(|spk| spectral_centroid(&utterance(spk, 0, 2000, SAMPLE_RATE, 5), SAMPLE_RATE, 1000)).collect();
    for w in centroids.windows(2) {
        assert!(w[1] > 1.1 * w[0], "{centroids:?}");
    }
}

fn toy_mixtures(len: usize) -> Vec<Mixture> {
    (0..2)
        .map(|i| {
            let a = utterance(0, i, len, SAMPLE_RATE, 1);
            let b = utterance(2, i, len, SAMPLE_RATE, 1);
            Mixture::from_sources(&a, &b, [1.0, 1.0]).unwrap()
        })
        .collect()
}

fn short_run(seed: u64) -> Result<Vec<f64>> {
    let (model, mut store) = DpMamba::init(ModelConfig::tiny(), seed)?;
    let mixes = toy_mixtures(200);
    let options = TrainOptions { schedule: Schedule::new(1e-3, 2, 6)?, clip_norm: Some(5.0), eval_every: 3 };
    let log = train_toy(&model, &mut store, &mut FixedBatch(mixes.clone()), &mixes, &options, |_| {})?;
    assert_eq!(log.rows.len(), 6);
    assert_eq!(log.rows.iter().filter(|r| r.si_snri_on_val.is_some()).count(), 2);
    assert!(log.to_csv().starts_with("step,lr,loss,si_snri_on_val\n1,0.0005,"));
    Ok(store.tensors().iter().flat_map(|t| t.data().to_vec()).collect())
}

#[test]
fn training_is_deterministic_per_seed() {
    assert_eq!(short_run(4).unwrap(), short_run(4).unwrap());
    assert_ne!(short_run(4).unwrap(), short_run(5).unwrap());
}

struct Poisoned(Vec<Mixture>);

impl BatchSource for Poisoned {
    fn batch(&mut self, step: usize) -> Result<Vec<Mixture>> {
        let mut b = self.0.clone();
        if step == 3 {
            b[0].mixture[10] = f64::NAN;
        }
        Ok(b)
    }
}

#[test]
fn non_finite_loss_is_reported_as_divergence() {
    let (model, mut store) = DpMamba::init(ModelConfig::tiny(), 0).unwrap();
    let mixes = toy_mixtures(200);
    let options = TrainOptions { schedule: Schedule::new(1e-3, 0, 10).unwrap(), clip_norm: None, eval_every: 0 };
    let err = train_toy(&model, &mut store, &mut Poisoned(mixes), &[], &options, |_| {}).unwrap_err();
    assert!(matches!(err, Error::Diverged { step: 3, .. }), "{err:?}");
}
