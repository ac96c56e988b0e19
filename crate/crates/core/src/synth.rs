//! Synthetic "speakers" for toy corpora.
//!
//! Speaker `k` is a harmonic stack on a fundamental that rises geometrically
//! with `k`, plus noise through a resonator tuned to a speaker-specific band.
//! A slow syllable-rate envelope and a small vibrato make utterances differ,
//! while the spectral centroid stays ordered by speaker id.

use alloc::vec::Vec;
// shadowed by inherent methods whenever std is linked (tests)
#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use core::f64::consts::PI;

/// Default sample rate of generated audio.
pub const SAMPLE_RATE: u32 = 8000;

/// Fundamental frequency of speaker `id` in Hz.
pub fn fundamental(id: usize) -> f64 {
    110.0 * 1.45f64.powi(id as i32)
}

/// Centre of the speaker's noise band in Hz.
pub fn noise_band(id: usize) -> f64 {
    500.0 * 1.45f64.powi(id as i32)
}

/// One utterance of `samples` samples at `rate` Hz, peak-normalized to 0.5.
pub fn utterance(speaker: usize, index: usize, samples: usize, rate: u32, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((speaker as u64) << 32) ^ (index as u64).wrapping_mul(0x9E37_79B9));
    let fs = f64::from(rate);
    let nyquist = fs / 2.0;
    let f0 = fundamental(speaker) * rng.random_range(0.95..1.05);
    let vibrato_rate = rng.random_range(4.0..6.0);
    let syllable_rate = rng.random_range(2.5..4.5);
    let syllable_phase = rng.random_range(0.0..2.0 * PI);
    let harmonics: Vec<(f64, f64)> = (1..=10)
        .filter(|h| f64::from(*h) * f0 * 1.02 < nyquist)
        .map(|h| (f64::from(h), rng.random_range(0.0..2.0 * PI)))
        .collect();

    // two-pole resonator at the speaker's band
    let centre = noise_band(speaker).min(0.8 * nyquist);
    let radius: f64 = 0.97;
    let (a1, a2) = (2.0 * radius * (2.0 * PI * centre / fs).cos(), -radius * radius);
    let (mut y1, mut y2) = (0.0, 0.0);

    let mut phase = 0.0;
    let mut out: Vec<f64> = (0..samples)
        .map(|t| {
            let time = t as f64 / fs;
            let f = f0 * (1.0 + 0.02 * (2.0 * PI * vibrato_rate * time).sin());
            phase += 2.0 * PI * f / fs;
            let voiced: f64 = harmonics.iter().map(|(h, p)| (h * phase + p).sin() / h).sum();
            let white: f64 = rng.random_range(-1.0..1.0);
            let noise = white + a1 * y1 + a2 * y2;
            (y2, y1) = (y1, noise);
            let envelope = 0.6 + 0.4 * (2.0 * PI * syllable_rate * time + syllable_phase).sin();
            envelope * (voiced + 0.05 * noise)
        })
        .collect();
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    out
}

/// Power-weighted mean frequency of `x` in Hz, from a direct DFT on `bins`
/// equally spaced frequencies up to Nyquist. Fewer than `x.len() / 2` bins
/// can step over narrow harmonic peaks.
pub fn spectral_centroid(x: &[f64], rate: u32, bins: usize) -> f64 {
    let fs = f64::from(rate);
    let (mut num, mut den) = (0.0, 0.0);
    for k in 1..=bins {
        let f = fs / 2.0 * k as f64 / bins as f64;
        let w = 2.0 * PI * f / fs;
        let (re, im) = x
            .iter()
            .enumerate()
            .fold((0.0, 0.0), |(re, im), (t, v)| (re + v * (w * t as f64).cos(), im - v * (w * t as f64).sin()));
        let power = re * re + im * im;
        num += f * power;
        den += power;
    }
    num / den
}
