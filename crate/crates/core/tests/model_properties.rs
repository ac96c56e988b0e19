//! End-to-end contracts of the separator.

use dpmamba_core::model::{count_parameters, frame_count, DpMamba, ModelConfig, ENC_KERNEL};
use dpmamba_core::numerics::ops::{self, NormKind};
use dpmamba_core::params::ParamStore;
use dpmamba_core::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn noise(len: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[len], -0.5, 0.5, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// (config, published count in millions)
fn published() -> Vec<(&'static str, ModelConfig, f64)> {
    let with = |f: fn(&mut ModelConfig)| {
        let mut c = ModelConfig::s();
        f(&mut c);
        c
    };
    vec![
        ("XS", ModelConfig::xs(), 2.3),
        ("S", ModelConfig::s(), 8.1),
        ("M", ModelConfig::m(), 15.9),
        ("L", ModelConfig::l(), 59.8),
        ("S, H=8", with(|c| c.state_dim = 8), 7.7),
        ("S, H=32", with(|c| c.state_dim = 32), 8.9),
        ("S, unidirectional", with(|c| c.bidirectional = false), 7.4),
        ("S, LayerNorm", with(|c| c.norm = NormKind::LayerNorm), 8.1),
    ]
}

#[test]
fn parameter_counts_match_published_sizes() {
    for (name, config, millions) in published() {
        let count = count_parameters(&config).unwrap() as f64;
        let rel = (count / (millions * 1e6) - 1.0).abs();
        println!("{name:<18} {count:>10} vs {millions}M ({:+.2}%)", 100.0 * (count / (millions * 1e6) - 1.0));
        assert!(rel <= 0.02, "{name}: {count} is {:.2}% off", 100.0 * rel);
    }
}

#[test]
fn output_length_equals_input_length() {
    let (model, store) = DpMamba::init(ModelConfig::tiny(), 1).unwrap();
    for t in [16, 17, 8000, 32000] {
        let [a, b] = model.separate_tensor(&store, &noise(t, t as u64)).unwrap();
        assert_eq!((a.numel(), b.numel()), (t, t));
        assert!(a.is_finite() && b.is_finite());
    }
    let x = noise(100, 0).reshape(&[1, 100]).unwrap();
    let [a, _] = model.separate_tensor(&store, &x).unwrap();
    assert_eq!(a.shape(), &[1, 100]);
}

#[test]
fn short_and_empty_inputs_are_rejected() {
    let (model, store) = DpMamba::init(ModelConfig::tiny(), 1).unwrap();
    assert!(model.separate_tensor(&store, &Tensor::zeros(&[0])).is_err());
    assert!(model.separate_tensor(&store, &Tensor::zeros(&[ENC_KERNEL - 1])).is_err());
    assert!(model.separate_tensor(&store, &Tensor::zeros(&[2, 40])).is_err());
}

#[test]
fn masks_are_nonnegative_and_cover_short_inputs() {
    let mut config = ModelConfig::tiny();
    config.chunk = 250;
    config.d_model = 6;
    let (model, store) = DpMamba::init(config, 2).unwrap();
    let p = store.bind(false);
    // N = 124 < K = 250: the single-chunk padding path
    let h = model.encode(&p, &Var::constant(noise(1000, 3))).unwrap();
    assert_eq!(h.shape(), &[6, frame_count(1000)]);
    let m = model.masks(&p, &h).unwrap();
    assert_eq!(m.shape(), &[2, 6, frame_count(1000)]);
    assert!(m.value().is_finite());
    assert!(m.value().data().iter().all(|&v| v >= 0.0));
}

#[test]
fn encoder_frames_follow_the_stride() {
    assert_eq!(frame_count(16), 1);
    assert_eq!(frame_count(8000), 999);
}

fn set(store: &mut ParamStore, name: &str, value: Tensor) {
    store.set(name, value).unwrap();
}

#[test]
fn tap_copying_encoder_is_inverted_by_its_decoder() {
    // D = 8: channel d copies tap d; the decoder writes it back to tap d.
    let mut config = ModelConfig::tiny();
    config.d_model = 8;
    let (model, mut store) = DpMamba::init(config, 0).unwrap();
    set(&mut store, "encoder.weight", Tensor::from_fn(&[8, 16], |i| f64::from(u8::from(i / 16 == i % 16))));
    set(&mut store, "decoder.weight", Tensor::from_fn(&[16, 8], |i| f64::from(u8::from(i / 8 == i % 8))));
    let p = store.bind(false);
    let x = noise(200, 4);
    let h = model.encode(&p, &Var::constant(x.clone())).unwrap();
    let y = model.decode(&p, &h, 200).unwrap();
    // each frame f restores samples [8f, 8f + 8); the final half window is dropped
    let covered = 8 * frame_count(200);
    assert_eq!(&y.value().data()[..covered], &x.data()[..covered]);
}

/// Solves `a·x = b` for square `a` by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize, cols: usize) -> Vec<f64> {
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| a[i * n + k].abs().total_cmp(&a[j * n + k].abs())).unwrap();
        for j in 0..n {
            a.swap(k * n + j, p * n + j);
        }
        for j in 0..cols {
            b.swap(k * cols + j, p * cols + j);
        }
        for i in k + 1..n {
            let f = a[i * n + k] / a[k * n + k];
            for j in k..n {
                a[i * n + j] -= f * a[k * n + j];
            }
            for j in 0..cols {
                b[i * cols + j] -= f * b[k * cols + j];
            }
        }
    }
    for k in (0..n).rev() {
        for j in 0..cols {
            let s: f64 = (k + 1..n).map(|m| a[k * n + m] * b[m * cols + j]).sum();
            b[k * cols + j] = (b[k * cols + j] - s) / a[k * n + k];
        }
    }
    b
}

#[test]
fn unit_masks_with_pseudo_inverse_decoder_reproduce_the_mixture() {
    let mut config = ModelConfig::tiny();
    config.d_model = 24;
    let (model, mut store) = DpMamba::init(config, 5).unwrap();
    let w = store.get(model.encoder).clone(); // [D×16]
                                              // decoder = ½ (WᵀW)⁻¹Wᵀ: each interior sample is rebuilt by two frames
    let wtw = w.t().unwrap().matmul(&w).unwrap();
    let pinv = solve(wtw.into_data(), w.t().unwrap().into_data(), 16, 24);
    set(&mut store, "decoder.weight", Tensor::new(&[16, 24], pinv.iter().map(|v| 0.5 * v).collect()).unwrap());
    let p = store.bind(false);
    let x = noise(8000, 6);
    let h = model.encode(&p, &Var::constant(x.clone())).unwrap();
    let y = model.decode(&p, &h, 8000).unwrap();
    let err: f64 = y.value().data().iter().zip(x.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    let snr = 10.0 * (x.data().iter().map(|v| v * v).sum::<f64>() / err).log10();
    println!("reconstruction SNR {snr:.2} dB");
    assert!(snr > 30.0, "{snr}");
}

#[test]
fn silent_second_mask_decodes_to_silence() {
    let (model, store) = DpMamba::init(ModelConfig::tiny(), 7).unwrap();
    let p = store.bind(false);
    let h = model.encode(&p, &Var::constant(noise(120, 8))).unwrap();
    let masks = [Tensor::ones(h.shape()), Tensor::zeros(h.shape())];
    let outs: Vec<Tensor> = masks
        .iter()
        .map(|m| {
            let masked = ops::mul(&Var::constant(m.clone()), &h).unwrap();
            model.decode(&p, &masked, 120).unwrap().value().clone()
        })
        .collect();
    assert!(outs[0].max_abs() > 0.0);
    assert_eq!(outs[1].max_abs(), 0.0);
}
