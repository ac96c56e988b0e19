//! The `dpmamba` binary: outputs, determinism and exit codes.

use std::path::Path;
use std::process::{Command, Output};

use dpmamba::checkpoint::Checkpoint;
use dpmamba::wav::{self, WavBuffer};
use dpmamba_core::model::{DpMamba, ModelConfig};

fn dpmamba(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpmamba")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn params_reports_the_small_preset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("s.cfg");
    std::fs::write(&cfg, "preset = s\n").unwrap();
    let out = dpmamba(&["params", "--config", s(&cfg), "--expect", "8.1e6", "--tol", "0.02"]);
    assert_eq!(code(&out), 0);
    let n: f64 = stdout(&out).trim().parse().unwrap();
    assert!((n - 8.1e6).abs() / 8.1e6 < 0.02, "{n}");
    assert_eq!(code(&dpmamba(&["params", "--preset", "xs", "--expect", "8.1e6"])), 4);
    assert_eq!(code(&dpmamba(&["params"])), 2);
    std::fs::write(&cfg, "preset = s\nwidth = 3\n").unwrap();
    assert_eq!(code(&dpmamba(&["params", "--config", s(&cfg)])), 3);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&dpmamba(&["frobnicate"])), 2);
    assert_eq!(code(&dpmamba(&["gradcheck", "--module", "nope"])), 2);
    assert_eq!(code(&dpmamba(&["separate", "--ckpt", "x"])), 2);
}

#[test]
fn gradcheck_passes_on_a_fresh_checkout() {
    let out = dpmamba(&["gradcheck"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let text = stdout(&out);
    assert!(text.lines().count() > 20);
    assert!(text.lines().all(|l| l.starts_with("PASS ")));
    assert_eq!(code(&dpmamba(&["gradcheck", "--module", "ssm"])), 0);
}

#[test]
fn bench_scan_emits_csv() {
    let out = dpmamba(&["bench-scan", "--impl", "seq", "par", "oracle", "--L", "16,64", "--E", "2", "--H", "4"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "impl,L,E,H,wall_ns,peak_bytes");
    assert_eq!(lines.len(), 7);
    assert!(lines[1].starts_with("seq,16,2,4,"));
    assert!(lines[6].starts_with("oracle,64,2,4,"));
    let peak: usize = lines[1].rsplit(',').next().unwrap().parse().unwrap();
    assert!(peak > 0, "the binary installs the counting allocator");
    assert_eq!(code(&dpmamba(&["bench-scan", "--impl", "oracle", "--L", "5000"])), 3);
}

fn tiny_checkpoint(dir: &Path, rate: u32) -> std::path::PathBuf {
    let (_, store) = DpMamba::init(ModelConfig::tiny(), 1).unwrap();
    let path = dir.join("tiny.ckpt");
    Checkpoint::from_store(ModelConfig::tiny(), rate, &store).save(&path).unwrap();
    path
}

#[test]
fn separate_keeps_length_and_rate() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path(), 8000);
    let mix = dir.path().join("mix.wav");
    let samples: Vec<f64> = (0..8000).map(|t| 0.3 * (t as f64 * 0.05).sin()).collect();
    wav::write(&mix, &WavBuffer::new(8000, samples)).unwrap();
    let out_dir = dir.path().join("out");
    let out = dpmamba(&["separate", "--ckpt", s(&ckpt), "--in", s(&mix), "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["s1.wav", "s2.wav"] {
        let w = wav::read(&out_dir.join(name)).unwrap();
        assert_eq!((w.sample_rate, w.samples.len()), (8000, 8000));
    }

    let other = dir.path().join("other.wav");
    wav::write(&other, &WavBuffer::new(8000, vec![0.1; 1234])).unwrap();
    let many = dir.path().join("many");
    let out = dpmamba(&["separate", "--ckpt", s(&ckpt), "--in", s(&mix), s(&other), "--out", s(&many)]);
    assert_eq!(code(&out), 0);
    assert_eq!(wav::read(&many.join("other").join("s2.wav")).unwrap().samples.len(), 1234);
    assert_eq!(wav::read(&many.join("mix").join("s1.wav")).unwrap().samples.len(), 8000);
}

#[test]
fn separate_rejects_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path(), 8000);
    let wide = dir.path().join("wide.wav");
    wav::write(&wide, &WavBuffer::new(16000, vec![0.0; 1000])).unwrap();
    let out = dpmamba(&["separate", "--ckpt", s(&ckpt), "--in", s(&wide), "--out", s(dir.path())]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("sample rate"));
    let short = dir.path().join("short.wav");
    wav::write(&short, &WavBuffer::new(8000, vec![0.0; 10])).unwrap();
    assert_eq!(code(&dpmamba(&["separate", "--ckpt", s(&ckpt), "--in", s(&short), "--out", s(dir.path())])), 3);
    let missing = dir.path().join("nothing.ckpt");
    assert_eq!(code(&dpmamba(&["separate", "--ckpt", s(&missing), "--in", s(&short), "--out", s(dir.path())])), 3);
}

#[test]
fn corpus_train_eval_pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let out = dpmamba(&[
        "synth-corpus",
        "--out",
        s(&corpus),
        "--speakers",
        "3",
        "--utterances",
        "2",
        "--seconds",
        "0.2",
        "--seed",
        "4",
    ]);
    assert_eq!(code(&out), 0);
    let manifest = corpus.join("manifest.txt");
    assert_eq!(stdout(&out).trim(), s(&manifest));

    let cfg = dir.path().join("train.cfg");
    std::fs::write(&cfg, "preset = tiny\ntotal_steps = 6\nwarmup_steps = 2\neval_every = 3\nsegment = 800\n").unwrap();
    let run = |name: &str| {
        let ckpt = dir.path().join(name);
        let out =
            dpmamba(&["train-toy", "--config", s(&cfg), "--corpus", s(&manifest), "--out", s(&ckpt), "--seed", "9"]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        (std::fs::read(&ckpt).unwrap(), std::fs::read_to_string(ckpt.with_extension("csv")).unwrap())
    };
    let (a, log_a) = run("a.ckpt");
    let (b, log_b) = run("b.ckpt");
    assert_eq!(a, b);
    assert_eq!(log_a, log_b);
    assert!(log_a.starts_with("step,lr,loss,si_snri_on_val\n"));
    assert_eq!(log_a.lines().count(), 7);

    let ckpt = dir.path().join("a.ckpt");
    let eval = |seed: &str| {
        stdout(&dpmamba(&["eval", "--ckpt", s(&ckpt), "--manifest", s(&manifest), "--mixtures", "2", "--seed", seed]))
    };
    let report = eval("1");
    assert!(report.contains("mixtures=2\nsi_snri_db="), "{report}");
    assert!(report.contains("\nsdri_db="));
    assert_eq!(report, eval("1"));

    std::fs::write(&cfg, "preset = tiny\nsegment = 99999\n").unwrap();
    let out = dpmamba(&["train-toy", "--config", s(&cfg), "--corpus", s(&manifest), "--out", s(&ckpt)]);
    assert_eq!(code(&out), 3, "segment longer than every source");
}
