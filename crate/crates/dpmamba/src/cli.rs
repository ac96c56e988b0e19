//! Command-line surface.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use dpmamba_core::checks;
use dpmamba_core::model::{count_parameters, ModelConfig};
use dpmamba_core::synth::SAMPLE_RATE;
use dpmamba_core::training::{
    evaluate, train_toy, DynamicBatch, DynamicMixer, MixSpec, Mixture, Schedule, TrainOptions,
};
use dpmamba_core::Tensor;

use crate::bench::{self, ScanImpl, CSV_HEADER};
use crate::checkpoint::Checkpoint;
use crate::config::{parse_model, read_text, TrainConfig};
use crate::corpus::{write_corpus, CorpusSpec};
use crate::error::{Error, Result};
use crate::manifest::{Manifest, SourcePool};
use crate::wav::{self, WavBuffer};

#[derive(Debug, Parser)]
#[command(name = "dpmamba", version, about = "Dual-path Mamba speech separation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Separate mixtures into two sources (one worker per file).
    Separate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Input mixtures; with several, each gets its own subdirectory.
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a toy model with dynamic mixing over a corpus manifest.
    TrainToy {
        /// Training config; defaults to the toy preset and schedule.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training log CSV; defaults to the checkpoint path with `.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the finite-difference gradient suites.
    Gradcheck {
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(checks::MODULES))]
        module: Option<String>,
    },
    /// Print the trainable-parameter count of a configuration.
    Params {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// xs, s, m, l, toy or tiny.
        #[arg(long)]
        preset: Option<String>,
        /// Fail unless the count is within `tol` (relative) of this value.
        #[arg(long)]
        expect: Option<f64>,
        #[arg(long, default_value_t = 0.02, requires = "expect")]
        tol: f64,
    },
    /// Time and measure the scan implementations; prints CSV.
    BenchScan {
        #[arg(long = "impl", value_enum, num_args = 1.., default_values_t = [ScanImpl::Seq])]
        implementation: Vec<ScanImpl>,
        #[arg(long = "L", value_delimiter = ',', default_values_t = [1000, 8000])]
        len: Vec<usize>,
        #[arg(long = "E", value_delimiter = ',', default_values_t = [4])]
        channels: Vec<usize>,
        #[arg(long = "H", value_delimiter = ',', default_values_t = [16])]
        state_dim: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean SI-SNRi and SDRi over mixtures drawn from a manifest.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 8)]
        mixtures: usize,
        /// Segment length in samples; defaults to the shortest source.
        #[arg(long)]
        segment: Option<usize>,
        #[arg(long, default_value_t = -5.0, allow_negative_numbers = true)]
        snr_db_lo: f64,
        #[arg(long, default_value_t = 5.0, allow_negative_numbers = true)]
        snr_db_hi: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic multi-speaker corpus and its manifest.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        speakers: usize,
        #[arg(long, default_value_t = 4)]
        utterances: usize,
        #[arg(long, default_value_t = 1.0)]
        seconds: f64,
        #[arg(long, default_value_t = SAMPLE_RATE)]
        sample_rate: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Separate { ckpt, inputs, out } => separate(&ckpt, &inputs, &out),
        Command::TrainToy { config, corpus, out, log, seed } => {
            let mut c = match &config {
                Some(p) => TrainConfig::parse(&read_text(p)?, &p.display().to_string())?,
                None => TrainConfig::default(),
            };
            if let Some(s) = seed {
                c.seed = s;
            }
            let log = log.unwrap_or_else(|| out.with_extension("csv"));
            train(&c, &corpus, &out, &log)
        }
        Command::Gradcheck { module } => gradcheck(module.as_deref()),
        Command::Params { config, preset, expect, tol } => params(config.as_deref(), preset.as_deref(), expect, tol),
        Command::BenchScan { implementation, len, channels, state_dim, seed, out } => {
            let mut csv = format!("{CSV_HEADER}\n");
            for &i in &implementation {
                for &l in &len {
                    for &e in &channels {
                        for &h in &state_dim {
                            csv.push_str(&format!("{}\n", bench::run(i, l, e, h, seed)?));
                        }
                    }
                }
            }
            emit(out.as_deref(), &csv)
        }
        Command::Eval { ckpt, manifest, mixtures, segment, snr_db_lo, snr_db_hi, seed } => {
            eval(&ckpt, &manifest, mixtures, segment, (snr_db_lo, snr_db_hi), seed)
        }
        Command::SynthCorpus { out, speakers, utterances, seconds, sample_rate, seed } => {
            let spec = CorpusSpec {
                speakers,
                utterances,
                samples: (seconds * f64::from(sample_rate)).round() as usize,
                sample_rate,
                seed,
            };
            let manifest = write_corpus(&out, &spec)?;
            println!("{}", manifest.display());
            Ok(())
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes()).map_err(|e| Error::io(Path::new("<stdout>"), e))
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn separate(ckpt: &Path, inputs: &[PathBuf], out: &Path) -> Result<()> {
    let checkpoint = Checkpoint::load(ckpt)?;
    let (model, store) = checkpoint.instantiate()?;
    let rate = checkpoint.sample_rate;
    let target = |input: &Path| -> PathBuf {
        if inputs.len() == 1 {
            out.to_path_buf()
        } else {
            out.join(input.file_stem().unwrap_or_default())
        }
    };
    let (model, store) = (&model, &store);
    let results: Vec<Result<()>> = std::thread::scope(|scope| {
        let workers: Vec<_> = inputs
            .iter()
            .map(|input| {
                let dir = target(input);
                scope.spawn(move || -> Result<()> {
                    let mix = wav::read(input)?;
                    if mix.sample_rate != rate {
                        return Err(Error::SampleRate { path: input.clone(), found: mix.sample_rate, expected: rate });
                    }
                    let x = Tensor::new(&[mix.samples.len()], mix.samples)?;
                    let sources = model.separate_tensor(store, &x)?;
                    create_dir(&dir)?;
                    for (i, s) in sources.iter().enumerate() {
                        let path = dir.join(format!("s{}.wav", i + 1));
                        wav::write(&path, &WavBuffer::new(rate, s.data().to_vec()))?;
                    }
                    Ok(())
                })
            })
            .collect();
        workers.into_iter().map(|w| w.join().unwrap_or_else(|_| Err(Error::Format("worker panicked".into())))).collect()
    });
    results.into_iter().collect()
}

fn mixer(pool: &SourcePool, segment: usize, snr_db: (f64, f64), seed: u64) -> Result<DynamicMixer> {
    let spec = MixSpec { snr_db, segment, seed };
    Ok(DynamicMixer::new(pool.sources.clone(), pool.speakers.clone(), spec)?)
}

/// Seed offset separating validation draws from training draws.
const VALIDATION_STREAM: u64 = 0x5EED_07A1;

pub fn train(c: &TrainConfig, corpus: &Path, out: &Path, log_path: &Path) -> Result<()> {
    let pool = Manifest::read(corpus)?.load()?;
    if pool.sample_rate != c.sample_rate {
        return Err(Error::SampleRate { path: corpus.to_path_buf(), found: pool.sample_rate, expected: c.sample_rate });
    }
    let snr = (c.snr_db_lo, c.snr_db_hi);
    let mut val_mixer = mixer(&pool, c.segment, snr, c.seed ^ VALIDATION_STREAM)?;
    let validation: Vec<Mixture> =
        (0..c.val_mixtures).map(|_| val_mixer.next_mixture()).collect::<dpmamba_core::Result<_>>()?;
    let mut data = DynamicBatch { mixer: mixer(&pool, c.segment, snr, c.seed)?, batch_size: c.batch_size };
    let options = TrainOptions {
        schedule: Schedule::new(c.peak_lr, c.warmup_steps, c.total_steps)?,
        clip_norm: (c.clip_norm > 0.0).then_some(c.clip_norm),
        eval_every: c.eval_every,
    };
    let (model, mut store) = dpmamba_core::model::DpMamba::init(c.model, c.seed)?;
    let log = train_toy(&model, &mut store, &mut data, &validation, &options, |row| {
        if let Some(v) = row.si_snri_on_val {
            eprintln!("step {} lr {:.3e} loss {:.3} val SI-SNRi {:.2} dB", row.step, row.lr, row.loss, v);
        }
    })?;
    Checkpoint::from_store(c.model, pool.sample_rate, &store).save(out)?;
    std::fs::write(log_path, log.to_csv()).map_err(|e| Error::io(log_path, e))
}

pub fn gradcheck(module: Option<&str>) -> Result<()> {
    let modules: Vec<&str> = match module {
        Some(m) => vec![m],
        None => checks::MODULES.to_vec(),
    };
    let mut failed = Vec::new();
    for m in modules {
        for c in checks::run(m)? {
            let verdict = if c.passed() { "PASS" } else { "FAIL" };
            println!(
                "{verdict} {m}/{} max_rel_err={:.2e} tol={:.0e} n={}",
                c.name, c.max_rel_err, c.tolerance, c.checked
            );
            if !c.passed() {
                failed.push(format!("{m}/{}", c.name));
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::CheckFailed(failed.join(", ")))
    }
}

pub fn params(config: Option<&Path>, preset: Option<&str>, expect: Option<f64>, tol: f64) -> Result<()> {
    let model = match (config, preset) {
        (Some(p), _) => parse_model(&read_text(p)?, &p.display().to_string())?,
        (None, Some(name)) => {
            ModelConfig::named(name).ok_or_else(|| Error::Usage(format!("unknown preset `{name}`")))?
        }
        (None, None) => return Err(Error::Usage("give --config or --preset".into())),
    };
    let count = count_parameters(&model)?;
    println!("{count}");
    if let Some(target) = expect {
        let rel = (count as f64 - target).abs() / target;
        if !(rel <= tol) {
            return Err(Error::CheckFailed(format!(
                "{count} parameters is {:.2}% from {target}, tolerance {:.2}%",
                100.0 * rel,
                100.0 * tol
            )));
        }
    }
    Ok(())
}

pub fn eval(
    ckpt: &Path,
    manifest: &Path,
    mixtures: usize,
    segment: Option<usize>,
    snr_db: (f64, f64),
    seed: u64,
) -> Result<()> {
    let checkpoint = Checkpoint::load(ckpt)?;
    let (model, store) = checkpoint.instantiate()?;
    let pool = Manifest::read(manifest)?.load()?;
    if pool.sample_rate != checkpoint.sample_rate {
        return Err(Error::SampleRate {
            path: manifest.to_path_buf(),
            found: pool.sample_rate,
            expected: checkpoint.sample_rate,
        });
    }
    if mixtures == 0 {
        return Err(Error::Usage("--mixtures must be positive".into()));
    }
    let mut m = mixer(&pool, segment.unwrap_or_else(|| pool.shortest()), snr_db, seed)?;
    let set: Vec<Mixture> = (0..mixtures).map(|_| m.next_mixture()).collect::<dpmamba_core::Result<_>>()?;
    let imp = evaluate(&model, &store, &set)?;
    println!("mixtures={mixtures}");
    println!("si_snri_db={:.4}", imp.si_snri);
    println!("sdri_db={:.4}", imp.sdri);
    Ok(())
}
