//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. A `preset` key, if
//! present, is applied first; every other key overrides it, in file order.
//!
//! ```text
//! preset = toy
//! state_dim = 16
//! peak_lr = 1.5e-4
//! ```

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use dpmamba_core::model::ModelConfig;
use dpmamba_core::synth::SAMPLE_RATE;
use dpmamba_core::NormKind;

use crate::error::{Error, Result};

/// One `key = value` line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Splits `text` into entries; `origin` names the source in errors.
pub fn parse_entries(text: &str, origin: &str) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::parse(origin, i + 1, format!("expected `key = value`, got `{line}`")));
        };
        let key = key.trim().to_string();
        if out.iter().any(|e| e.key == key) {
            return Err(Error::parse(origin, i + 1, format!("duplicate key `{key}`")));
        }
        out.push(Entry { line: i + 1, key, value: value.trim().to_string() });
    }
    Ok(out)
}

fn value<T: FromStr>(e: &Entry, origin: &str) -> Result<T>
where
    T::Err: Display,
{
    e.value.parse().map_err(|err| Error::parse(origin, e.line, format!("{}: {err}", e.key)))
}

fn flag(e: &Entry, origin: &str) -> Result<bool> {
    match e.value.as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(Error::parse(origin, e.line, format!("{}: expected true or false, got `{other}`", e.key))),
    }
}

pub fn norm_name(kind: NormKind) -> &'static str {
    match kind {
        NormKind::RmsNorm => "rms",
        NormKind::LayerNorm => "layer",
    }
}

fn norm_kind(e: &Entry, origin: &str) -> Result<NormKind> {
    match e.value.to_ascii_lowercase().as_str() {
        "rms" | "rmsnorm" => Ok(NormKind::RmsNorm),
        "layer" | "layernorm" => Ok(NormKind::LayerNorm),
        other => Err(Error::parse(origin, e.line, format!("norm: expected rms or layer, got `{other}`"))),
    }
}

/// Applies a model key to `config`; returns `false` if `key` is not a model key.
fn apply_model_key(config: &mut ModelConfig, e: &Entry, origin: &str) -> Result<bool> {
    match e.key.as_str() {
        "d_model" => config.d_model = value(e, origin)?,
        "blocks" => config.blocks = value(e, origin)?,
        "state_dim" => config.state_dim = value(e, origin)?,
        "chunk" => config.chunk = value(e, origin)?,
        "norm" => config.norm = norm_kind(e, origin)?,
        "bidirectional" => config.bidirectional = flag(e, origin)?,
        "exact_zoh" => config.exact_zoh = flag(e, origin)?,
        "encoder_relu" => config.encoder_relu = flag(e, origin)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Model keys in canonical order, as written to checkpoints.
pub fn model_entries(config: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("d_model", config.d_model.to_string()),
        ("blocks", config.blocks.to_string()),
        ("state_dim", config.state_dim.to_string()),
        ("chunk", config.chunk.to_string()),
        ("norm", norm_name(config.norm).to_string()),
        ("bidirectional", config.bidirectional.to_string()),
        ("exact_zoh", config.exact_zoh.to_string()),
        ("encoder_relu", config.encoder_relu.to_string()),
    ]
}

/// Builds a model config from entries, starting from `preset` (default `s`).
/// Keys not consumed are returned.
fn model_from_entries<'a>(entries: &'a [Entry], origin: &str) -> Result<(ModelConfig, Vec<&'a Entry>)> {
    let mut config = ModelConfig::s();
    if let Some(e) = entries.iter().find(|e| e.key == "preset") {
        config = ModelConfig::named(&e.value)
            .ok_or_else(|| Error::parse(origin, e.line, format!("unknown preset `{}`", e.value)))?;
    }
    let mut rest = Vec::new();
    for e in entries.iter().filter(|e| e.key != "preset") {
        if !apply_model_key(&mut config, e, origin)? {
            rest.push(e);
        }
    }
    config.validate()?;
    Ok((config, rest))
}

fn unknown(e: &Entry, origin: &str) -> Error {
    Error::parse(origin, e.line, format!("unknown key `{}`", e.key))
}

/// Parses model keys only; any other key is an error.
pub fn parse_model(text: &str, origin: &str) -> Result<ModelConfig> {
    let entries = parse_entries(text, origin)?;
    let (config, rest) = model_from_entries(&entries, origin)?;
    match rest.first() {
        Some(e) => Err(unknown(e, origin)),
        None => Ok(config),
    }
}

/// Everything `train-toy` needs besides the corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    /// `0` disables clipping.
    pub clip_norm: f64,
    pub eval_every: usize,
    /// Training segment length in samples.
    pub segment: usize,
    /// Level of the second source relative to the first, in dB.
    pub snr_db_lo: f64,
    pub snr_db_hi: f64,
    /// Fixed validation mixtures drawn once from the corpus.
    pub val_mixtures: usize,
    pub seed: u64,
    pub sample_rate: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(),
            peak_lr: 1.5e-4,
            warmup_steps: 200,
            total_steps: 2000,
            batch_size: 1,
            clip_norm: 5.0,
            eval_every: 100,
            segment: 2000,
            snr_db_lo: -5.0,
            snr_db_hi: 5.0,
            val_mixtures: 2,
            seed: 0,
            sample_rate: SAMPLE_RATE,
        }
    }
}

impl TrainConfig {
    /// Parses a training config; the model preset defaults to `toy`.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries = parse_entries(text, origin)?;
        if !entries.iter().any(|e| e.key == "preset") {
            entries.insert(0, Entry { line: 0, key: "preset".into(), value: "toy".into() });
        }
        let (model, rest) = model_from_entries(&entries, origin)?;
        let mut c = Self { model, ..Self::default() };
        for e in rest {
            match e.key.as_str() {
                "peak_lr" => c.peak_lr = value(e, origin)?,
                "warmup_steps" => c.warmup_steps = value(e, origin)?,
                "total_steps" => c.total_steps = value(e, origin)?,
                "batch_size" => c.batch_size = value(e, origin)?,
                "clip_norm" => c.clip_norm = value(e, origin)?,
                "eval_every" => c.eval_every = value(e, origin)?,
                "segment" => c.segment = value(e, origin)?,
                "snr_db_lo" => c.snr_db_lo = value(e, origin)?,
                "snr_db_hi" => c.snr_db_hi = value(e, origin)?,
                "val_mixtures" => c.val_mixtures = value(e, origin)?,
                "seed" => c.seed = value(e, origin)?,
                "sample_rate" => c.sample_rate = value(e, origin)?,
                _ => return Err(unknown(e, origin)),
            }
        }
        if c.batch_size == 0 || c.segment < dpmamba_core::model::ENC_KERNEL {
            return Err(Error::Format(format!(
                "{origin}: batch_size must be positive and segment at least {} samples",
                dpmamba_core::model::ENC_KERNEL
            )));
        }
        Ok(c)
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
