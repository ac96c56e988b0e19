//! Checkpoint files: a text header followed by little-endian `f32` data.
//!
//! ```text
//! dpmamba-checkpoint 1
//! d_model = 16
//! ...
//! sample_rate = 8000
//! param encoder.weight 2 16 16 0
//! param masknet.norm_in.gain 1 16 256
//! data
//! <f32 LE × total>
//! ```
//!
//! A `param` record is `name ndim dims… offset`, with the offset counted in
//! scalars from the start of the data section.

use std::fmt::Write as _;
use std::path::Path;

use dpmamba_core::model::{DpMamba, ModelConfig};
use dpmamba_core::params::ParamStore;
use dpmamba_core::Tensor;

use crate::config::{model_entries, parse_entries, parse_model};
use crate::error::{Error, Result};

pub const MAGIC: &str = "dpmamba-checkpoint";
pub const VERSION: u32 = 1;
const DATA_MARKER: &[u8] = b"\ndata\n";

/// A model configuration with its named weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub sample_rate: u32,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(config: ModelConfig, sample_rate: u32, store: &ParamStore) -> Self {
        Self { config, sample_rate, params: store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("{MAGIC} {VERSION}\n");
        for (k, v) in model_entries(&self.config) {
            let _ = writeln!(header, "{k} = {v}");
        }
        let _ = writeln!(header, "sample_rate = {}", self.sample_rate);
        let mut offset = 0;
        for (name, t) in &self.params {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let _ = writeln!(header, "param {name} {} {} {offset}", dims.len(), dims.join(" "));
            offset += t.numel();
        }
        header.push_str("data\n");
        let mut bytes = header.into_bytes();
        bytes.reserve(offset * 4);
        for (_, t) in &self.params {
            for &v in t.data() {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let bad = |reason: String| Error::Format(format!("{origin}: {reason}"));
        let split = bytes
            .windows(DATA_MARKER.len())
            .position(|w| w == DATA_MARKER)
            .ok_or_else(|| bad("missing data section".into()))?;
        let header = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not UTF-8".into()))?;
        let data = &bytes[split + DATA_MARKER.len()..];

        let mut lines = header.lines();
        let first = lines.next().unwrap_or_default();
        let version = first
            .strip_prefix(MAGIC)
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| bad(format!("not a checkpoint (first line `{first}`)")))?;
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }

        let mut config_text = String::new();
        let mut sample_rate = None;
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            if let Some(rest) = line.strip_prefix("param ") {
                records.push((line_no, rest));
            } else if let Some(e) = parse_entries(line, origin)?.pop() {
                if e.key == "sample_rate" {
                    let rate = e.value.parse().map_err(|_| Error::parse(origin, line_no, "bad sample_rate"))?;
                    sample_rate = Some(rate);
                } else {
                    config_text.push_str(line);
                    config_text.push('\n');
                }
            }
        }
        let config = parse_model(&config_text, origin)?;
        let sample_rate = sample_rate.ok_or_else(|| bad("missing sample_rate".into()))?;

        let total = data.len() / 4;
        if !data.len().is_multiple_of(4) {
            return Err(bad("data section is not a whole number of f32 values".into()));
        }
        let mut params = Vec::with_capacity(records.len());
        for (line_no, rec) in records {
            let fields: Vec<&str> = rec.split_whitespace().collect();
            let parse_err = || Error::parse(origin, line_no, "expected `param name ndim dims… offset`");
            let (name, ndim) = match fields.as_slice() {
                [name, ndim, ..] => (*name, ndim.parse::<usize>().map_err(|_| parse_err())?),
                _ => return Err(parse_err()),
            };
            if fields.len() != ndim + 3 {
                return Err(parse_err());
            }
            let nums = fields[2..]
                .iter()
                .map(|f| f.parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| parse_err())?;
            let (shape, offset) = (&nums[..ndim], nums[ndim]);
            let count: usize = shape.iter().product();
            if offset + count > total {
                return Err(bad(format!("{name} runs past the end of the data section")));
            }
            let values = data[offset * 4..(offset + count) * 4]
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            params.push((name.to_string(), Tensor::new(shape, values)?));
        }
        Ok(Self { config, sample_rate, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    /// Rebuilds the model; every declared parameter must be present exactly once.
    pub fn instantiate(&self) -> Result<(DpMamba, ParamStore)> {
        let (model, mut store) = DpMamba::init(self.config, 0)?;
        if self.params.len() != store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, the configuration declares {}",
                self.params.len(),
                store.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for (name, t) in &self.params {
            if !seen.insert(name.as_str()) {
                return Err(Error::Format(format!("duplicate parameter {name}")));
            }
            store.set(name, t.clone()).map_err(|e| Error::Format(e.to_string()))?;
        }
        Ok((model, store))
    }
}
