//! Mono 16-bit PCM WAV files.

use std::path::Path;

use crate::error::{Error, Result};

/// Full-scale value of a 16-bit sample.
pub const FULL_SCALE: f64 = 32768.0;

#[derive(Clone, Debug, PartialEq)]
pub struct WavBuffer {
    pub sample_rate: u32,
    /// Mono samples in `[−1, 1]`.
    pub samples: Vec<f64>,
}

impl WavBuffer {
    pub fn new(sample_rate: u32, samples: Vec<f64>) -> Self {
        Self { sample_rate, samples }
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }
}

fn wav_err(path: &Path, source: hound::Error) -> Error {
    match source {
        hound::Error::IoError(e) => Error::io(path, e),
        source => Error::Wav { path: path.to_path_buf(), source },
    }
}

/// Reads a mono PCM-16 file; anything else is [`Error::UnsupportedFormat`].
pub fn read(path: &Path) -> Result<WavBuffer> {
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    let unsupported = |reason: String| Error::UnsupportedFormat { path: path.to_path_buf(), reason };
    if spec.channels != 1 {
        return Err(unsupported(format!("{} channels, only mono is supported", spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(unsupported(format!(
            "{:?} {}-bit samples, only 16-bit PCM is supported",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / FULL_SCALE))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| wav_err(path, e))?;
    Ok(WavBuffer::new(spec.sample_rate, samples))
}

/// Rounds to the nearest 16-bit code, saturating outside `[−1, 1)`.
pub fn quantize(x: f64) -> i16 {
    (x * FULL_SCALE).round().clamp(-FULL_SCALE, FULL_SCALE - 1.0) as i16
}

pub fn write(path: &Path, wav: &WavBuffer) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wav.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &x in &wav.samples {
        writer.write_sample(quantize(x)).map_err(|e| wav_err(path, e))?;
    }
    writer.finalize().map_err(|e| wav_err(path, e))
}
