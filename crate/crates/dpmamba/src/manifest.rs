//! Corpus manifests: one WAV path per line, one source per file.
//!
//! Relative paths resolve against the manifest's directory. A source's
//! speaker is the name of the directory that holds it.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::wav;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub sources: Vec<PathBuf>,
}

/// Sources with dense speaker indices, in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct SourcePool {
    pub sample_rate: u32,
    pub sources: Vec<Vec<f64>>,
    pub speakers: Vec<usize>,
    /// `speaker_names[i]` is the directory name of speaker index `i`.
    pub speaker_names: Vec<String>,
}

impl Manifest {
    pub fn parse(text: &str, base: &Path) -> Self {
        let sources = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| base.join(l))
            .collect();
        Self { sources }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&text, path.parent().unwrap_or(Path::new("."))))
    }

    /// Writes paths relative to the manifest's directory where possible.
    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new("."));
        let text: String =
            self.sources.iter().map(|p| format!("{}\n", p.strip_prefix(base).unwrap_or(p).display())).collect();
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn speaker_of(path: &Path) -> String {
        path.parent().and_then(Path::file_name).map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
    }

    /// Reads every source; all files must share one sample rate.
    pub fn load(&self) -> Result<SourcePool> {
        if self.sources.is_empty() {
            return Err(Error::Format("manifest lists no sources".into()));
        }
        let mut pool =
            SourcePool { sample_rate: 0, sources: Vec::new(), speakers: Vec::new(), speaker_names: Vec::new() };
        for path in &self.sources {
            let w = wav::read(path)?;
            if pool.sources.is_empty() {
                pool.sample_rate = w.sample_rate;
            } else if w.sample_rate != pool.sample_rate {
                return Err(Error::SampleRate { path: path.clone(), found: w.sample_rate, expected: pool.sample_rate });
            }
            let name = Self::speaker_of(path);
            let id = match pool.speaker_names.iter().position(|n| *n == name) {
                Some(i) => i,
                None => {
                    pool.speaker_names.push(name);
                    pool.speaker_names.len() - 1
                }
            };
            pool.sources.push(w.samples);
            pool.speakers.push(id);
        }
        Ok(pool)
    }
}

impl SourcePool {
    pub fn shortest(&self) -> usize {
        self.sources.iter().map(Vec::len).min().unwrap_or(0)
    }
}
