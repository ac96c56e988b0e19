//! Synthetic corpora on disk: `DIR/spk{k}/utt{j}.wav` plus `DIR/manifest.txt`.

use std::path::{Path, PathBuf};

use dpmamba_core::synth::utterance;

use crate::error::{Error, Result};
use crate::manifest::Manifest;
use crate::wav::{self, WavBuffer};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorpusSpec {
    pub speakers: usize,
    pub utterances: usize,
    pub samples: usize,
    pub sample_rate: u32,
    pub seed: u64,
}

/// Writes the corpus and returns the manifest path. Identical specs give
/// byte-identical files.
pub fn write_corpus(dir: &Path, spec: &CorpusSpec) -> Result<PathBuf> {
    if spec.speakers < 2 || spec.utterances == 0 || spec.samples == 0 {
        return Err(Error::Usage("a corpus needs at least two speakers and one non-empty utterance each".into()));
    }
    let mut sources = Vec::with_capacity(spec.speakers * spec.utterances);
    for k in 0..spec.speakers {
        let spk = dir.join(format!("spk{k}"));
        std::fs::create_dir_all(&spk).map_err(|e| Error::io(&spk, e))?;
        for j in 0..spec.utterances {
            let path = spk.join(format!("utt{j}.wav"));
            let samples = utterance(k, j, spec.samples, spec.sample_rate, spec.seed);
            wav::write(&path, &WavBuffer::new(spec.sample_rate, samples))?;
            sources.push(path);
        }
    }
    let manifest = dir.join("manifest.txt");
    Manifest { sources }.write(&manifest)?;
    Ok(manifest)
}
