//! Utterances, alignments, manifests, the synthetic corpus and chunk sampling.

mod chunk;
mod manifest;
pub mod synthetic;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

pub use chunk::{chunk_waveform, sample_chunk, ChunkSelection};
pub use manifest::{load_manifest, write_manifest, ManifestRecord};
pub use synthetic::{generate_synthetic_corpus, SyntheticCorpus, SyntheticCorpusSpec, WordProsody};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::validation("split", format!("unknown split `{other}`"))),
        }
    }
}

/// One recorded sentence with its phoneme-level alignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub waveform: Vec<f32>,
    pub text: String,
    pub speaker: String,
    pub phonemes: Vec<usize>,
    /// Per-phoneme durations in mel frames.
    pub durations: Vec<usize>,
    /// Word index of each phoneme.
    pub word_map: Vec<usize>,
    pub split: Option<Split>,
    /// Document and sentence position, when the utterance belongs to running text.
    pub document: Option<String>,
    pub sentence: usize,
}

impl Utterance {
    pub fn n_words(&self) -> usize {
        self.word_map.last().map_or(0, |&w| w + 1)
    }

    pub fn words(&self) -> Vec<&str> {
        self.text.split_whitespace().collect()
    }

    /// Frames usable for training: the shorter of the alignment and the mel.
    pub fn aligned_frames(&self, hop: usize) -> usize {
        let total: usize = self.durations.iter().sum();
        total.min(self.waveform.len().div_ceil(hop))
    }

    /// Alignment truncated to `n_frames`, absorbing any one-frame mismatch
    /// at the end of the utterance.
    pub fn alignment(&self, n_frames: usize) -> Result<FrameToWordAlignment> {
        let mut a = frame_alignment(&self.durations, &self.word_map)?;
        a.truncate(n_frames);
        Ok(a)
    }

    /// Checks the structural invariants; `hop` relates durations to audio length.
    pub fn validate(&self, hop: usize) -> Result<()> {
        if self.waveform.is_empty() {
            return Err(Error::validation("waveform", "empty audio"));
        }
        if self.phonemes.is_empty() {
            return Err(Error::validation("phonemes", "no phonemes"));
        }
        if self.durations.len() != self.phonemes.len() {
            return Err(Error::validation(
                "durations",
                format!("{} durations for {} phonemes", self.durations.len(), self.phonemes.len()),
            ));
        }
        if self.word_map.len() != self.phonemes.len() {
            return Err(Error::validation(
                "word_map",
                format!("{} entries for {} phonemes", self.word_map.len(), self.phonemes.len()),
            ));
        }
        check_word_map(&self.word_map)?;
        let n_words = self.words().len();
        if n_words != self.n_words() {
            return Err(Error::validation(
                "text",
                format!("{n_words} words in text but word_map covers {}", self.n_words()),
            ));
        }
        let total: usize = self.durations.iter().sum();
        let t_mel = self.waveform.len().div_ceil(hop);
        if total.abs_diff(t_mel) > 1 {
            return Err(Error::validation(
                "durations",
                format!("durations sum to {total} frames but audio has {t_mel}"),
            ));
        }
        Ok(())
    }
}

/// Word indices must start at 0 and step by 0 or 1.
pub fn check_word_map(map: &[usize]) -> Result<()> {
    let mut prev = None;
    for (i, &w) in map.iter().enumerate() {
        let ok = match prev {
            None => w == 0,
            Some(p) => w == p || w == p + 1,
        };
        if !ok {
            let why = match prev {
                Some(p) if w < p => "decreases",
                _ => "skips a word",
            };
            return Err(Error::validation("word_map", format!("entry {i} ({w}) {why}")));
        }
        prev = Some(w);
    }
    Ok(())
}

/// Contiguous per-word frame spans `[start, end)` covering the frame axis.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameToWordAlignment {
    pub word_spans: Vec<(usize, usize)>,
}

impl FrameToWordAlignment {
    pub fn n_words(&self) -> usize {
        self.word_spans.len()
    }

    pub fn n_frames(&self) -> usize {
        self.word_spans.last().map_or(0, |s| s.1)
    }

    /// Clips every span to `[0, n)`.
    pub fn truncate(&mut self, n: usize) {
        for s in &mut self.word_spans {
            s.0 = s.0.min(n);
            s.1 = s.1.min(n);
        }
    }

    /// Word owning each frame.
    pub fn frame_words(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n_frames());
        for (w, &(a, b)) in self.word_spans.iter().enumerate() {
            out.extend(std::iter::repeat_n(w, b - a));
        }
        out
    }

    /// Span durations in frames.
    pub fn durations(&self) -> Vec<usize> {
        self.word_spans.iter().map(|&(a, b)| b - a).collect()
    }
}

pub fn frame_alignment(durations: &[usize], word_map: &[usize]) -> Result<FrameToWordAlignment> {
    if durations.len() != word_map.len() {
        return Err(Error::validation("word_map", "length differs from durations"));
    }
    check_word_map(word_map)?;
    let n_words = word_map.last().map_or(0, |&w| w + 1);
    let mut spans = vec![(0usize, 0usize); n_words];
    let mut t = 0;
    let mut current = usize::MAX;
    for (&d, &w) in durations.iter().zip(word_map) {
        if w != current {
            spans[w] = (t, t);
            current = w;
        }
        t += d;
        spans[w].1 = t;
    }
    Ok(FrameToWordAlignment { word_spans: spans })
}

/// Utterances plus the sorted speaker inventory.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn new(utterances: Vec<Utterance>) -> Self {
        Self { utterances }
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn speakers(&self) -> Vec<String> {
        let mut s: Vec<String> = self.utterances.iter().map(|u| u.speaker.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    pub fn speaker_index(&self, name: &str) -> Option<usize> {
        self.speakers().iter().position(|s| s == name)
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.split == Some(split))
    }

    /// Assigns train/valid/test per speaker at 7:1:2 without replacement.
    /// Existing labels are overwritten.
    pub fn assign_splits(&mut self, seed: u64) {
        let mut by_speaker: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, u) in self.utterances.iter().enumerate() {
            by_speaker.entry(u.speaker.clone()).or_default().push(i);
        }
        let mut rng = rng_from_seed(seed);
        for idx in by_speaker.values_mut() {
            idx.shuffle(&mut rng);
            let (n_train, n_valid, _) = split_counts(idx.len());
            for (k, &i) in idx.iter().enumerate() {
                self.utterances[i].split = Some(if k < n_train {
                    Split::Train
                } else if k < n_train + n_valid {
                    Split::Valid
                } else {
                    Split::Test
                });
            }
        }
    }

    /// Sentences grouped per document in reading order.
    pub fn documents(&self) -> Vec<(String, Vec<usize>)> {
        let mut docs: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, u) in self.utterances.iter().enumerate() {
            let key = u.document.clone().unwrap_or_else(|| format!("utt:{}", u.id));
            docs.entry(key).or_default().push(i);
        }
        docs.into_iter()
            .map(|(k, mut v)| {
                v.sort_by_key(|&i| self.utterances[i].sentence);
                (k, v)
            })
            .collect()
    }
}

/// 7:1:2 counts for `n` items; rounding leftovers go to the test split.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let train = (n * 7 + 5) / 10;
    let valid = ((n + 5) / 10).min(n - train);
    (train, valid, n - train - valid)
}
