use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A frame-aligned training window. When the utterance is shorter than the
/// chunk, the tail past `valid_frames` is zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkSelection {
    pub frame_start: usize,
    pub frame_count: usize,
    pub sample_start: usize,
    pub sample_count: usize,
    pub valid_frames: usize,
}

impl ChunkSelection {
    pub fn is_padded(&self) -> bool {
        self.valid_frames < self.frame_count
    }
}

/// Uniformly random chunk of `m` samples over `n_frames` aligned frames.
/// With `pad_short` set, short utterances yield a zero-start chunk whose
/// tail is marked as padding; otherwise they are an error.
pub fn sample_chunk<R: Rng>(
    n_frames: usize,
    m: usize,
    hop: usize,
    pad_short: bool,
    rng: &mut R,
) -> Result<ChunkSelection> {
    if hop == 0 || m % hop != 0 {
        return Err(Error::Argument(format!("chunk size {m} is not a multiple of hop {hop}")));
    }
    let frame_count = m / hop;
    if n_frames < frame_count {
        if !pad_short {
            return Err(Error::Argument(format!(
                "utterance has {n_frames} frames, chunk needs {frame_count}; pad or skip it"
            )));
        }
        return Ok(ChunkSelection {
            frame_start: 0,
            frame_count,
            sample_start: 0,
            sample_count: m,
            valid_frames: n_frames,
        });
    }
    let frame_start = rng.random_range(0..=n_frames - frame_count);
    Ok(ChunkSelection {
        frame_start,
        frame_count,
        sample_start: frame_start * hop,
        sample_count: m,
        valid_frames: frame_count,
    })
}

/// Waveform samples of a chunk, zero-filled past the end of the audio.
pub fn chunk_waveform(wave: &[f32], sel: &ChunkSelection, hop: usize) -> Vec<f32> {
    let valid_end = sel.sample_start + sel.valid_frames * hop;
    (sel.sample_start..sel.sample_start + sel.sample_count)
        .map(|i| if i < valid_end { wave.get(i).copied().unwrap_or(0.0) } else { 0.0 })
        .collect()
}
