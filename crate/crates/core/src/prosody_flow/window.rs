//! Multi-sentence context windows over a document.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inclusive word-count range a window should fall in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowRange {
    pub min: usize,
    pub max: usize,
}

impl Default for WindowRange {
    fn default() -> Self {
        Self { min: 72, max: 95 }
    }
}

impl WindowRange {
    pub fn contains(&self, n: usize) -> bool {
        (self.min..=self.max).contains(&n)
    }

    pub fn validate(&self) -> Result<()> {
        if self.min == 0 || self.min > self.max {
            return Err(Error::config("window_min", "must be positive and at most window_max"));
        }
        Ok(())
    }
}

/// Consecutive sentences `sentences` of one document, of which `targets`
/// are the ones this window is responsible for.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextWindow {
    pub sentences: Range<usize>,
    pub targets: Range<usize>,
    /// Word offset of each sentence in the window, plus the total.
    pub offsets: Vec<usize>,
}

impl ContextWindow {
    fn new(counts: &[usize], sentences: Range<usize>, targets: Range<usize>) -> Self {
        let mut offsets = vec![0];
        for s in sentences.clone() {
            offsets.push(offsets.last().unwrap() + counts[s]);
        }
        Self {
            sentences,
            targets,
            offsets,
        }
    }

    pub fn n_words(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Word span `[a, b)` of sentence `s` within the window.
    pub fn sentence_span(&self, s: usize) -> Option<(usize, usize)> {
        if !self.sentences.contains(&s) {
            return None;
        }
        let i = s - self.sentences.start;
        Some((self.offsets[i], self.offsets[i + 1]))
    }

    /// Word span of all target sentences.
    pub fn target_span(&self) -> (usize, usize) {
        let a = self.sentence_span(self.targets.start).unwrap().0;
        let b = self.sentence_span(self.targets.end - 1).unwrap().1;
        (a, b)
    }
}

/// Groups consecutive sentences into targets of about `range` words, then
/// widens any group that falls short with neighbouring context. Every
/// sentence is a target of exactly one window.
pub fn build_windows(word_counts: &[usize], range: WindowRange) -> Result<Vec<ContextWindow>> {
    range.validate()?;
    if word_counts.is_empty() {
        return Err(Error::Argument("document has no sentences".into()));
    }
    if let Some(i) = word_counts.iter().position(|&c| c == 0) {
        return Err(Error::Argument(format!("sentence {i} has no words")));
    }
    let n = word_counts.len();
    let total = |r: Range<usize>| -> usize { word_counts[r].iter().sum() };
    let mut windows = Vec::new();
    let mut i = 0;
    while i < n {
        let (mut j, mut acc) = (i, 0);
        while j < n && acc < range.min && (acc == 0 || acc + word_counts[j] <= range.max) {
            acc += word_counts[j];
            j += 1;
        }
        let targets = i..j;
        let sentences = if range.contains(acc) {
            targets.clone()
        } else {
            widen(n, &targets, range, total)
        };
        windows.push(ContextWindow::new(word_counts, sentences, targets));
        i = j;
    }
    Ok(windows)
}

/// Contiguous superset of `targets` in range, widening backwards first;
/// failing that, the largest one under the maximum.
fn widen(n: usize, targets: &Range<usize>, range: WindowRange, total: impl Fn(Range<usize>) -> usize) -> Range<usize> {
    let mut in_range: Option<Range<usize>> = None;
    let mut fits: Option<(usize, Range<usize>)> = None;
    for s in (0..=targets.start).rev() {
        for e in targets.end..=n {
            let w = total(s..e);
            if w > range.max {
                break;
            }
            if range.contains(w) && in_range.is_none() {
                in_range = Some(s..e);
            }
            if fits.as_ref().is_none_or(|(best, _)| w > *best) {
                fits = Some((w, s..e));
            }
        }
    }
    in_range.or(fits.map(|f| f.1)).unwrap_or_else(|| targets.clone())
}
