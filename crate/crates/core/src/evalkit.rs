//! Objective stand-ins for listening tests: prosody similarity between
//! source and output, speaker probes on audio and on latents, and mel L1.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::corpus::FrameToWordAlignment;
use crate::dsp::PitchTracker;
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::scalar::Scalar;

const POWER_FLOOR: f64 = 1e-10;

/// Per-word prosody measured from audio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProsodyFeatures {
    /// Mean F0 over voiced frames, `None` when no frame is voiced.
    pub f0: Vec<Option<f64>>,
    pub log_energy: Vec<f64>,
    pub durations: Vec<usize>,
}

impl ProsodyFeatures {
    pub fn n_words(&self) -> usize {
        self.durations.len()
    }
}

/// Frame `t` covers samples `[t·hop, (t+1)·hop)`; F0 comes from `tracker`
/// on the same grid.
pub fn extract_prosody_features(
    waveform: &[f32],
    alignment: &FrameToWordAlignment,
    tracker: &PitchTracker,
) -> ProsodyFeatures {
    let hop = tracker.hop;
    let pitch = tracker.track(waveform);
    let frame_power = |t: usize| -> f64 {
        let a = (t * hop).min(waveform.len());
        let b = ((t + 1) * hop).min(waveform.len());
        waveform[a..b].iter().map(|&s| (s as f64).powi(2)).sum::<f64>() / hop as f64
    };
    let mut f0 = Vec::new();
    let mut log_energy = Vec::new();
    for &(a, b) in &alignment.word_spans {
        // A frame whose own hop is silent is unvoiced even when the wider
        // analysis window reaches into a neighbour.
        let voiced: Vec<f64> = (a..b)
            .filter(|&t| frame_power(t) > tracker.min_power)
            .filter_map(|t| pitch.get(t).copied().flatten())
            .collect();
        f0.push((!voiced.is_empty()).then(|| voiced.iter().sum::<f64>() / voiced.len() as f64));
        let e = if b > a {
            (a..b).map(|t| (frame_power(t) + POWER_FLOOR).ln()).sum::<f64>() / (b - a) as f64
        } else {
            POWER_FLOOR.ln()
        };
        log_energy.push(e);
    }
    ProsodyFeatures {
        f0,
        log_energy,
        durations: alignment.durations(),
    }
}

/// Pearson correlation; `None` when either side is constant or shorter
/// than three.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 3 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    let den = (sxx * syy).sqrt();
    (den > 0.0).then(|| (sxy / den).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProsodySimilarity {
    pub f0: f64,
    pub energy: f64,
    pub duration: f64,
}

/// Per-feature correlation over words. Words with missing F0 on either side
/// are left out of the F0 correlation.
pub fn prosody_similarity(src: &ProsodyFeatures, out: &ProsodyFeatures) -> Result<ProsodySimilarity> {
    if src.n_words() != out.n_words() || src.f0.len() != out.f0.len() || src.log_energy.len() != out.log_energy.len() {
        return Err(Error::Shape(format!("{} source words, {} output words", src.n_words(), out.n_words())));
    }
    if src.n_words() < 3 {
        return Err(Error::InsufficientData(format!("{} words, need at least 3", src.n_words())));
    }
    let (fs, fo): (Vec<f64>, Vec<f64>) = src.f0.iter().zip(&out.f0).filter_map(|(a, b)| Some(((*a)?, (*b)?))).unzip();
    let dur = |f: &ProsodyFeatures| -> Vec<f64> { f.durations.iter().map(|&d| d as f64).collect() };
    let need = |r: Option<f64>, what: &str| r.ok_or_else(|| Error::InsufficientData(format!("{what} correlation is undefined")));
    Ok(ProsodySimilarity {
        f0: need(pearson(&fs, &fo), "F0")?,
        energy: need(pearson(&src.log_energy, &out.log_energy), "energy")?,
        duration: need(pearson(&dur(src), &dur(out)), "duration")?,
    })
}

/// Correlation of within-sentence prosody patterns pooled over sentence
/// pairs. Each sentence is centred on its own means first: F0 as semitones
/// from the mean log-F0 of the words voiced on both sides, log energy and
/// log duration as deviations from their sentence means. Speaker-level
/// offsets between source and output therefore do not count.
pub fn pattern_similarity(pairs: &[(ProsodyFeatures, ProsodyFeatures)]) -> Result<ProsodySimilarity> {
    let centred = |v: Vec<f64>| -> Vec<f64> {
        let m = v.iter().sum::<f64>() / v.len().max(1) as f64;
        v.into_iter().map(|x| x - m).collect()
    };
    let (mut fs, mut fo, mut es, mut eo, mut ds, mut d_o) = (vec![], vec![], vec![], vec![], vec![], vec![]);
    for (src, out) in pairs {
        if src.n_words() != out.n_words() || src.f0.len() != out.f0.len() || src.log_energy.len() != out.log_energy.len() {
            return Err(Error::Shape(format!("{} source words, {} output words", src.n_words(), out.n_words())));
        }
        let st = |f: f64| 12.0 * f.log2();
        let (a, b): (Vec<f64>, Vec<f64>) = src.f0.iter().zip(&out.f0).filter_map(|(a, b)| Some((st((*a)?), st((*b)?)))).unzip();
        fs.extend(centred(a));
        fo.extend(centred(b));
        es.extend(centred(src.log_energy.clone()));
        eo.extend(centred(out.log_energy.clone()));
        let ln = |f: &ProsodyFeatures| -> Vec<f64> { f.durations.iter().map(|&d| (d.max(1) as f64).ln()).collect() };
        ds.extend(centred(ln(src)));
        d_o.extend(centred(ln(out)));
    }
    let need = |r: Option<f64>, what: &str| r.ok_or_else(|| Error::InsufficientData(format!("{what} correlation is undefined")));
    Ok(ProsodySimilarity {
        f0: need(pearson(&fs, &fo), "F0")?,
        energy: need(pearson(&es, &eo), "energy")?,
        duration: need(pearson(&ds, &d_o), "duration")?,
    })
}

/// Mean absolute difference over the common frames and bands.
pub fn mel_l1<T: Scalar>(reference: &Mat<T>, synthesized: &Mat<T>) -> f64 {
    let r = reference.nrows().min(synthesized.nrows());
    let c = reference.ncols().min(synthesized.ncols());
    if r == 0 || c == 0 {
        return 0.0;
    }
    let a = reference.slice(ndarray::s![..r, ..c]);
    let b = synthesized.slice(ndarray::s![..r, ..c]);
    a.iter().zip(b.iter()).map(|(x, y)| (x.f64() - y.f64()).abs()).sum::<f64>() / (r * c) as f64
}

/// Long-term average spectrum shape in 20 mel-spaced bands plus mean log F0.
#[derive(Clone, Debug)]
pub struct SpeakerFeaturizer {
    pub sample_rate: u32,
    pub frame: usize,
    pub bands: usize,
    pub tracker: PitchTracker,
}

impl Default for SpeakerFeaturizer {
    fn default() -> Self {
        Self {
            sample_rate: 24_000,
            frame: 1024,
            bands: 20,
            tracker: PitchTracker::default(),
        }
    }
}

impl SpeakerFeaturizer {
    /// `bands + 1` features; mean log F0 is NaN when nothing is voiced.
    pub fn features(&self, wave: &[f32]) -> Vec<f64> {
        let n = self.frame;
        let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
        let window: Vec<f64> = (0..n)
            .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n as f64).cos())
            .collect();
        let mut ltas = vec![0.0; n / 2 + 1];
        let mut frames = 0usize;
        let mut start = 0;
        while start < wave.len() {
            let mut buf: Vec<Complex<f64>> = (0..n)
                .map(|i| Complex::new(wave.get(start + i).map_or(0.0, |&s| s as f64) * window[i], 0.0))
                .collect();
            fft.process(&mut buf);
            for (k, v) in ltas.iter_mut().enumerate() {
                *v += buf[k].norm_sqr();
            }
            frames += 1;
            start += n / 2;
        }
        let nyq = self.sample_rate as f64 / 2.0;
        let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
        let hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
        let (lo, hi) = (mel(50.0), mel(nyq));
        let edges: Vec<f64> = (0..=self.bands).map(|i| hz(lo + (hi - lo) * i as f64 / self.bands as f64)).collect();
        // Bands without harmonics sit at a floor tied to the loudest bin,
        // not an absolute one, so their value does not track loudness.
        let floor = 1e-6 * ltas.iter().cloned().fold(POWER_FLOOR, f64::max) / frames.max(1) as f64;
        let mut out: Vec<f64> = edges
            .windows(2)
            .map(|e| {
                let bins: Vec<f64> = (0..ltas.len())
                    .filter(|&k| {
                        let f = k as f64 * nyq / (ltas.len() - 1) as f64;
                        f >= e[0] && f < e[1]
                    })
                    .map(|k| ltas[k])
                    .collect();
                let p = bins.iter().sum::<f64>() / (bins.len().max(1) * frames.max(1)) as f64;
                (p + floor).ln()
            })
            .collect();
        // Spectral shape only: loudness differences between recordings are
        // not speaker identity.
        let level = out.iter().sum::<f64>() / out.len() as f64;
        out.iter_mut().for_each(|v| *v -= level);
        let voiced: Vec<f64> = self.tracker.track(wave).into_iter().flatten().map(f64::ln).collect();
        out.push(if voiced.is_empty() {
            f64::NAN
        } else {
            voiced.iter().sum::<f64>() / voiced.len() as f64
        });
        out
    }
}

/// Held-out accuracy of a probe, with the majority-class rate of the
/// evaluation labels for reference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub chance: f64,
    pub n_eval: usize,
}

/// Multinomial logistic regression on standardized features, fitted by
/// full-batch gradient descent with a small L2 penalty.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    classes: Vec<usize>,
    mean: Array1<f64>,
    scale: Array1<f64>,
    weights: Array2<f64>,
}

impl LinearProbe {
    pub const MIN_PER_CLASS: usize = 20;
    pub const MAX_IMBALANCE: f64 = 10.0;

    pub fn fit(x: &[Vec<f64>], labels: &[usize]) -> Result<Self> {
        if count_labels(labels).len() < 2 {
            return Err(Error::InsufficientData("a probe needs at least two classes".into()));
        }
        let classes: Vec<usize> = count_labels(labels).into_keys().collect();
        let dim = x.first().map_or(0, Vec::len);
        if x.len() != labels.len() || x.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("probe features must be one equal-length row per label".into()));
        }
        let raw = Array2::from_shape_fn((x.len(), dim), |(i, j)| x[i][j]);
        let mean = Array1::from_shape_fn(dim, |j| {
            let col: Vec<f64> = raw.column(j).iter().copied().filter(|v| v.is_finite()).collect();
            if col.is_empty() {
                0.0
            } else {
                col.iter().sum::<f64>() / col.len() as f64
            }
        });
        let scale = Array1::from_shape_fn(dim, |j| {
            let col: Vec<f64> = raw.column(j).iter().copied().filter(|v| v.is_finite()).collect();
            let var = col.iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / col.len().max(1) as f64;
            if var > 1e-24 {
                var.sqrt()
            } else {
                1.0
            }
        });
        let mut probe = Self {
            weights: Array2::zeros((dim + 1, classes.len())),
            classes,
            mean,
            scale,
        };
        let xs = probe.design(&raw);
        let mut y = Array2::zeros((x.len(), probe.classes.len()));
        for (i, l) in labels.iter().enumerate() {
            y[[i, probe.class_of(*l)]] = 1.0;
        }
        let n = x.len() as f64;
        for _ in 0..800 {
            let p = softmax(&xs.dot(&probe.weights));
            let mut grad = xs.t().dot(&(p - &y)) / n;
            grad += &(&probe.weights * 1e-3);
            probe.weights -= &(grad * 0.5);
        }
        Ok(probe)
    }

    fn class_of(&self, label: usize) -> usize {
        self.classes.binary_search(&label).expect("label seen in fit")
    }

    /// Standardized rows with a bias column; non-finite values become the
    /// training mean.
    fn design(&self, raw: &Array2<f64>) -> Array2<f64> {
        let dim = self.mean.len();
        Array2::from_shape_fn((raw.nrows(), dim + 1), |(i, j)| {
            if j == dim {
                1.0
            } else if raw[[i, j]].is_finite() {
                (raw[[i, j]] - self.mean[j]) / self.scale[j]
            } else {
                0.0
            }
        })
    }

    pub fn predict(&self, x: &[Vec<f64>]) -> Result<Vec<usize>> {
        let dim = self.mean.len();
        if x.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape(format!("probe expects {dim} features")));
        }
        let raw = Array2::from_shape_fn((x.len(), dim), |(i, j)| x[i][j]);
        let scores = self.design(&raw).dot(&self.weights);
        Ok(scores
            .axis_iter(Axis(0))
            .map(|r| {
                let best = r.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map_or(0, |(k, _)| k);
                self.classes[best]
            })
            .collect())
    }

    pub fn evaluate(&self, x: &[Vec<f64>], labels: &[usize]) -> Result<ProbeResult> {
        if x.is_empty() || x.len() != labels.len() {
            return Err(Error::InsufficientData("probe evaluation needs labelled examples".into()));
        }
        let pred = self.predict(x)?;
        let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
        let majority = count_labels(labels).into_values().max().unwrap_or(0);
        Ok(ProbeResult {
            accuracy: hits as f64 / labels.len() as f64,
            chance: majority as f64 / labels.len() as f64,
            n_eval: labels.len(),
        })
    }
}

fn softmax(s: &Array2<f64>) -> Array2<f64> {
    let mut out = s.clone();
    for mut r in out.axis_iter_mut(Axis(0)) {
        let m = r.fold(f64::MIN, |a, &b| a.max(b));
        r.mapv_inplace(|v| (v - m).exp());
        let z = r.sum();
        r /= z;
    }
    out
}

fn count_labels(labels: &[usize]) -> BTreeMap<usize, usize> {
    let mut c = BTreeMap::new();
    for &l in labels {
        *c.entry(l).or_insert(0) += 1;
    }
    c
}

fn check_labels(labels: &[usize]) -> Result<()> {
    let counts = count_labels(labels);
    if counts.len() < 2 {
        return Err(Error::InsufficientData("a probe needs at least two speakers".into()));
    }
    let min = *counts.values().min().unwrap();
    let max = *counts.values().max().unwrap();
    if min < LinearProbe::MIN_PER_CLASS {
        return Err(Error::InsufficientData(format!(
            "a speaker has {min} examples, need {}",
            LinearProbe::MIN_PER_CLASS
        )));
    }
    if max as f64 > LinearProbe::MAX_IMBALANCE * min as f64 {
        return Err(Error::validation("labels", format!("class imbalance {max}:{min} exceeds 10:1")));
    }
    Ok(())
}

/// Trains on labelled `train` audio and reports accuracy on `eval`.
pub fn speaker_probe(train: &[(&[f32], usize)], eval: &[(&[f32], usize)], featurizer: &SpeakerFeaturizer) -> Result<ProbeResult> {
    let feats = |set: &[(&[f32], usize)]| -> (Vec<Vec<f64>>, Vec<usize>) {
        set.iter().map(|(w, l)| (featurizer.features(w), *l)).unzip()
    };
    let (xt, yt) = feats(train);
    check_labels(&yt)?;
    let (xe, ye) = feats(eval);
    LinearProbe::fit(&xt, &yt)?.evaluate(&xe, &ye)
}

/// Linear speaker probe on latent vectors with a stratified 70/30 split
/// drawn from `seed`. Accuracy near chance means the latents carry little
/// speaker identity.
pub fn latent_leakage_probe(latents: &[Vec<f64>], labels: &[usize], seed: u64) -> Result<ProbeResult> {
    if latents.len() != labels.len() {
        return Err(Error::Shape("one label per latent".into()));
    }
    check_labels(labels)?;
    let (train, eval) = stratified_split(labels, 0.7, seed);
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) { idx.iter().map(|&i| (latents[i].clone(), labels[i])).unzip() };
    let (xt, yt) = pick(&train);
    let (xe, ye) = pick(&eval);
    LinearProbe::fit(&xt, &yt)?.evaluate(&xe, &ye)
}

/// Index sets with `fraction` of every class in the first.
pub fn stratified_split(labels: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = rng_from_seed(seed);
    let mut by: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by.entry(l).or_default().push(i);
    }
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (_, mut idx) in by {
        idx.shuffle(&mut rng);
        let k = (idx.len() as f64 * fraction).round() as usize;
        a.extend_from_slice(&idx[..k]);
        b.extend_from_slice(&idx[k..]);
    }
    a.sort_unstable();
    b.sort_unstable();
    (a, b)
}

/// One line of a metrics report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    pub split: String,
    pub seed: u64,
    pub model_version: String,
}

#[cfg(test)]
mod tests;
