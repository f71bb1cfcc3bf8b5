use std::f64::consts::PI;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::Mat;
use crate::scalar::Scalar;

/// Framing of a centred, zero-padded short-time Fourier transform.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftSpec {
    pub n_fft: usize,
    pub hop: usize,
    pub win_len: usize,
}

impl StftSpec {
    pub fn new(n_fft: usize, hop: usize) -> Self {
        Self {
            n_fft,
            hop,
            win_len: n_fft,
        }
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// `ceil(len / hop)`; frame `f` is centred on sample `f·hop`.
    pub fn n_frames(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }

    /// Periodic Hann window of `win_len`, centred inside `n_fft`.
    pub fn window(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.n_fft];
        let off = (self.n_fft - self.win_len) / 2;
        for i in 0..self.win_len {
            w[off + i] = 0.5 - 0.5 * (2.0 * PI * i as f64 / self.win_len as f64).cos();
        }
        w
    }
}

pub(super) fn stft_forward<T: Scalar>(x: &Mat<T>, spec: &StftSpec) -> (Mat<T>, Mat<T>, Mat<T>) {
    assert_eq!(x.ncols(), 1, "stft: input must be a T×1 column");
    let len = x.nrows();
    let n = spec.n_fft;
    let bins = spec.n_bins();
    let frames = spec.n_frames(len);
    let window: Vec<T> = spec.window().into_iter().map(T::c).collect();
    let fft = FftPlanner::<T>::new().plan_fft_forward(n);
    let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
    let mut mag = Array2::zeros((frames, bins));
    let mut re = Array2::zeros((frames, bins));
    let mut im = Array2::zeros((frames, bins));
    let half = (n / 2) as isize;
    for f in 0..frames {
        let start = (f * spec.hop) as isize - half;
        for (i, b) in buf.iter_mut().enumerate() {
            let pos = start + i as isize;
            let v = if pos >= 0 && (pos as usize) < len {
                x[[pos as usize, 0]] * window[i]
            } else {
                T::zero()
            };
            *b = Complex::new(v, T::zero());
        }
        fft.process(&mut buf);
        for k in 0..bins {
            let c = buf[k];
            re[[f, k]] = c.re;
            im[[f, k]] = c.im;
            mag[[f, k]] = (c.re * c.re + c.im * c.im).sqrt();
        }
    }
    (mag, re, im)
}

pub(super) fn stft_backward<T: Scalar>(
    g: &Mat<T>,
    mag: &Mat<T>,
    re: &Mat<T>,
    im: &Mat<T>,
    spec: &StftSpec,
    len: usize,
) -> Mat<T> {
    let n = spec.n_fft;
    let bins = spec.n_bins();
    let window: Vec<T> = spec.window().into_iter().map(T::c).collect();
    let ifft = FftPlanner::<T>::new().plan_fft_inverse(n);
    let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
    let mut dx = Array2::zeros((len, 1));
    let half = (n / 2) as isize;
    let tiny = T::min_positive_value().sqrt();
    for f in 0..g.nrows() {
        for b in buf.iter_mut() {
            *b = Complex::new(T::zero(), T::zero());
        }
        for k in 0..bins {
            let m = mag[[f, k]];
            if m > tiny {
                let s = g[[f, k]] / m;
                buf[k] = Complex::new(s * re[[f, k]], s * im[[f, k]]);
            }
        }
        ifft.process(&mut buf);
        let start = (f * spec.hop) as isize - half;
        for (i, b) in buf.iter().enumerate() {
            let pos = start + i as isize;
            if pos >= 0 && (pos as usize) < len {
                dx[[pos as usize, 0]] = dx[[pos as usize, 0]] + b.re * window[i];
            }
        }
    }
    dx
}

/// `(i0, i1, w0, w1)` per output row for frame-to-sample linear interpolation,
/// with output row `t` sitting at frame position `(t + 0.5)/factor − 0.5`.
pub(super) fn linear_taps<T: Scalar>(
    frames: usize,
    factor: usize,
    out_len: usize,
) -> Vec<(usize, usize, T, T)> {
    assert!(frames > 0, "upsample: no input frames");
    (0..out_len)
        .map(|t| {
            let u = (t as f64 + 0.5) / factor as f64 - 0.5;
            if u <= 0.0 {
                return (0, 0, T::one(), T::zero());
            }
            let i0 = u.floor() as usize;
            if i0 >= frames - 1 {
                return (frames - 1, frames - 1, T::one(), T::zero());
            }
            let frac = u - i0 as f64;
            (i0, i0 + 1, T::c(1.0 - frac), T::c(frac))
        })
        .collect()
}

/// Fixed harmonic oscillators on a log-spaced pitch grid, with harmonics
/// grouped into octave bands (`h ∈ [2^b, 2^{b+1})`).
///
/// Stored sample-major as `len × n_pitch × n_groups`.
#[derive(Debug, Clone)]
pub struct HarmonicBank<T: Scalar> {
    len: usize,
    pitches: Vec<f64>,
    n_groups: usize,
    data: Vec<T>,
}

impl<T: Scalar> HarmonicBank<T> {
    pub fn new(
        len: usize,
        sample_rate: f64,
        f_min: f64,
        f_max: f64,
        n_pitch: usize,
        n_groups: usize,
        max_freq: f64,
    ) -> Self {
        let pitches = pitch_grid(f_min, f_max, n_pitch);
        let stride = n_pitch * n_groups;
        let mut acc = vec![0.0f64; len * stride];
        const RESYNC: usize = 2048;
        for (g, &f0) in pitches.iter().enumerate() {
            let mut counts = vec![0usize; n_groups];
            let harmonics: Vec<(usize, usize)> = (1usize..)
                .take_while(|&h| h as f64 * f0 <= max_freq && h < (1 << n_groups))
                .map(|h| {
                    let b = (usize::BITS - 1 - h.leading_zeros()) as usize;
                    counts[b] += 1;
                    (h, b)
                })
                .collect();
            for (h, b) in harmonics {
                let norm = 1.0 / (counts[b] as f64).sqrt();
                let w = 2.0 * PI * h as f64 * f0 / sample_rate;
                let (sw, cw) = w.sin_cos();
                let mut t0 = 0;
                while t0 < len {
                    let (mut s, mut c) = (w * t0 as f64).sin_cos();
                    for t in t0..(t0 + RESYNC).min(len) {
                        acc[t * stride + g * n_groups + b] += s * norm;
                        let s2 = s * cw + c * sw;
                        c = c * cw - s * sw;
                        s = s2;
                    }
                    t0 += RESYNC;
                }
            }
        }
        Self {
            len,
            pitches,
            n_groups,
            data: acc.into_iter().map(T::c).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_pitch(&self) -> usize {
        self.pitches.len()
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    pub fn pitches(&self) -> &[f64] {
        &self.pitches
    }

    #[inline]
    fn at(&self, t: usize) -> &[T] {
        let stride = self.pitches.len() * self.n_groups;
        &self.data[t * stride..(t + 1) * stride]
    }
}

/// `n` log-spaced frequencies from `f_min` to `f_max` inclusive.
pub fn pitch_grid(f_min: f64, f_max: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![f_min];
    }
    let ratio = (f_max / f_min).ln();
    (0..n)
        .map(|i| f_min * (ratio * i as f64 / (n - 1) as f64).exp())
        .collect()
}

pub(super) fn harmonic_mix_forward<T: Scalar>(
    probs: &Mat<T>,
    amps: &Mat<T>,
    bank: &HarmonicBank<T>,
    offset: usize,
) -> Mat<T> {
    let len = probs.nrows();
    let (np, ng) = (bank.n_pitch(), bank.n_groups());
    assert_eq!(probs.ncols(), np, "harmonic_mix: probs must have one column per pitch");
    assert_eq!(amps.dim(), (len, ng), "harmonic_mix: amps must be T×groups");
    assert!(offset + len <= bank.len(), "harmonic_mix: bank too short");
    let mut out = Array2::zeros((len, 1));
    let mut per_group = vec![T::zero(); ng];
    for t in 0..len {
        let row = bank.at(offset + t);
        per_group.iter_mut().for_each(|v| *v = T::zero());
        for g in 0..np {
            let p = probs[[t, g]];
            let src = &row[g * ng..(g + 1) * ng];
            for b in 0..ng {
                per_group[b] = per_group[b] + p * src[b];
            }
        }
        let mut v = T::zero();
        for b in 0..ng {
            v = v + amps[[t, b]] * per_group[b];
        }
        out[[t, 0]] = v;
    }
    out
}

pub(super) fn harmonic_mix_backward<T: Scalar>(
    g_out: &Mat<T>,
    probs: &Mat<T>,
    amps: &Mat<T>,
    bank: &HarmonicBank<T>,
    offset: usize,
) -> (Mat<T>, Mat<T>) {
    let len = probs.nrows();
    let (np, ng) = (bank.n_pitch(), bank.n_groups());
    let mut dp = Array2::zeros((len, np));
    let mut da = Array2::zeros((len, ng));
    for t in 0..len {
        let go = g_out[[t, 0]];
        if go == T::zero() {
            continue;
        }
        let row = bank.at(offset + t);
        for g in 0..np {
            let src = &row[g * ng..(g + 1) * ng];
            let p = probs[[t, g]];
            let mut s = T::zero();
            for b in 0..ng {
                s = s + amps[[t, b]] * src[b];
                da[[t, b]] = da[[t, b]] + go * p * src[b];
            }
            dp[[t, g]] = go * s;
        }
    }
    (dp, da)
}
