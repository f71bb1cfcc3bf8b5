//! Autocorrelation F0 tracking on the mel frame grid.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

/// Normalised-autocorrelation pitch tracker. Frame `t` is centred on sample
/// `t·hop`, matching the mel frame layout.
#[derive(Clone, Debug)]
pub struct PitchTracker {
    pub sample_rate: u32,
    pub hop: usize,
    pub window: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub voicing_threshold: f64,
    /// Frames whose mean power falls below this are unvoiced.
    pub min_power: f64,
}

impl Default for PitchTracker {
    fn default() -> Self {
        Self {
            sample_rate: 24_000,
            hop: 256,
            window: 600,
            f_min: 60.0,
            f_max: 600.0,
            voicing_threshold: 0.6,
            min_power: 1e-6,
        }
    }
}

impl PitchTracker {
    fn lag_range(&self) -> (usize, usize) {
        let sr = self.sample_rate as f64;
        let lo = (sr / self.f_max).floor().max(2.0) as usize;
        let hi = (sr / self.f_min).ceil() as usize;
        (lo, hi)
    }

    /// F0 in Hz per frame; `None` marks an unvoiced frame.
    pub fn track(&self, wave: &[f32]) -> Vec<Option<f64>> {
        let n_frames = wave.len().div_ceil(self.hop);
        let (lag_lo, lag_hi) = self.lag_range();
        let n = self.window;
        let span = n + lag_hi + 1;
        let fft_len = span.next_power_of_two();
        let mut planner = FftPlanner::<f64>::new();
        let fwd = planner.plan_fft_forward(fft_len);
        let inv = planner.plan_fft_inverse(fft_len);
        let mut out = Vec::with_capacity(n_frames);
        let mut buf_b = vec![0.0f64; span];
        for t in 0..n_frames {
            let start = (t * self.hop) as isize - (n / 2) as isize;
            for (i, b) in buf_b.iter_mut().enumerate() {
                let idx = start + i as isize;
                *b = if idx >= 0 && (idx as usize) < wave.len() {
                    wave[idx as usize] as f64
                } else {
                    0.0
                };
            }
            out.push(self.frame_f0(&buf_b, n, lag_lo, lag_hi, fft_len, &fwd, &inv));
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn frame_f0(
        &self,
        b: &[f64],
        n: usize,
        lag_lo: usize,
        lag_hi: usize,
        fft_len: usize,
        fwd: &Arc<dyn Fft<f64>>,
        inv: &Arc<dyn Fft<f64>>,
    ) -> Option<f64> {
        let e0: f64 = b[..n].iter().map(|v| v * v).sum();
        if e0 / n as f64 <= self.min_power {
            return None;
        }
        let mut fa: Vec<Complex<f64>> = (0..fft_len)
            .map(|i| Complex::new(if i < n { b[i] } else { 0.0 }, 0.0))
            .collect();
        let mut fb: Vec<Complex<f64>> = (0..fft_len)
            .map(|i| Complex::new(b.get(i).copied().unwrap_or(0.0), 0.0))
            .collect();
        fwd.process(&mut fa);
        fwd.process(&mut fb);
        for (a, bb) in fa.iter_mut().zip(&fb) {
            *a = a.conj() * bb;
        }
        inv.process(&mut fa);
        let scale = 1.0 / fft_len as f64;

        let mut prefix = vec![0.0; b.len() + 1];
        for (i, v) in b.iter().enumerate() {
            prefix[i + 1] = prefix[i] + v * v;
        }
        let hi = lag_hi.min(b.len() - n);
        let mut r = vec![0.0; hi + 2];
        for lag in lag_lo.saturating_sub(1)..=hi {
            let el = prefix[lag + n] - prefix[lag];
            let denom = (e0 * el).sqrt();
            r[lag] = if denom > 0.0 {
                fa[lag].re * scale / denom
            } else {
                0.0
            };
        }
        let best = (lag_lo..=hi).map(|l| r[l]).fold(f64::MIN, f64::max);
        if best < self.voicing_threshold {
            return None;
        }
        let pick = (lag_lo..=hi).find(|&l| {
            r[l] >= 0.9 * best && r[l] >= r[l - 1] && (l == hi || r[l] >= r[l + 1])
        })?;
        let mut lag = pick as f64;
        if pick > lag_lo && pick < hi {
            let (a, c, d) = (r[pick - 1], r[pick], r[pick + 1]);
            let den = a - 2.0 * c + d;
            if den.abs() > 1e-12 {
                lag += (0.5 * (a - d) / den).clamp(-0.5, 0.5);
            }
        }
        Some(self.sample_rate as f64 / lag)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn harmonic(f0: f64, n: usize, sr: f64) -> Vec<f32> {
        (0..n)
            .map(|i| {
                let t = i as f64 / sr;
                (1..=5)
                    .map(|h| (std::f64::consts::TAU * f0 * h as f64 * t).sin() / h as f64)
                    .sum::<f64>() as f32
                    * 0.2
            })
            .collect()
    }

    #[test]
    fn recovers_tone_frequency() {
        let tr = PitchTracker::default();
        for f0 in [80.0, 123.4, 200.0, 310.0, 440.0] {
            let f = tr.track(&harmonic(f0, 24_000, 24_000.0));
            let mid = &f[10..f.len() - 10];
            for v in mid {
                let v = v.expect("voiced");
                assert!((v - f0).abs() / f0 < 0.01, "{f0} -> {v}");
            }
        }
    }

    #[test]
    fn silence_and_noise_are_unvoiced() {
        use rand::{Rng, SeedableRng};
        let tr = PitchTracker::default();
        assert!(tr.track(&vec![0.0; 10_000]).iter().all(Option::is_none));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let noise: Vec<f32> = (0..24_000).map(|_| rng.random_range(-0.3..0.3)).collect();
        let voiced = tr.track(&noise).iter().filter(|v| v.is_some()).count();
        assert!(voiced < 5, "{voiced} noise frames voiced");
    }
}
