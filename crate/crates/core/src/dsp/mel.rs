use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, StftSpec, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Analysis parameters for log-amplitude mel spectrograms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub window: usize,
    pub bands: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 24_000,
            n_fft: 1024,
            hop: 256,
            window: 1024,
            bands: 80,
            fmin: 0.0,
            fmax: 12_000.0,
            log_floor: 1e-5,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bands != 80 {
            return Err(Error::config("mel.bands", "must be 80"));
        }
        if self.hop == 0 || self.window > self.n_fft || self.window == 0 {
            return Err(Error::config("mel.hop", "need hop > 0 and 0 < window <= n_fft"));
        }
        if !(self.fmax > self.fmin && self.fmax <= self.sample_rate as f64 / 2.0) {
            return Err(Error::config("mel.fmax", "need fmin < fmax <= sample_rate/2"));
        }
        if self.log_floor <= 0.0 {
            return Err(Error::config("mel.log_floor", "must be positive"));
        }
        Ok(())
    }

    /// Frames produced for `samples` samples.
    pub fn n_frames(&self, samples: usize) -> usize {
        samples.div_ceil(self.hop)
    }

    pub fn stft_spec(&self) -> StftSpec {
        StftSpec {
            n_fft: self.n_fft,
            hop: self.hop,
            win_len: self.window,
        }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if f < MIN_LOG_HZ {
        f / F_SP
    } else {
        min_log_mel + (f / MIN_LOG_HZ).ln() / logstep
    }
}

fn mel_to_hz(m: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if m < min_log_mel {
        m * F_SP
    } else {
        MIN_LOG_HZ * ((m - min_log_mel) * logstep).exp()
    }
}

/// Band edge frequencies: `bands + 2` points evenly spaced on the Slaney mel scale.
pub fn mel_points(config: &MelConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(config.fmin), hz_to_mel(config.fmax));
    (0..config.bands + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (config.bands + 1) as f64))
        .collect()
}

/// Centre frequency of each band.
pub fn band_centers(config: &MelConfig) -> Vec<f64> {
    mel_points(config)[1..=config.bands].to_vec()
}

/// Slaney-normalised triangular filterbank, `(n_fft/2+1) × bands`.
pub fn filterbank(config: &MelConfig) -> Array2<f64> {
    let bins = config.n_fft / 2 + 1;
    let pts = mel_points(config);
    let mut fb = Array2::zeros((bins, config.bands));
    for k in 0..bins {
        let f = k as f64 * config.sample_rate as f64 / config.n_fft as f64;
        for m in 0..config.bands {
            let (l, c, r) = (pts[m], pts[m + 1], pts[m + 2]);
            let up = (f - l) / (c - l);
            let down = (r - f) / (r - c);
            let w = up.min(down).max(0.0);
            fb[[k, m]] = w * 2.0 / (r - l);
        }
    }
    fb
}

/// `T_mel × bands` log-amplitude mel spectrogram.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram<T: Scalar> {
    pub frames: Mat<T>,
    pub config: MelConfig,
}

impl<T: Scalar> MelSpectrogram<T> {
    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }
}

/// Computes mel spectrograms, either eagerly or as differentiable graph nodes.
/// Both paths run the same operations, so real and generated audio are
/// analysed identically.
#[derive(Clone, Debug)]
pub struct MelExtractor<T: Scalar> {
    config: MelConfig,
    fb: Mat<T>,
}

impl<T: Scalar> MelExtractor<T> {
    pub fn new(config: MelConfig) -> Result<Self> {
        config.validate()?;
        let fb = filterbank(&config).mapv(T::c);
        Ok(Self { config, fb })
    }

    pub fn config(&self) -> &MelConfig {
        &self.config
    }

    /// Log-mel of a `T × 1` waveform node.
    pub fn graph_mel(&self, g: &mut Graph<T>, wave: Var) -> Var {
        let mag = g.stft_magnitude(wave, self.config.stft_spec());
        let fb = g.constant(self.fb.clone());
        let mel = g.matmul(mag, fb);
        g.ln_clamp(mel, T::c(self.config.log_floor))
    }

    pub fn extract(&self, waveform: &[f32]) -> Result<MelSpectrogram<T>> {
        if waveform.is_empty() {
            return Err(Error::Argument("cannot extract mel from an empty waveform".into()));
        }
        let mut g = Graph::new();
        let x = Array2::from_shape_fn((waveform.len(), 1), |(i, _)| T::c(waveform[i] as f64));
        let xv = g.constant(x);
        let mel = self.graph_mel(&mut g, xv);
        Ok(MelSpectrogram {
            frames: g.value(mel).clone(),
            config: self.config.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_is_ceil_of_hop() {
        let ex = MelExtractor::<f32>::new(MelConfig::default()).unwrap();
        let mel = ex.extract(&vec![0.1; 19200]).unwrap();
        assert_eq!(mel.n_frames(), 75);
        let mel = ex.extract(&vec![0.1; 19201]).unwrap();
        assert_eq!(mel.n_frames(), 76);
    }

    #[test]
    fn silence_sits_exactly_on_the_floor() {
        let ex = MelExtractor::<f32>::new(MelConfig::default()).unwrap();
        let mel = ex.extract(&vec![0.0; 5000]).unwrap();
        let floor = (1e-5f64).ln() as f32;
        assert!(mel.frames.iter().all(|&v| v == floor));
    }

    #[test]
    fn empty_waveform_is_rejected() {
        let ex = MelExtractor::<f32>::new(MelConfig::default()).unwrap();
        assert!(matches!(ex.extract(&[]), Err(Error::Argument(_))));
    }

    #[test]
    fn filterbank_bands_are_triangles_in_range() {
        let cfg = MelConfig::default();
        let fb = filterbank(&cfg);
        assert_eq!(fb.dim(), (513, 80));
        for m in 0..80 {
            assert!(fb.column(m).iter().any(|&w| w > 0.0), "band {m} is empty");
        }
        let c = band_centers(&cfg);
        assert!(c.windows(2).all(|w| w[1] > w[0]));
        assert!(c[79] < 12_000.0);
    }

    #[test]
    fn tone_peaks_in_nearest_band() {
        let cfg = MelConfig::default();
        let ex = MelExtractor::<f64>::new(cfg.clone()).unwrap();
        let sr = cfg.sample_rate as f64;
        let wave: Vec<f32> = (0..12_000)
            .map(|i| (std::f64::consts::TAU * 440.0 * i as f64 / sr).sin() as f32 * 0.5)
            .collect();
        let mel = ex.extract(&wave).unwrap();
        let centers = band_centers(&cfg);
        let nearest = (0..cfg.bands)
            .min_by(|&a, &b| (centers[a] - 440.0).abs().total_cmp(&(centers[b] - 440.0).abs()))
            .unwrap();
        let fb = filterbank(&cfg);
        let window = cfg.stft_spec().window();
        for t in 10..mel.n_frames() - 10 {
            // Direct DFT of the centred frame as the oracle.
            let start = t * cfg.hop - cfg.n_fft / 2;
            let mag: Vec<f64> = (0..=cfg.n_fft / 2)
                .map(|k| {
                    let (mut re, mut im) = (0.0, 0.0);
                    for n in 0..cfg.n_fft {
                        let x = wave[start + n] as f64 * window[n];
                        let ang = -std::f64::consts::TAU * (k * n) as f64 / cfg.n_fft as f64;
                        re += x * ang.cos();
                        im += x * ang.sin();
                    }
                    (re * re + im * im).sqrt()
                })
                .collect();
            let oracle: Vec<f64> = (0..cfg.bands)
                .map(|m| (0..mag.len()).map(|k| mag[k] * fb[[k, m]]).sum::<f64>().max(1e-5).ln())
                .collect();
            let row = mel.frames.row(t);
            for m in 0..cfg.bands {
                assert!((row[m] - oracle[m]).abs() < 1e-6);
            }
            let argmax = (0..cfg.bands).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(argmax, nearest, "frame {t}");
        }
    }

    #[test]
    fn config_rejects_wrong_band_count() {
        let cfg = MelConfig {
            bands: 64,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
