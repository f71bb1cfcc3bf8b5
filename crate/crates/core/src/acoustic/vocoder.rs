//! Waveform generator: a soft-pitch harmonic source plus a learned residual.
//!
//! The conditioning frames first pass through a small convolutional pre-net.
//! Two heads then produce, per frame, a distribution over a log-spaced pitch
//! grid and one log-amplitude per octave group of harmonics. These are
//! interpolated to sample rate and mixed through a fixed oscillator bank. A
//! transposed-convolution stack with total stride equal to the hop adds a
//! residual waveform; its last layer starts at zero.

use std::sync::{Arc, Mutex};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvSpec, Graph, HarmonicBank, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv1d, ConvTranspose1d, Linear, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocoderConfig {
    pub channels: usize,
    pub pitch_bins: usize,
    pub f0_min: f64,
    pub f0_max: f64,
    pub harmonic_groups: usize,
    pub max_harmonic_hz: f64,
    /// Upsampling factors of the residual stack; their product is the hop.
    pub upsample_factors: Vec<usize>,
    pub residual_channels: Vec<usize>,
    /// Initial log-amplitude of every harmonic group.
    pub init_log_amp: f64,
}

impl Default for VocoderConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            pitch_bins: 48,
            f0_min: 70.0,
            f0_max: 300.0,
            harmonic_groups: 6,
            max_harmonic_hz: 6000.0,
            upsample_factors: vec![4, 4, 4, 4],
            residual_channels: vec![16, 8, 8, 8],
            init_log_amp: -4.0,
        }
    }
}

#[derive(Debug)]
pub struct Vocoder<T: Scalar> {
    pub config: VocoderConfig,
    hop: usize,
    sample_rate: u32,
    pre: [Conv1d; 2],
    pitch_head: Linear,
    amp_head: Linear,
    ups: Vec<ConvTranspose1d>,
    post: Conv1d,
    bank: Mutex<Option<Arc<HarmonicBank<T>>>>,
}

impl<T: Scalar> Clone for Vocoder<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            hop: self.hop,
            sample_rate: self.sample_rate,
            pre: self.pre,
            pitch_head: self.pitch_head,
            amp_head: self.amp_head,
            ups: self.ups.clone(),
            post: self.post,
            bank: Mutex::new(self.bank.lock().expect("bank lock").clone()),
        }
    }
}

const SLOPE: f64 = 0.1;

impl<T: Scalar> Vocoder<T> {
    pub fn new<R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        config: VocoderConfig,
        in_dim: usize,
        hop: usize,
        sample_rate: u32,
    ) -> Result<Self> {
        let total: usize = config.upsample_factors.iter().product();
        if total != hop {
            return Err(Error::config(
                "vocoder.upsample_factors",
                format!("product {total} must equal the hop {hop}"),
            ));
        }
        if config.residual_channels.len() != config.upsample_factors.len() {
            return Err(Error::config(
                "vocoder.residual_channels",
                "need one channel count per upsampling stage",
            ));
        }
        let c = config.channels;
        let pre = [
            Conv1d::new(store, rng, "voc.pre0", in_dim, c, ConvSpec::new(3)),
            Conv1d::new(store, rng, "voc.pre1", c, c, ConvSpec::new(3)),
        ];
        let pitch_head = Linear::new(store, rng, "voc.pitch", c, config.pitch_bins);
        let amp_head = Linear::new(store, rng, "voc.amp", c, config.harmonic_groups);
        let bias = store.get_mut(amp_head.b);
        bias.fill(T::c(config.init_log_amp));
        let mut ups = Vec::new();
        let mut cin = c;
        for (i, (&f, &co)) in config.upsample_factors.iter().zip(&config.residual_channels).enumerate() {
            ups.push(ConvTranspose1d::upsampler(store, rng, &format!("voc.up{i}"), cin, co, f));
            cin = co;
        }
        let post = Conv1d::zeros(store, "voc.post", cin, 1, ConvSpec::new(7));
        Ok(Self {
            config,
            hop,
            sample_rate,
            pre,
            pitch_head,
            amp_head,
            ups,
            post,
            bank: Mutex::new(None),
        })
    }

    /// Oscillator bank covering at least `len` samples, built on first use and
    /// regrown in whole seconds.
    pub fn bank(&self, len: usize) -> Arc<HarmonicBank<T>> {
        let mut guard = self.bank.lock().expect("bank lock");
        if let Some(b) = guard.as_ref() {
            if b.len() >= len {
                return b.clone();
            }
        }
        let sr = self.sample_rate as usize;
        let grown = len.div_ceil(sr).max(1) * sr;
        let c = &self.config;
        let bank = Arc::new(HarmonicBank::new(
            grown,
            self.sample_rate as f64,
            c.f0_min,
            c.f0_max,
            c.pitch_bins,
            c.harmonic_groups,
            c.max_harmonic_hz,
        ));
        *guard = Some(bank.clone());
        bank
    }

    /// Pitch distribution and per-group log-amplitudes per frame.
    pub fn source_params(&self, g: &mut Graph<T>, p: &Bound, frames: Var) -> (Var, Var, Var) {
        let mut h = frames;
        for conv in &self.pre {
            h = conv.forward(g, p, h, 1);
            h = g.leaky_relu(h, T::c(SLOPE));
        }
        let logits = self.pitch_head.forward(g, p, h);
        let probs = g.softmax_rows(logits);
        let log_amp = self.amp_head.forward(g, p, h);
        (probs, log_amp, h)
    }

    /// `F × in_dim` frames to `F·hop × 1` samples.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, frames: Var) -> Result<Var> {
        let n_frames = g.shape(frames).0;
        if n_frames == 0 {
            return Err(Error::Shape("vocoder needs at least one frame".into()));
        }
        let len = n_frames * self.hop;
        let (probs, log_amp, h) = self.source_params(g, p, frames);
        let amps = g.exp(log_amp);
        let probs_up = g.upsample_linear(probs, self.hop, len);
        let amps_up = g.upsample_linear(amps, self.hop, len);
        let bank = self.bank(len);
        let harmonic = g.harmonic_mix(probs_up, amps_up, bank, 0);

        let mut r = h;
        for up in &self.ups {
            r = up.forward(g, p, r, 1);
            r = g.leaky_relu(r, T::c(SLOPE));
        }
        let r = self.post.forward(g, p, r, 1);
        let r = g.tanh(r);
        debug_assert_eq!(g.shape(r).0, len);
        Ok(g.add(harmonic, r))
    }

    /// Most likely pitch per frame, in Hz.
    pub fn frame_pitch(&self, g: &mut Graph<T>, p: &Bound, frames: Var) -> Vec<f64> {
        let (probs, _, _) = self.source_params(g, p, frames);
        let grid = crate::autograd::pitch_grid(self.config.f0_min, self.config.f0_max, self.config.pitch_bins);
        g.value(probs)
            .rows()
            .into_iter()
            .map(|r| {
                let k = (0..r.len()).max_by(|&a, &b| r[a].f64().total_cmp(&r[b].f64())).unwrap_or(0);
                grid[k]
            })
            .collect()
    }
}
