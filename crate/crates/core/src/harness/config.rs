//! Flat TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acoustic::{AcousticConfig, DiscriminatorConfig, LossWeights, TrainOptions, VocoderConfig};
use crate::corpus::SyntheticCorpusSpec;
use crate::dsp::MelConfig;
use crate::duration::DurationConfig;
use crate::error::{Error, Result};
use crate::optim::AdamConfig;
use crate::prosody_flow::{ContextConfig, FlowTrainOptions, ProsodyFlowConfig, WindowRange};

/// Layer widths for the acoustic, duration and context networks. The
/// latent sizes, speaker dimension and flow depth are set separately.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelScale {
    Full,
    Reduced,
    Tiny,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub speaker_dim: usize,
    pub latent_dim: usize,
    pub duration_latent_dim: usize,
    pub flow_steps: usize,
    pub lambda_feat: f64,
    pub lambda_mel: f64,
    pub alpha_kl: f64,
    /// Waveform chunk length in samples.
    pub chunk_samples: usize,

    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub win_length: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,

    pub scale: ModelScale,

    /// Line-delimited JSON manifest; the synthetic corpus is generated when
    /// absent.
    pub manifest: Option<PathBuf>,
    pub documents_per_speaker: usize,
    pub sentences_per_document: usize,
    /// Assign a 7:1:2 train/valid/test split; otherwise every utterance
    /// trains.
    pub assign_splits: bool,

    pub stage1_lr: f64,
    pub stage1_beta1: f64,
    pub stage1_beta2: f64,
    pub stage1_batch: usize,
    pub stage1_epochs: u64,
    /// Overrides the epoch count when nonzero.
    pub stage1_steps: u64,

    pub duration_lr: f64,
    pub duration_batch: usize,
    pub duration_epochs: u64,
    pub duration_steps: u64,
    pub alpha_duration: f64,

    pub flow_lr: f64,
    pub flow_batch: usize,
    pub flow_epochs: u64,
    pub flow_train_steps: u64,
    pub flow_hidden: usize,
    pub coupling_split_z: usize,
    pub coupling_split_zd: usize,
    pub context_dim: usize,
    pub context_heads: usize,
    pub context_layers: usize,
    pub context_ff: usize,
    pub cond_dim: usize,
    pub window_min_words: usize,
    pub window_max_words: usize,
    pub sampled_targets: bool,

    pub tau: f64,
    /// Extra numbered checkpoints every this many steps; 0 keeps only the
    /// latest.
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mel = MelConfig::default();
        Self {
            seed: 0,
            speaker_dim: 192,
            latent_dim: 4,
            duration_latent_dim: 2,
            flow_steps: 12,
            lambda_feat: 4.0,
            lambda_mel: 45.0,
            alpha_kl: 1e-3,
            chunk_samples: 19_200,
            sample_rate: mel.sample_rate,
            n_fft: mel.n_fft,
            hop: mel.hop,
            win_length: mel.window,
            fmin: mel.fmin,
            fmax: mel.fmax,
            log_floor: mel.log_floor,
            scale: ModelScale::Full,
            manifest: None,
            documents_per_speaker: 20,
            sentences_per_document: 10,
            assign_splits: true,
            stage1_lr: 2e-4,
            stage1_beta1: 0.8,
            stage1_beta2: 0.99,
            stage1_batch: 84,
            stage1_epochs: 440,
            stage1_steps: 0,
            duration_lr: 1e-3,
            duration_batch: 84,
            duration_epochs: 440,
            duration_steps: 0,
            alpha_duration: 1e-3,
            flow_lr: 1e-3,
            flow_batch: 128,
            flow_epochs: 106,
            flow_train_steps: 0,
            flow_hidden: 32,
            coupling_split_z: 2,
            coupling_split_zd: 1,
            context_dim: 32,
            context_heads: 2,
            context_layers: 2,
            context_ff: 64,
            cond_dim: 32,
            window_min_words: 72,
            window_max_words: 95,
            sampled_targets: false,
            tau: 1.0,
            checkpoint_every: 0,
            log_every: 10,
        }
    }
}

/// Key of the `key = value` line containing byte `pos`.
fn key_at(text: &str, pos: usize) -> Option<String> {
    let start = text[..pos.min(text.len())].rfind('\n').map_or(0, |i| i + 1);
    let line = text[start..].lines().next()?;
    let key = line.split('=').next()?.trim();
    (!key.is_empty()).then(|| key.to_owned())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let field = e.span().and_then(|s| key_at(text, s.start)).unwrap_or_else(|| "config".into());
            Error::config(field, e.message().trim().to_owned())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("speaker_dim", self.speaker_dim),
            ("latent_dim", self.latent_dim),
            ("duration_latent_dim", self.duration_latent_dim),
            ("flow_steps", self.flow_steps),
            ("chunk_samples", self.chunk_samples),
            ("hop", self.hop),
            ("documents_per_speaker", self.documents_per_speaker),
            ("sentences_per_document", self.sentences_per_document),
            ("stage1_batch", self.stage1_batch),
            ("duration_batch", self.duration_batch),
            ("flow_batch", self.flow_batch),
            ("flow_hidden", self.flow_hidden),
            ("context_layers", self.context_layers),
            ("log_every", self.log_every as usize),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        let rates = [
            ("lambda_feat", self.lambda_feat),
            ("lambda_mel", self.lambda_mel),
            ("alpha_kl", self.alpha_kl),
            ("alpha_duration", self.alpha_duration),
            ("stage1_lr", self.stage1_lr),
            ("duration_lr", self.duration_lr),
            ("flow_lr", self.flow_lr),
        ];
        for (field, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be positive and finite"));
            }
        }
        for (field, b) in [("stage1_beta1", self.stage1_beta1), ("stage1_beta2", self.stage1_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(field, "must lie in [0, 1)"));
            }
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::config("tau", "must be non-negative"));
        }
        if self.chunk_samples % self.hop != 0 {
            return Err(Error::config(
                "chunk_samples",
                format!("{} is not divisible by hop {}", self.chunk_samples, self.hop),
            ));
        }
        let upsampling: usize = VocoderConfig::default().upsample_factors.iter().product();
        if self.hop != upsampling {
            return Err(Error::config("hop", format!("the vocoder upsamples by {upsampling}")));
        }
        if self.coupling_split_z != self.latent_dim / 2 {
            return Err(Error::config("coupling_split_z", format!("only the half split {} is implemented", self.latent_dim / 2)));
        }
        if self.coupling_split_zd != self.duration_latent_dim / 2 {
            return Err(Error::config(
                "coupling_split_zd",
                format!("only the half split {} is implemented", self.duration_latent_dim / 2),
            ));
        }
        self.mel().validate()?;
        self.context().validate()?;
        self.window().validate()?;
        Ok(())
    }

    pub fn mel(&self) -> MelConfig {
        MelConfig {
            sample_rate: self.sample_rate,
            n_fft: self.n_fft,
            hop: self.hop,
            window: self.win_length,
            bands: 80,
            fmin: self.fmin,
            fmax: self.fmax,
            log_floor: self.log_floor,
        }
    }

    pub fn corpus_spec(&self) -> SyntheticCorpusSpec {
        SyntheticCorpusSpec {
            sample_rate: self.sample_rate,
            hop: self.hop,
            ..SyntheticCorpusSpec::default().with_documents(self.documents_per_speaker, self.sentences_per_document)
        }
    }

    pub fn acoustic(&self, n_phonemes: usize, n_speakers: usize) -> AcousticConfig {
        let base = AcousticConfig::new(n_phonemes, n_speakers);
        let base = match self.scale {
            ModelScale::Full => base,
            ModelScale::Reduced => AcousticConfig {
                enc_dim: 32,
                ref_dim: 32,
                dec_dim: 48,
                dec_layers: 2,
                vocoder: VocoderConfig {
                    channels: 32,
                    pitch_bins: 24,
                    harmonic_groups: 4,
                    residual_channels: vec![8, 8, 4, 4],
                    ..VocoderConfig::default()
                },
                ..base
            },
            ModelScale::Tiny => AcousticConfig::tiny(n_phonemes, n_speakers),
        };
        AcousticConfig {
            speaker_dim: self.speaker_dim,
            latent_dim: self.latent_dim,
            hop: self.hop,
            sample_rate: self.sample_rate,
            ..base
        }
    }

    pub fn discriminators(&self) -> DiscriminatorConfig {
        match self.scale {
            ModelScale::Full => DiscriminatorConfig::default(),
            ModelScale::Reduced => DiscriminatorConfig {
                periods: vec![2, 3],
                resolutions: vec![(512, 128), (1024, 256)],
                period_channels: vec![8, 16],
                resolution_channels: 16,
            },
            ModelScale::Tiny => DiscriminatorConfig::tiny(),
        }
    }

    pub fn stage1_options(&self) -> TrainOptions {
        let adam = AdamConfig {
            lr: self.stage1_lr,
            beta1: self.stage1_beta1,
            beta2: self.stage1_beta2,
            ..AdamConfig::default()
        };
        TrainOptions {
            generator: adam,
            discriminator: adam,
            weights: LossWeights {
                feat: self.lambda_feat,
                mel: self.lambda_mel,
                kl: self.alpha_kl,
            },
            chunk_samples: self.chunk_samples,
            ..TrainOptions::default()
        }
    }

    pub fn duration(&self, n_phonemes: usize, n_speakers: usize) -> DurationConfig {
        let base = DurationConfig::new(n_phonemes, n_speakers);
        let w = match self.scale {
            ModelScale::Full | ModelScale::Reduced => base.enc_dim,
            ModelScale::Tiny => 8,
        };
        DurationConfig {
            speaker_dim: self.speaker_dim,
            latent_dim: self.duration_latent_dim,
            enc_dim: w,
            ref_dim: w,
            pred_dim: w,
            kl_weight: self.alpha_duration,
            ..base
        }
    }

    pub fn duration_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.duration_lr,
            beta1: 0.9,
            beta2: 0.999,
            ..AdamConfig::default()
        }
    }

    pub fn context(&self) -> ContextConfig {
        ContextConfig {
            d_model: self.context_dim,
            heads: self.context_heads,
            layers: self.context_layers,
            ff_dim: self.context_ff,
            cond_dim: self.cond_dim,
        }
    }

    pub fn window(&self) -> WindowRange {
        WindowRange {
            min: self.window_min_words,
            max: self.window_max_words,
        }
    }

    pub fn flow(&self, n_speakers: usize) -> ProsodyFlowConfig {
        ProsodyFlowConfig {
            speaker_dim: self.speaker_dim,
            latent_dim: self.latent_dim,
            duration_latent_dim: self.duration_latent_dim,
            steps: self.flow_steps,
            hidden: self.flow_hidden,
            context: self.context(),
            window: self.window(),
            ..ProsodyFlowConfig::new(n_speakers)
        }
    }

    pub fn flow_options(&self) -> FlowTrainOptions {
        let base = FlowTrainOptions::default();
        FlowTrainOptions {
            adam: AdamConfig {
                lr: self.flow_lr,
                ..base.adam
            },
            sampled_targets: self.sampled_targets,
            ..base
        }
    }
}

/// Steps for a stage: the explicit count, or `epochs` passes over `n`
/// items in batches of `batch`.
pub fn stage_steps(explicit: u64, epochs: u64, n: usize, batch: usize) -> u64 {
    if explicit > 0 {
        explicit
    } else {
        epochs * n.div_ceil(batch.max(1)) as u64
    }
}
