//! Stage I acoustic model: phoneme encoder, duration upsampling, word-level
//! variational reference encoder, decoder to the intermediate frames, and
//! the waveform generator, trained adversarially against [`Discriminators`].

pub mod discriminator;
pub mod loss;
mod train;
pub mod vocoder;

use std::sync::{Arc, Mutex};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvSpec, Graph, Mat, Var};
use crate::corpus::{frame_alignment, FrameToWordAlignment};
use crate::error::{Error, Result};
use crate::nn::{broadcast_rows, Bound, Conv1d, Embedding, Linear, ParamStore};
use crate::rng::normal;
use crate::scalar::Scalar;

pub use discriminator::{DiscOutput, DiscriminatorConfig, Discriminators};
pub use loss::{kl_gaussian, LossWeights, Stage1LossBreakdown};
pub use train::{Stage1Batch, Stage1Item, Stage1Trainer, TrainOptions};
pub use vocoder::{Vocoder, VocoderConfig};

pub const MEL_BANDS: usize = 80;
const SLOPE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcousticConfig {
    pub n_phonemes: usize,
    pub n_speakers: usize,
    pub speaker_dim: usize,
    pub latent_dim: usize,
    pub enc_dim: usize,
    pub enc_layers: usize,
    pub ref_dim: usize,
    pub dec_dim: usize,
    pub dec_layers: usize,
    /// Reference encoder without its sequence layers: per-frame projection
    /// and span pooling only.
    pub pooling_only: bool,
    pub hop: usize,
    pub sample_rate: u32,
    pub vocoder: VocoderConfig,
}

impl AcousticConfig {
    pub fn new(n_phonemes: usize, n_speakers: usize) -> Self {
        Self {
            n_phonemes,
            n_speakers,
            speaker_dim: 192,
            latent_dim: 4,
            enc_dim: 64,
            enc_layers: 2,
            ref_dim: 64,
            dec_dim: 96,
            dec_layers: 3,
            pooling_only: false,
            hop: 256,
            sample_rate: 24_000,
            vocoder: VocoderConfig::default(),
        }
    }

    /// Very small widths for gradient checks and quick tests.
    pub fn tiny(n_phonemes: usize, n_speakers: usize) -> Self {
        Self {
            enc_dim: 8,
            enc_layers: 1,
            ref_dim: 8,
            dec_dim: 8,
            dec_layers: 1,
            vocoder: VocoderConfig {
                channels: 8,
                pitch_bins: 8,
                harmonic_groups: 3,
                residual_channels: vec![4, 4, 4, 4],
                ..VocoderConfig::default()
            },
            ..Self::new(n_phonemes, n_speakers)
        }
    }
}

/// One recorded speaker-table access.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpeakerLookup {
    pub site: &'static str,
    pub speaker: usize,
}

/// Learned speaker embeddings with an access trace, so callers can verify
/// which component read which speaker.
#[derive(Clone, Debug)]
pub struct SpeakerTable {
    emb: Embedding,
    trace: Arc<Mutex<Vec<SpeakerLookup>>>,
}

impl SpeakerTable {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, n: usize, dim: usize) -> Self {
        Self {
            emb: Embedding::new(store, rng, name, n, dim, 0.3),
            trace: Arc::new(Mutex::new(Vec::new())),
        }
    }

    pub fn len(&self) -> usize {
        self.emb.vocab
    }

    pub fn is_empty(&self) -> bool {
        self.emb.vocab == 0
    }

    pub fn lookup<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, speaker: usize, site: &'static str) -> Result<Var> {
        if speaker >= self.emb.vocab {
            return Err(Error::UnknownSpeaker(format!("index {speaker} of {}", self.emb.vocab)));
        }
        self.trace.lock().expect("trace lock").push(SpeakerLookup { site, speaker });
        self.emb.lookup(g, p, &[speaker])
    }

    pub fn take_trace(&self) -> Vec<SpeakerLookup> {
        std::mem::take(&mut *self.trace.lock().expect("trace lock"))
    }

    /// Gives this table its own trace, detached from any clones.
    pub fn fresh_trace(&mut self) {
        self.trace = Arc::new(Mutex::new(Vec::new()));
    }
}

/// Residual stack of `k`-wide convolutions with leaky ReLU.
#[derive(Clone, Debug)]
pub(crate) struct ResConvStack {
    convs: Vec<Conv1d>,
}

impl ResConvStack {
    pub(crate) fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        layers: usize,
        kernel: usize,
        dilate: bool,
    ) -> Self {
        let convs = (0..layers)
            .map(|i| {
                let spec = if dilate {
                    ConvSpec::new(kernel).with_dilation(1 << i.min(3))
                } else {
                    ConvSpec::new(kernel)
                };
                Conv1d::new(store, rng, &format!("{name}.{i}"), dim, dim, spec)
            })
            .collect();
        Self { convs }
    }

    pub(crate) fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, mut h: Var) -> Var {
        for c in &self.convs {
            let y = c.forward(g, p, h, 1);
            let y = g.leaky_relu(y, T::c(SLOPE));
            h = g.add(h, y);
        }
        h
    }
}

/// Frame-to-phoneme index for replication by duration.
pub fn frame_phoneme_index(durations: &[usize]) -> Vec<usize> {
    let mut idx = Vec::with_capacity(durations.iter().sum());
    for (p, &d) in durations.iter().enumerate() {
        idx.extend(std::iter::repeat_n(p, d));
    }
    idx
}

/// Replicates row `p` of `encodings` `durations[p]` times.
pub fn upsample<T: Scalar>(g: &mut Graph<T>, encodings: Var, durations: &[usize]) -> Result<Var> {
    let n = g.shape(encodings).0;
    if durations.len() != n {
        return Err(Error::Shape(format!("{} durations for {n} phoneme encodings", durations.len())));
    }
    Ok(g.gather_rows(encodings, frame_phoneme_index(durations)))
}

/// Word-level Gaussian posterior as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct PosteriorVars {
    pub mean: Var,
    pub log_sigma: Var,
}

/// Word-level Gaussian posterior values.
#[derive(Clone, Debug, PartialEq)]
pub struct WordProsodyPosterior<T: Scalar> {
    pub means: Mat<T>,
    pub stddevs: Mat<T>,
}

impl PosteriorVars {
    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> WordProsodyPosterior<T> {
        WordProsodyPosterior {
            means: g.value(self.mean).clone(),
            stddevs: g.value(self.log_sigma).mapv(|v| v.exp()),
        }
    }
}

/// `z = μ + σ ⊙ ε`, with ε drawn from `rng` (or zero when `rng` is `None`).
pub fn sample_latents<T: Scalar, R: Rng>(g: &mut Graph<T>, post: PosteriorVars, rng: Option<&mut R>) -> Var {
    let (w, u) = g.shape(post.mean);
    let Some(rng) = rng else {
        return post.mean;
    };
    let eps = Array2::from_shape_fn((w, u), |_| T::c(normal(rng)));
    let eps = g.constant(eps);
    let sigma = g.exp(post.log_sigma);
    let noise = g.mul(sigma, eps);
    g.add(post.mean, noise)
}

/// Conditional variational encoder from per-frame features to word latents.
#[derive(Clone, Debug)]
pub struct ReferenceEncoder {
    input: Linear,
    seq: Option<ResConvStack>,
    speaker: Linear,
    hidden: Linear,
    mean: Linear,
    log_sigma: Linear,
}

impl ReferenceEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        dim: usize,
        speaker_dim: usize,
        latent_dim: usize,
        seq_layers: usize,
        seq_kernel: usize,
    ) -> Self {
        let input = Linear::new(store, rng, &format!("{name}.in"), in_dim, dim);
        let seq = (seq_layers > 0).then(|| ResConvStack::new(store, rng, &format!("{name}.seq"), dim, seq_layers, seq_kernel, false));
        let speaker = Linear::new(store, rng, &format!("{name}.spk"), speaker_dim, dim);
        let hidden = Linear::new(store, rng, &format!("{name}.hid"), 2 * dim, dim);
        let mean = Linear::new(store, rng, &format!("{name}.mu"), dim, latent_dim);
        let log_sigma = Linear::zeros(store, &format!("{name}.logsig"), dim, latent_dim);
        Self {
            input,
            seq,
            speaker,
            hidden,
            mean,
            log_sigma,
        }
    }

    /// `features` is `n × in_dim`; `spans` partition its rows into words.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        features: Var,
        spans: &[(usize, usize)],
        speaker: Var,
    ) -> Result<PosteriorVars> {
        if spans.is_empty() {
            return Err(Error::Argument("reference encoder needs at least one word".into()));
        }
        let mut h = self.input.forward(g, p, features);
        h = g.leaky_relu(h, T::c(SLOPE));
        if let Some(seq) = &self.seq {
            h = seq.forward(g, p, h);
        }
        let pooled = g.segment_mean(h, spans.to_vec());
        let s = self.speaker.forward(g, p, speaker);
        let s = broadcast_rows(g, s, spans.len());
        let cat = g.concat_cols(&[pooled, s]);
        let hid = self.hidden.forward(g, p, cat);
        let hid = g.leaky_relu(hid, T::c(SLOPE));
        Ok(PosteriorVars {
            mean: self.mean.forward(g, p, hid),
            log_sigma: self.log_sigma.forward(g, p, hid),
        })
    }
}

#[derive(Clone, Debug)]
pub struct PhonemeEncoder {
    emb: Embedding,
    stack: ResConvStack,
}

impl PhonemeEncoder {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, vocab: usize, dim: usize, layers: usize) -> Self {
        Self {
            emb: Embedding::new(store, rng, &format!("{name}.emb"), vocab, dim, 0.5),
            stack: ResConvStack::new(store, rng, &format!("{name}.conv"), dim, layers, 5, false),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, phonemes: &[usize]) -> Result<Var> {
        if phonemes.is_empty() {
            return Err(Error::Argument("empty phoneme sequence".into()));
        }
        let h = self.emb.lookup(g, p, phonemes)?;
        Ok(self.stack.forward(g, p, h))
    }
}

/// Inputs the decoder needs besides the latents.
#[derive(Clone, Debug)]
pub struct DecodeInputs<'a> {
    pub phonemes: &'a [usize],
    pub durations: &'a [usize],
    pub word_map: &'a [usize],
    pub speaker: usize,
}

#[derive(Debug, Clone)]
pub struct AcousticModel<T: Scalar> {
    pub config: AcousticConfig,
    pub params: ParamStore<T>,
    pub speakers: SpeakerTable,
    encoder: PhonemeEncoder,
    reference: ReferenceEncoder,
    dec_speaker: Linear,
    dec_in: Linear,
    dec_stack: ResConvStack,
    dec_out: Linear,
    pub vocoder: Vocoder<T>,
}

impl<T: Scalar> AcousticModel<T> {
    pub fn new<R: Rng>(config: AcousticConfig, rng: &mut R) -> Result<Self> {
        if config.latent_dim == 0 || config.n_speakers == 0 || config.n_phonemes == 0 {
            return Err(Error::config("acoustic", "dimensions must be positive"));
        }
        let mut s = ParamStore::new();
        let speakers = SpeakerTable::new(&mut s, rng, "speaker", config.n_speakers, config.speaker_dim);
        let encoder = PhonemeEncoder::new(&mut s, rng, "enc", config.n_phonemes, config.enc_dim, config.enc_layers);
        let seq_layers = if config.pooling_only { 0 } else { 2 };
        let reference = ReferenceEncoder::new(
            &mut s,
            rng,
            "ref",
            MEL_BANDS,
            config.ref_dim,
            config.speaker_dim,
            config.latent_dim,
            seq_layers,
            3,
        );
        let dec_speaker = Linear::new(&mut s, rng, "dec.spk", config.speaker_dim, config.dec_dim);
        let dec_in = Linear::new(&mut s, rng, "dec.in", config.enc_dim + config.latent_dim + config.dec_dim, config.dec_dim);
        let dec_stack = ResConvStack::new(&mut s, rng, "dec.conv", config.dec_dim, config.dec_layers, 5, true);
        let dec_out = Linear::new(&mut s, rng, "dec.out", config.dec_dim, MEL_BANDS);
        let vocoder = Vocoder::new(&mut s, rng, config.vocoder.clone(), MEL_BANDS, config.hop, config.sample_rate)?;
        Ok(Self {
            config,
            params: s,
            speakers,
            encoder,
            reference,
            dec_speaker,
            dec_in,
            dec_stack,
            dec_out,
            vocoder,
        })
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    pub fn encode_phonemes(&self, g: &mut Graph<T>, p: &Bound, phonemes: &[usize]) -> Result<Var> {
        self.encoder.forward(g, p, phonemes)
    }

    /// Posterior over word latents from a `n × 80` mel and its word spans.
    pub fn reference_encode(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        mel: Var,
        alignment: &FrameToWordAlignment,
        speaker: usize,
    ) -> Result<PosteriorVars> {
        let (n, bands) = g.shape(mel);
        if bands != MEL_BANDS {
            return Err(Error::Shape(format!("mel has {bands} bands")));
        }
        let mut spans = alignment.word_spans.clone();
        for s in &mut spans {
            s.0 = s.0.min(n);
            s.1 = s.1.min(n);
        }
        let frames = spans.last().map_or(0, |s| s.1);
        let mel = if frames < n { g.slice_rows(mel, 0, frames) } else { mel };
        let c = self.speakers.lookup(g, p, speaker, "acoustic.reference")?;
        self.reference.forward(g, p, mel, &spans, c)
    }

    /// Intermediate frames `B`, `Σd × 80`, with word latents broadcast to
    /// their frames.
    pub fn decode(&self, g: &mut Graph<T>, p: &Bound, inputs: &DecodeInputs, z: Var) -> Result<Var> {
        let alignment = frame_alignment(inputs.durations, inputs.word_map)?;
        let (w, u) = g.shape(z);
        if w != alignment.n_words() || u != self.config.latent_dim {
            return Err(Error::Shape(format!(
                "latents are {w}×{u}, expected {}×{}",
                alignment.n_words(),
                self.config.latent_dim
            )));
        }
        if inputs.phonemes.len() != inputs.durations.len() {
            return Err(Error::Shape("phonemes and durations differ in length".into()));
        }
        let n_frames: usize = inputs.durations.iter().sum();
        if n_frames == 0 {
            return Err(Error::Argument("durations sum to zero frames".into()));
        }
        let enc = self.encode_phonemes(g, p, inputs.phonemes)?;
        let enc_up = upsample(g, enc, inputs.durations)?;
        let z_up = g.gather_rows(z, alignment.frame_words());
        let c = self.speakers.lookup(g, p, inputs.speaker, "acoustic.decoder")?;
        let s = self.dec_speaker.forward(g, p, c);
        let s = broadcast_rows(g, s, n_frames);
        let x = g.concat_cols(&[enc_up, z_up, s]);
        let h = self.dec_in.forward(g, p, x);
        let h = g.leaky_relu(h, T::c(SLOPE));
        let h = self.dec_stack.forward(g, p, h);
        Ok(self.dec_out.forward(g, p, h))
    }

    pub fn vocode(&self, g: &mut Graph<T>, p: &Bound, frames: Var) -> Result<Var> {
        self.vocoder.forward(g, p, frames)
    }

    /// Decodes and vocodes a whole utterance: `hop · Σd` samples.
    pub fn synthesize(&self, inputs: &DecodeInputs, z: &Mat<T>) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let b = self.decode(&mut g, &p, inputs, zv)?;
        let wave = self.vocode(&mut g, &p, b)?;
        Ok(g.value(wave).iter().map(|v| v.f64() as f32).collect())
    }
}

#[cfg(test)]
mod tests;
