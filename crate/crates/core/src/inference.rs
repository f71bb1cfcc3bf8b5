//! The two inference modes. Fine-grained prosody transfer encodes latents
//! from a source recording; long-context TTS samples them from the flows over
//! a window of text. Both hand latents to [`synthesize_from_latents`], so
//! everything below the latents is shared.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::acoustic::{AcousticModel, DecodeInputs, WordProsodyPosterior};
use crate::autograd::{Graph, Mat};
use crate::corpus::{check_word_map, Corpus, Utterance};
use crate::dsp::wav::write_wav;
use crate::dsp::{MelConfig, MelExtractor};
use crate::duration::{quantize_durations, DurationModel};
use crate::error::{Error, Result};
use crate::prosody_flow::{build_windows, ProsodyFlow};
use crate::rng::rng_from_seed;
use crate::scalar::Scalar;

/// Version written by this build into every trained component.
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelVersions {
    pub acoustic: u32,
    pub duration: u32,
    pub flow: Option<u32>,
}

impl Default for ModelVersions {
    fn default() -> Self {
        Self {
            acoustic: MODEL_FORMAT_VERSION,
            duration: MODEL_FORMAT_VERSION,
            flow: Some(MODEL_FORMAT_VERSION),
        }
    }
}

/// Everything needed for synthesis. The flow is optional because transfer
/// does not use it.
#[derive(Clone, Debug)]
pub struct ModelBundle<T: Scalar> {
    pub acoustic: AcousticModel<T>,
    pub duration: DurationModel<T>,
    pub flow: Option<ProsodyFlow<T>>,
    pub mel: MelConfig,
    /// Speaker names in table order.
    pub speakers: Vec<String>,
    pub versions: ModelVersions,
}

impl<T: Scalar> ModelBundle<T> {
    pub fn new(
        acoustic: AcousticModel<T>,
        duration: DurationModel<T>,
        flow: Option<ProsodyFlow<T>>,
        mel: MelConfig,
        speakers: Vec<String>,
        versions: ModelVersions,
    ) -> Result<Self> {
        let b = Self {
            acoustic,
            duration,
            flow,
            mel,
            speakers,
            versions,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let v = &self.versions;
        for (name, found) in [("acoustic", Some(v.acoustic)), ("duration", Some(v.duration)), ("flow", v.flow)] {
            if let Some(found) = found {
                if found != MODEL_FORMAT_VERSION {
                    return Err(Error::Version {
                        found: format!("{name} v{found}"),
                        expected: format!("v{MODEL_FORMAT_VERSION}"),
                    });
                }
            }
        }
        if self.flow.is_some() != v.flow.is_some() {
            return Err(Error::validation("versions.flow", "flow version stamp without a flow, or the reverse"));
        }
        self.mel.validate()?;
        let n = self.speakers.len();
        let a = &self.acoustic.config;
        let d = &self.duration.config;
        if a.n_speakers != n || d.n_speakers != n {
            return Err(Error::validation(
                "speakers",
                format!("{n} names, acoustic table {}, duration table {}", a.n_speakers, d.n_speakers),
            ));
        }
        if a.hop != self.mel.hop || a.sample_rate != self.mel.sample_rate {
            return Err(Error::validation("mel.hop", "acoustic model and mel analysis disagree on hop or rate"));
        }
        if a.n_phonemes != d.n_phonemes {
            return Err(Error::validation("n_phonemes", "acoustic and duration inventories differ"));
        }
        if let Some(f) = &self.flow {
            let c = &f.config;
            if c.n_speakers != n {
                return Err(Error::validation("speakers", format!("flow table has {} speakers, bundle {n}", c.n_speakers)));
            }
            if c.latent_dim != a.latent_dim || c.duration_latent_dim != d.latent_dim {
                return Err(Error::validation("latent_dim", "flow channels differ from the Stage I latent sizes"));
            }
        }
        Ok(())
    }

    pub fn speaker_index(&self, name: &str) -> Result<usize> {
        self.speakers
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| Error::UnknownSpeaker(name.into()))
    }

    pub fn sample_rate(&self) -> u32 {
        self.mel.sample_rate
    }

    fn flow(&self) -> Result<&ProsodyFlow<T>> {
        self.flow.as_ref().ok_or_else(|| Error::Missing("Stage II model in the bundle".into()))
    }
}

/// A waveform with the latents and durations that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Synthesis<T: Scalar> {
    pub waveform: Vec<f32>,
    pub z: Mat<T>,
    pub zd: Mat<T>,
    pub durations: Vec<usize>,
}

impl<T: Scalar> Synthesis<T> {
    pub fn n_frames(&self) -> usize {
        self.durations.iter().sum()
    }
}

/// Text of one sentence with its phonemes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceInput {
    pub text: String,
    pub phonemes: Vec<usize>,
    pub word_map: Vec<usize>,
}

impl SentenceInput {
    pub fn n_words(&self) -> usize {
        self.word_map.last().map_or(0, |&w| w + 1)
    }

    fn check(&self) -> Result<()> {
        check_word_map(&self.word_map)?;
        if self.phonemes.len() != self.word_map.len() {
            return Err(Error::Shape("phonemes and word map differ in length".into()));
        }
        let words = self.text.split_whitespace().count();
        if words != self.n_words() {
            return Err(Error::validation("text", format!("{words} words in text, {} in the word map", self.n_words())));
        }
        Ok(())
    }
}

impl From<&Utterance> for SentenceInput {
    fn from(u: &Utterance) -> Self {
        Self {
            text: u.text.clone(),
            phonemes: u.phonemes.clone(),
            word_map: u.word_map.clone(),
        }
    }
}

/// Predicts and quantizes durations from `zd` unless `durations` is given,
/// then decodes and vocodes the whole sentence for `speaker`.
pub fn synthesize_from_latents<T: Scalar>(
    bundle: &ModelBundle<T>,
    phonemes: &[usize],
    word_map: &[usize],
    speaker: usize,
    z: &Mat<T>,
    zd: &Mat<T>,
    durations: Option<&[usize]>,
) -> Result<Synthesis<T>> {
    let durations = match durations {
        Some(d) => d.to_vec(),
        None => {
            let real = bundle.duration.predict_durations(phonemes, word_map, speaker, zd)?;
            quantize_durations(&real, None)?
        }
    };
    let inputs = DecodeInputs {
        phonemes,
        durations: &durations,
        word_map,
        speaker,
    };
    let waveform = bundle.acoustic.synthesize(&inputs, z)?;
    Ok(Synthesis {
        waveform,
        z: z.clone(),
        zd: zd.clone(),
        durations,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferOptions {
    /// Reuse the source durations instead of predicting them.
    pub copy_durations: bool,
}

/// Both word-level posteriors of a recording, encoded with the recording's
/// own speaker.
pub fn reference_posteriors<T: Scalar>(
    bundle: &ModelBundle<T>,
    source: &Utterance,
) -> Result<(WordProsodyPosterior<T>, WordProsodyPosterior<T>)> {
    let speaker = bundle.speaker_index(&source.speaker)?;
    let mel = MelExtractor::<T>::new(bundle.mel.clone())?.extract(&source.waveform)?;
    let alignment = source.alignment(source.aligned_frames(bundle.mel.hop))?;
    let mut g = Graph::new();
    let p = bundle.acoustic.bind(&mut g, false);
    let m = g.constant(mel.frames);
    let z = bundle.acoustic.reference_encode(&mut g, &p, m, &alignment, speaker)?.values(&g);
    let zd = bundle.duration.posterior(&source.durations, &source.word_map, speaker)?;
    if z.means.nrows() != zd.means.nrows() {
        return Err(Error::Shape(format!(
            "{} acoustic and {} duration latent rows",
            z.means.nrows(),
            zd.means.nrows()
        )));
    }
    Ok((z, zd))
}

/// Posterior means of both latents of a recording.
pub fn encode_reference<T: Scalar>(bundle: &ModelBundle<T>, source: &Utterance) -> Result<(Mat<T>, Mat<T>)> {
    let (z, zd) = reference_posteriors(bundle, source)?;
    Ok((z.means, zd.means))
}

/// Fine-grained prosody transfer of `source` onto `target_speaker`.
pub fn infer_fpt<T: Scalar>(
    bundle: &ModelBundle<T>,
    source: &Utterance,
    target_speaker: &str,
    options: TransferOptions,
) -> Result<Synthesis<T>> {
    let target = bundle.speaker_index(target_speaker)?;
    let (z, zd) = encode_reference(bundle, source)?;
    let copied = options.copy_durations.then_some(source.durations.as_slice());
    synthesize_from_latents(bundle, &source.phonemes, &source.word_map, target, &z, &zd, copied)
}

/// Synthesizes sentence `target` of `document` for `speaker`, with latents
/// sampled at temperature `tau` over the window that targets it.
pub fn infer_tts<T: Scalar, R: rand::Rng>(
    bundle: &ModelBundle<T>,
    document: &[SentenceInput],
    target: usize,
    speaker: &str,
    rng: &mut R,
    tau: f64,
) -> Result<Synthesis<T>> {
    let flow = bundle.flow()?;
    let spk = bundle.speaker_index(speaker)?;
    if target >= document.len() {
        return Err(Error::Argument(format!("sentence {target} of a {}-sentence document", document.len())));
    }
    for s in document {
        s.check()?;
    }
    let counts: Vec<usize> = document.iter().map(SentenceInput::n_words).collect();
    let window = build_windows(&counts, flow.config.window)?
        .into_iter()
        .find(|w| w.targets.contains(&target))
        .expect("every sentence is a target of some window");
    let words: Vec<usize> = window.sentences.clone().flat_map(|s| flow.vocab.encode(&document[s].text)).collect();
    let span = window.sentence_span(target).expect("target lies in its window");
    let (z, zd) = flow.sample(&words, &window.offsets, spk, span, rng, tau)?;
    let s = &document[target];
    synthesize_from_latents(bundle, &s.phonemes, &s.word_map, spk, &z, &zd, None)
}

/// One line of a synthesis manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum SynthesisRequest {
    Tts {
        document: String,
        sentence: usize,
        speaker: String,
        seed: u64,
        #[serde(default = "unit_tau")]
        tau: f64,
        output: PathBuf,
    },
    Fpt {
        source: String,
        speaker: String,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        copy_durations: bool,
        output: PathBuf,
    },
}

fn unit_tau() -> f64 {
    1.0
}

impl SynthesisRequest {
    pub fn output(&self) -> &Path {
        match self {
            SynthesisRequest::Tts { output, .. } | SynthesisRequest::Fpt { output, .. } => output,
        }
    }
}

/// Outcome of one request. `seconds` is wall time and the only field that
/// varies between identical runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestReport {
    pub index: usize,
    pub output: PathBuf,
    pub error: Option<String>,
    pub z_norm: f64,
    pub zd_norm: f64,
    pub durations: Vec<usize>,
    pub samples: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub requests: Vec<RequestReport>,
}

impl BatchReport {
    pub fn failures(&self) -> usize {
        self.requests.iter().filter(|r| r.error.is_some()).count()
    }
}

fn frobenius<T: Scalar>(m: &Mat<T>) -> f64 {
    m.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt()
}

fn run_request<T: Scalar>(bundle: &ModelBundle<T>, corpus: &Corpus, req: &SynthesisRequest) -> Result<Synthesis<T>> {
    match req {
        SynthesisRequest::Tts {
            document,
            sentence,
            speaker,
            seed,
            tau,
            ..
        } => {
            let docs = corpus.documents();
            let (_, idx) = docs
                .iter()
                .find(|(d, _)| d == document)
                .ok_or_else(|| Error::Missing(format!("document `{document}`")))?;
            let sents: Vec<SentenceInput> = idx.iter().map(|&i| SentenceInput::from(&corpus.utterances[i])).collect();
            infer_tts(bundle, &sents, *sentence, speaker, &mut rng_from_seed(*seed), *tau)
        }
        SynthesisRequest::Fpt {
            source,
            speaker,
            copy_durations,
            ..
        } => {
            let u = corpus
                .utterances
                .iter()
                .find(|u| &u.id == source)
                .ok_or_else(|| Error::Missing(format!("source utterance `{source}`")))?;
            infer_fpt(
                bundle,
                u,
                speaker,
                TransferOptions {
                    copy_durations: *copy_durations,
                },
            )
        }
    }
}

/// Runs every request, writing WAVs under `out_dir` (relative outputs) and
/// recording failures per request instead of stopping.
pub fn batch_synthesize<T: Scalar>(
    bundle: &ModelBundle<T>,
    corpus: &Corpus,
    requests: &[SynthesisRequest],
    out_dir: &Path,
) -> BatchReport {
    let requests = requests
        .iter()
        .enumerate()
        .map(|(index, req)| {
            let output = out_dir.join(req.output());
            let start = Instant::now();
            let result = run_request(bundle, corpus, req).and_then(|s| {
                if let Some(dir) = output.parent() {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                write_wav(&output, &s.waveform, bundle.sample_rate())?;
                Ok(s)
            });
            let seconds = start.elapsed().as_secs_f64();
            match result {
                Ok(s) => RequestReport {
                    index,
                    output,
                    error: None,
                    z_norm: frobenius(&s.z),
                    zd_norm: frobenius(&s.zd),
                    samples: s.waveform.len(),
                    durations: s.durations,
                    seconds,
                },
                Err(e) => {
                    log::warn!("request {index} failed: {e}");
                    RequestReport {
                        index,
                        output,
                        error: Some(e.to_string()),
                        z_norm: 0.0,
                        zd_norm: 0.0,
                        durations: Vec::new(),
                        samples: 0,
                        seconds,
                    }
                }
            }
        })
        .collect();
    BatchReport { requests }
}

/// Parses a line-delimited JSON request manifest; blank lines are skipped.
pub fn parse_requests(text: &str) -> Result<Vec<SynthesisRequest>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Record {
                index: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
