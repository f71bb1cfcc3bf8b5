//! Harmonic-tone "speech" with known per-word prosody.
//!
//! Each word is a fixed phoneme sequence. Every phoneme has a base duration
//! and a formant centre, and every word is rendered at the speaker's base F0
//! shifted by its pitch offset. The prosody of a word mixes a lexical
//! tendency, a document-topic shift signalled by marker words, sentence
//! declination and noise, so part of it is predictable from text context.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, Utterance};
use crate::error::{Error, Result};
use crate::rng::{derived_rng, normal, StdRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerVoice {
    pub name: String,
    pub base_f0: f64,
    /// Harmonic amplitude falls off as `h^-tilt`.
    pub tilt: f64,
    /// Global duration multiplier.
    pub tempo: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    pub speakers: Vec<SpeakerVoice>,
    /// Includes the topic marker words.
    pub vocab_size: usize,
    pub n_phonemes: usize,
    pub n_topics: usize,
    /// Inclusive range of words per sentence.
    pub sentence_words: (usize, usize),
    pub sentences_per_document: usize,
    pub documents_per_speaker: usize,
    /// Pitch offsets are clamped to `±pitch_range_st` semitones.
    pub pitch_range_st: f64,
    pub energy_range: (f64, f64),
    pub duration_range: (f64, f64),
    /// Scales the per-word random prosody components.
    pub prosody_noise: f64,
    pub sample_rate: u32,
    pub hop: usize,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        let voices = [(110.0, 0.6, 0.92), (135.0, 1.0, 1.05), (160.0, 1.4, 0.97), (185.0, 1.8, 1.08)];
        Self {
            speakers: voices
                .iter()
                .enumerate()
                .map(|(i, &(f0, tilt, tempo))| SpeakerVoice {
                    name: format!("spk{i}"),
                    base_f0: f0,
                    tilt,
                    tempo,
                })
                .collect(),
            vocab_size: 64,
            n_phonemes: 24,
            n_topics: 3,
            sentence_words: (6, 12),
            sentences_per_document: 10,
            documents_per_speaker: 20,
            pitch_range_st: 4.0,
            energy_range: (0.5, 1.5),
            duration_range: (0.7, 1.5),
            prosody_noise: 1.0,
            sample_rate: 24_000,
            hop: 256,
        }
    }
}

impl SyntheticCorpusSpec {
    /// Same voices and prosody process with fewer documents.
    pub fn with_documents(mut self, documents_per_speaker: usize, sentences_per_document: usize) -> Self {
        self.documents_per_speaker = documents_per_speaker;
        self.sentences_per_document = sentences_per_document;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.speakers.len() < 2 {
            return Err(Error::validation("n_speakers", "at least 2 speakers are needed"));
        }
        for (i, a) in self.speakers.iter().enumerate() {
            for b in &self.speakers[i + 1..] {
                if (a.base_f0 - b.base_f0).abs() < 20.0 {
                    return Err(Error::validation(
                        "base_f0",
                        format!("{} and {} are closer than 20 Hz", a.name, b.name),
                    ));
                }
            }
        }
        if self.vocab_size <= self.n_topics {
            return Err(Error::validation("vocab_size", "must exceed the number of topics"));
        }
        if self.sentence_words.0 == 0 || self.sentence_words.0 > self.sentence_words.1 {
            return Err(Error::validation("sentence_words", "need 1 <= min <= max"));
        }
        if self.n_phonemes == 0 {
            return Err(Error::validation("n_phonemes", "must be positive"));
        }
        Ok(())
    }
}

/// Ground-truth prosody of one rendered word.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordProsody {
    pub word: usize,
    pub pitch_offset_st: f64,
    pub energy_scale: f64,
    pub duration_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub word_phonemes: Vec<Vec<usize>>,
    pub phoneme_frames: Vec<f64>,
    pub phoneme_formant_hz: Vec<f64>,
    lex_pitch: Vec<f64>,
    lex_energy: Vec<f64>,
    lex_duration: Vec<f64>,
}

impl Lexicon {
    fn new(spec: &SyntheticCorpusSpec, seed: u64) -> Self {
        let mut rng = derived_rng(seed, "lexicon");
        let phoneme_frames = (0..spec.n_phonemes).map(|_| rng.random_range(4.0..9.0)).collect();
        let phoneme_formant_hz = (0..spec.n_phonemes).map(|_| rng.random_range(300.0..3000.0)).collect();
        let word_phonemes = (0..spec.vocab_size)
            .map(|_| {
                let n = rng.random_range(1..=4);
                // Phoneme 0 is reserved for padding in the models.
                (0..n).map(|_| rng.random_range(1..spec.n_phonemes.max(2))).collect()
            })
            .collect();
        let mut uni = |lo: f64, hi: f64| -> Vec<f64> { (0..spec.vocab_size).map(|_| rng.random_range(lo..hi)).collect() };
        Self {
            word_phonemes,
            phoneme_frames,
            phoneme_formant_hz,
            lex_pitch: uni(-2.0, 2.0),
            lex_energy: uni(-0.3, 0.3),
            lex_duration: uni(-0.2, 0.2),
        }
    }
}

pub fn word_token(id: usize) -> String {
    format!("w{id}")
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    /// Per utterance, per word.
    pub truth: Vec<Vec<WordProsody>>,
    pub lexicon: Lexicon,
    pub spec: SyntheticCorpusSpec,
}

fn topic_shift(n_topics: usize, topic: usize, span: f64) -> f64 {
    if n_topics <= 1 {
        0.0
    } else {
        -span + 2.0 * span * topic as f64 / (n_topics - 1) as f64
    }
}

fn sentence_prosody(
    spec: &SyntheticCorpusSpec,
    lex: &Lexicon,
    words: &[usize],
    topic: usize,
    rng: &mut StdRng,
) -> Vec<WordProsody> {
    let n = words.len();
    words
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let pos = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
            let noise = spec.prosody_noise;
            let pitch = lex.lex_pitch[w] + topic_shift(spec.n_topics, topic, 1.5) + (1.0 - 2.0 * pos) + 0.4 * noise * normal(rng);
            let energy = (lex.lex_energy[w] + topic_shift(spec.n_topics, topic, 0.15) + 0.1 * noise * normal(rng)).exp();
            let last = if i + 1 == n { 0.25 } else { 0.0 };
            let duration = (lex.lex_duration[w] + last + 0.08 * noise * normal(rng)).exp();
            WordProsody {
                word: w,
                pitch_offset_st: pitch.clamp(-spec.pitch_range_st, spec.pitch_range_st),
                energy_scale: energy.clamp(spec.energy_range.0, spec.energy_range.1),
                duration_scale: duration.clamp(spec.duration_range.0, spec.duration_range.1),
            }
        })
        .collect()
}

/// Audio and alignment for one sentence.
pub struct Rendered {
    pub waveform: Vec<f32>,
    pub phonemes: Vec<usize>,
    pub durations: Vec<usize>,
    pub word_map: Vec<usize>,
}

const MAX_HARMONIC_HZ: f64 = 5000.0;
const MAX_HARMONICS: usize = 64;

/// Renders `prosody` (one entry per word) in `voice`. The waveform length is
/// exactly `hop · Σ durations`.
pub fn render(spec: &SyntheticCorpusSpec, lex: &Lexicon, voice: &SpeakerVoice, prosody: &[WordProsody]) -> Rendered {
    let sr = spec.sample_rate as f64;
    let mut phonemes = Vec::new();
    let mut durations = Vec::new();
    let mut word_map = Vec::new();
    for (wi, p) in prosody.iter().enumerate() {
        for &ph in &lex.word_phonemes[p.word] {
            let frames = (lex.phoneme_frames[ph] * p.duration_scale * voice.tempo).round().max(1.0) as usize;
            phonemes.push(ph);
            durations.push(frames);
            word_map.push(wi);
        }
    }
    let total: usize = durations.iter().sum::<usize>() * spec.hop;
    let mut wave = Vec::with_capacity(total);

    let norm: f64 = {
        let h_max = ((MAX_HARMONIC_HZ / voice.base_f0) as usize).clamp(1, MAX_HARMONICS);
        0.15 / (1..=h_max).map(|h| (h as f64).powf(-2.0 * voice.tilt)).sum::<f64>().sqrt()
    };
    let alpha = 1.0 - (-1.0 / (0.004 * sr)).exp();
    let mut amp = [0.0f64; MAX_HARMONICS];
    // Per-harmonic phasors (cos, sin), rotated sample by sample.
    let mut ph_c = [1.0f64; MAX_HARMONICS];
    let mut ph_s = [0.0f64; MAX_HARMONICS];
    let mut target = [0.0f64; MAX_HARMONICS];
    let mut k = 0;
    for (wi, p) in prosody.iter().enumerate() {
        let f0 = voice.base_f0 * 2f64.powf(p.pitch_offset_st / 12.0);
        let rot: Vec<(f64, f64)> = (1..=MAX_HARMONICS)
            .map(|h| {
                let d = std::f64::consts::TAU * f0 * h as f64 / sr;
                (d.cos(), d.sin())
            })
            .collect();
        // Renormalise phasors at word boundaries to stop drift.
        for h in 0..MAX_HARMONICS {
            let m = (ph_c[h] * ph_c[h] + ph_s[h] * ph_s[h]).sqrt();
            ph_c[h] /= m;
            ph_s[h] /= m;
        }
        while k < word_map.len() && word_map[k] == wi {
            let formant = lex.phoneme_formant_hz[phonemes[k]];
            for (h, t) in target.iter_mut().enumerate() {
                let f = f0 * (h + 1) as f64;
                *t = if f < MAX_HARMONIC_HZ {
                    let gain = 1.0 + 3.0 * (-((f - formant) / 350.0).powi(2)).exp();
                    norm * p.energy_scale * ((h + 1) as f64).powf(-voice.tilt) * gain
                } else {
                    0.0
                };
            }
            for _ in 0..durations[k] * spec.hop {
                let mut s = 0.0;
                for h in 0..MAX_HARMONICS {
                    amp[h] += alpha * (target[h] - amp[h]);
                    let (c, sn) = rot[h];
                    let nc = ph_c[h] * c - ph_s[h] * sn;
                    ph_s[h] = ph_c[h] * sn + ph_s[h] * c;
                    ph_c[h] = nc;
                    s += amp[h] * ph_s[h];
                }
                wave.push(s as f32);
            }
            k += 1;
        }
    }
    Rendered {
        waveform: wave,
        phonemes,
        durations,
        word_map,
    }
}

/// Deterministic corpus of `documents_per_speaker` documents per speaker.
/// Every document has a hidden topic. Its marker word shows up in about
/// half the sentences and shifts pitch and energy for the whole document.
pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec, seed: u64) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let lexicon = Lexicon::new(spec, seed);
    let mut text_rng = derived_rng(seed, "text");
    let mut prosody_rng = derived_rng(seed, "prosody");
    let mut utterances = Vec::new();
    let mut truth = Vec::new();
    for voice in &spec.speakers {
        for d in 0..spec.documents_per_speaker {
            let topic = text_rng.random_range(0..spec.n_topics.max(1));
            let doc_id = format!("{}-d{d:03}", voice.name);
            for s in 0..spec.sentences_per_document {
                let n = text_rng.random_range(spec.sentence_words.0..=spec.sentence_words.1);
                let mut words: Vec<usize> = (0..n)
                    .map(|_| text_rng.random_range(spec.n_topics..spec.vocab_size))
                    .collect();
                if spec.n_topics > 0 && text_rng.random_bool(0.5) {
                    let at = text_rng.random_range(0..n);
                    words[at] = topic;
                }
                let prosody = sentence_prosody(spec, &lexicon, &words, topic, &mut prosody_rng);
                let r = render(spec, &lexicon, voice, &prosody);
                utterances.push(Utterance {
                    id: format!("{doc_id}-s{s:02}"),
                    waveform: r.waveform,
                    text: words.iter().map(|&w| word_token(w)).collect::<Vec<_>>().join(" "),
                    speaker: voice.name.clone(),
                    phonemes: r.phonemes,
                    durations: r.durations,
                    word_map: r.word_map,
                    split: None,
                    document: Some(doc_id.clone()),
                    sentence: s,
                });
                truth.push(prosody);
            }
        }
    }
    let mut corpus = Corpus::new(utterances);
    corpus.assign_splits(seed);
    Ok(SyntheticCorpus {
        corpus,
        truth,
        lexicon,
        spec: spec.clone(),
    })
}
