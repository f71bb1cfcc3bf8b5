use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Corpus, Split, Utterance};
use crate::dsp::wav::{read_wav, write_wav};
use crate::error::{Error, Result};

/// One manifest line. Audio paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub audio: String,
    pub text: String,
    pub speaker: String,
    /// Space-separated phoneme ids.
    pub phonemes: String,
    pub durations: Vec<usize>,
    pub word_map: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub document: Option<String>,
    #[serde(default)]
    pub sentence: usize,
}

fn record_err(index: usize, e: Error) -> Error {
    match e {
        Error::Validation { field, message } => Error::Record {
            index,
            message: format!("validation error in `{field}`: {message}"),
        },
        other => Error::Record {
            index,
            message: other.to_string(),
        },
    }
}

fn parse_record(rec: ManifestRecord, base: &Path, index: usize, sample_rate: u32, hop: usize) -> Result<Utterance> {
    let phonemes = rec
        .phonemes
        .split_whitespace()
        .map(|p| {
            p.parse::<usize>()
                .map_err(|_| Error::validation("phonemes", format!("`{p}` is not a phoneme id")))
        })
        .collect::<Result<Vec<_>>>()?;
    let audio_path = base.join(&rec.audio);
    let (waveform, sr) = read_wav(&audio_path)?;
    if sr != sample_rate {
        return Err(Error::validation(
            "audio",
            format!("{}: sample rate {sr}, expected {sample_rate}", audio_path.display()),
        ));
    }
    let split = rec.split.as_deref().map(str::parse).transpose()?;
    let u = Utterance {
        id: rec.id.unwrap_or_else(|| format!("{index:06}")),
        waveform,
        text: rec.text,
        speaker: rec.speaker,
        phonemes,
        durations: rec.durations,
        word_map: rec.word_map,
        split,
        document: rec.document,
        sentence: rec.sentence,
    };
    u.validate(hop)?;
    Ok(u)
}

/// Reads and validates a line-delimited JSON manifest. Errors carry the
/// zero-based record index.
pub fn load_manifest(path: &Path, sample_rate: u32, hop: usize) -> Result<Corpus> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut utterances = Vec::new();
    let mut index = 0;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| record_err(index, e.into()))?;
        utterances.push(parse_record(rec, &base, index, sample_rate, hop).map_err(|e| record_err(index, e))?);
        index += 1;
    }
    Ok(Corpus::new(utterances))
}

/// Writes one WAV per utterance under `dir/audio/` and the manifest at
/// `dir/manifest.jsonl`, returning the manifest path.
pub fn write_manifest(corpus: &Corpus, dir: &Path, sample_rate: u32) -> Result<PathBuf> {
    let audio_dir = dir.join("audio");
    fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
    let path = dir.join("manifest.jsonl");
    let mut out = Vec::new();
    for u in &corpus.utterances {
        let rel = format!("audio/{}.wav", u.id);
        write_wav(&dir.join(&rel), &u.waveform, sample_rate)?;
        let rec = ManifestRecord {
            id: Some(u.id.clone()),
            audio: rel,
            text: u.text.clone(),
            speaker: u.speaker.clone(),
            phonemes: u.phonemes.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(" "),
            durations: u.durations.clone(),
            word_map: u.word_map.clone(),
            split: u.split.map(|s| match s {
                Split::Train => "train".to_string(),
                Split::Valid => "valid".to_string(),
                Split::Test => "test".to_string(),
            }),
            document: u.document.clone(),
            sentence: u.sentence,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(&out).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(i: usize, map: Vec<usize>, text: &str) -> ManifestRecord {
        ManifestRecord {
            id: Some(format!("r{i}")),
            audio: format!("a{i}.wav"),
            text: text.into(),
            speaker: if i % 2 == 0 { "s0".into() } else { "s1".into() },
            phonemes: "3 4".into(),
            durations: vec![4, 4],
            word_map: map,
            split: None,
            document: None,
            sentence: 0,
        }
    }

    fn write(dir: &Path, recs: &[ManifestRecord]) -> PathBuf {
        let mut s = String::new();
        for r in recs {
            write_wav(&dir.join(&r.audio), &vec![0.2; 8 * 256], 24_000).unwrap();
            s.push_str(&serde_json::to_string(r).unwrap());
            s.push('\n');
        }
        let p = dir.join("m.jsonl");
        fs::write(&p, s).unwrap();
        p
    }

    #[test]
    fn ten_valid_records_load() {
        let dir = tempfile::tempdir().unwrap();
        let recs: Vec<_> = (0..10).map(|i| record(i, vec![0, 1], "a b")).collect();
        let c = load_manifest(&write(dir.path(), &recs), 24_000, 256).unwrap();
        assert_eq!(c.len(), 10);
        assert_eq!(c.utterances[3].phonemes, vec![3, 4]);
        assert_eq!(c.speakers(), vec!["s0", "s1"]);
    }

    #[test]
    fn skipped_word_is_a_validation_error_with_index() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![record(0, vec![0, 1], "a b"), record(1, vec![0, 2], "a b c")];
        let err = load_manifest(&write(dir.path(), &recs), 24_000, 256).unwrap_err();
        match err {
            Error::Record { index, message } => {
                assert_eq!(index, 1);
                assert!(message.contains("word_map"), "{message}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_audio_reports_record_index() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), &[record(0, vec![0, 1], "a b")]);
        let mut extra = record(1, vec![0, 1], "a b");
        extra.audio = "nope.wav".into();
        let mut s = fs::read_to_string(&p).unwrap();
        s.push_str(&serde_json::to_string(&extra).unwrap());
        fs::write(&p, s).unwrap();
        let err = load_manifest(&p, 24_000, 256).unwrap_err();
        assert!(matches!(err, Error::Record { index: 1, ref message } if message.contains("nope.wav")));
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let recs: Vec<_> = (0..3).map(|i| record(i, vec![0, 0], "a")).collect();
        let c = load_manifest(&write(dir.path(), &recs), 24_000, 256).unwrap();
        let out = tempfile::tempdir().unwrap();
        let p = write_manifest(&c, out.path(), 24_000).unwrap();
        let c2 = load_manifest(&p, 24_000, 256).unwrap();
        assert_eq!(c.utterances, c2.utterances);
    }
}
