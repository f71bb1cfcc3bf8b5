//! Append-only JSONL experiment log.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{capture, StdRng};

use super::checkpoint::hex;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub stage: String,
    pub step: u64,
    /// Seconds since the stage started in this process.
    pub wall_time: f64,
    #[serde(default)]
    pub losses: BTreeMap<String, f64>,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub rng_digest: String,
}

/// Short digest of a generator's position.
pub fn rng_digest(rng: &StdRng) -> String {
    let state = serde_json::to_vec(&capture(rng)).expect("rng state serializes");
    hex(&Sha256::digest(&state)[..8])
}

/// One writer per file. Steps must increase within each stage.
#[derive(Debug)]
pub struct ExperimentLog {
    path: PathBuf,
    file: File,
    last: BTreeMap<String, u64>,
}

impl ExperimentLog {
    /// Opens `path` for appending, reading back the last step of every stage.
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let last = Self::read(path)?.into_iter().fold(BTreeMap::new(), |mut m, e| {
            m.insert(e.stage, e.step);
            m
        });
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_owned(),
            file,
            last,
        })
    }

    pub fn read(path: &Path) -> Result<Vec<LogEntry>> {
        if !path.exists() {
            return Ok(Vec::new());
        }
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| Error::Record {
                index: i,
                message: e.to_string(),
            })?);
        }
        Ok(out)
    }

    pub fn last_step(&self, stage: &str) -> Option<u64> {
        self.last.get(stage).copied()
    }

    pub fn append(&mut self, entry: &LogEntry) -> Result<()> {
        if let Some(last) = self.last_step(&entry.stage) {
            if entry.step <= last {
                return Err(Error::validation(
                    "step",
                    format!("{} step {} after step {last}", entry.stage, entry.step),
                ));
            }
        }
        let mut line = serde_json::to_string(entry)?;
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))?;
        self.last.insert(entry.stage.clone(), entry.step);
        Ok(())
    }
}
