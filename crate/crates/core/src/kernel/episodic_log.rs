//! Append-only JSONL persistence for the episodic layer.
//!
//! One object per line: `{"seq":N,"time_ms":T,"key":"...","value_b64":"..."}`.
//! Lines are written in commit order, so `seq` is dense and strictly increasing.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodicLine {
    pub seq: u64,
    pub time_ms: u64,
    pub key: String,
    pub value_b64: String,
}

impl EpisodicLine {
    pub fn new(seq: u64, time_ms: u64, key: &[u8], value: &[u8]) -> Result<Self> {
        let key = std::str::from_utf8(key)
            .map_err(|_| Error::ReservedEpisodicKey(key.to_vec()))?
            .to_string();
        Ok(Self { seq, time_ms, key, value_b64: B64.encode(value) })
    }

    pub fn value(&self) -> Result<Vec<u8>> {
        B64.decode(&self.value_b64)
            .map_err(|e| Error::Parse { line: self.seq as usize, message: e.to_string() })
    }
}

pub(crate) struct EpisodicLogWriter {
    out: BufWriter<File>,
}

impl EpisodicLogWriter {
    pub(crate) fn create(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
        Ok(Self { out: BufWriter::new(file) })
    }

    pub(crate) fn append(&mut self, line: &EpisodicLine) -> Result<()> {
        serde_json::to_writer(&mut self.out, line).map_err(|e| Error::Io(e.to_string()))?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

/// Parses an episodic log, checking that sequence numbers are dense from 1.
pub fn read_episodic_log(path: &Path) -> Result<Vec<EpisodicLine>> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = Vec::new();
    for (idx, raw) in reader.lines().enumerate() {
        let raw = raw?;
        if raw.trim().is_empty() {
            continue;
        }
        let line: EpisodicLine = serde_json::from_str(&raw)
            .map_err(|e| Error::Parse { line: idx + 1, message: e.to_string() })?;
        let expected = lines.len() as u64 + 1;
        if line.seq != expected {
            return Err(Error::Parse {
                line: idx + 1,
                message: format!("expected seq {expected}, found {}", line.seq),
            });
        }
        lines.push(line);
    }
    Ok(lines)
}
