//! Rating records and the append-only NDJSON store.

use crate::config::{Criterion, SCALE_MAX};
use serde::{Deserialize, Serialize};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("record store {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("record store {path} line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatingRecord {
    pub participant_id: String,
    pub criterion: Criterion,
    pub sequence_id: String,
    pub condition: String,
    pub score: u32,
    pub page_index: usize,
    /// On-screen slot the video occupied.
    pub position: usize,
    pub timestamp_ms: u64,
}

/// Append-only newline-delimited JSON file. Appends are serialized by a
/// mutex and each page is written with a single `write_all`.
#[derive(Debug)]
pub struct RecordStore {
    path: PathBuf,
    file: Mutex<File>,
}

impl RecordStore {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let path = path.into();
        let io = |source| StoreError::Io {
            path: path.clone(),
            source,
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io)?;
        Ok(Self {
            path,
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, records: &[RatingRecord]) -> Result<(), StoreError> {
        let mut buf = Vec::new();
        for r in records {
            serde_json::to_writer(&mut buf, r).expect("records always serialize");
            buf.push(b'\n');
        }
        let mut file = self.file.lock().unwrap_or_else(|e| e.into_inner());
        file.write_all(&buf)
            .and_then(|_| file.sync_data())
            .map_err(|source| StoreError::Io {
                path: self.path.clone(),
                source,
            })
    }

    /// Reads every record while holding the append lock, so the snapshot
    /// never contains half a page.
    pub fn snapshot(&self) -> Result<Vec<RatingRecord>, StoreError> {
        let _guard = self.file.lock().unwrap_or_else(|e| e.into_inner());
        read_records(&self.path)
    }
}

pub fn read_records(path: &Path) -> Result<Vec<RatingRecord>, StoreError> {
    let file = File::open(path).map_err(|source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| StoreError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: RatingRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if rec.score > SCALE_MAX {
            return Err(parse_err(format!("score {} above {SCALE_MAX}", rec.score)));
        }
        out.push(rec);
    }
    Ok(out)
}
