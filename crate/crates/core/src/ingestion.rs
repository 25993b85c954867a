//! OpenFace / OpenSmile CSV ingestion and 25 fps alignment.
//!
//! Columns are looked up by header name, never by position. Behavior exports
//! follow OpenFace naming (`gaze_0_x`, `pose_Rx`, `AU45_r`, ...); speech
//! exports follow eGeMAPS low-level-descriptor naming, with or without the
//! `_sma3` / `_sma3nz` suffixes openSMILE appends.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    BehaviorTrack, DomainError, SpeakerRole, SpeechTrack, Track, BEHAVIOR_DIM,
    BEHAVIOR_FEATURES, FRAME_RATE, SPEECH_BASE_DIM, SPEECH_BASE_FEATURES, SPEECH_DIM,
    SPEECH_FEATURES,
};

/// Slack used when comparing frame timestamps against turn boundaries.
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column {0}")]
    MissingColumn(String),
    #[error("row {row}, column {column}: cannot parse {value:?}")]
    BadCell {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: timestamp {timestamp} goes backwards")]
    NonMonotonic { row: usize, timestamp: f64 },
    #[error("sequence too short for derivatives")]
    TooShortForDerivatives,
    #[error("need at least 2 rows to downsample, got {0}")]
    TooShortToDownsample(usize),
    #[error("turn [{start}, {end}) is empty or inverted")]
    InvalidTurn { start: f64, end: f64 },
    #[error("overlapping turns [{0}, {1}) and [{2}, {3})")]
    OverlappingTurns(f64, f64, f64, f64),
    #[error("speech has {speech} frames but behavior has {behavior}; more than one frame apart")]
    LengthMismatch { speech: usize, behavior: usize },
    #[error("{0}: raw speech export needs a turns file")]
    MissingTurns(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

pub type Result<T> = std::result::Result<T, IngestError>;

/// One OpenFace output row reduced to the tracked features.
#[derive(Debug, Clone, PartialEq)]
pub struct RawBehaviorRow {
    pub timestamp: f64,
    pub confidence: f64,
    pub success: bool,
    pub features: [f64; BEHAVIOR_DIM],
}

/// One openSMILE low-level-descriptor row (50 fps) with the seven kept features.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSpeechRow {
    pub timestamp: f64,
    pub features: [f64; SPEECH_BASE_DIM],
}

/// Base features followed by their first and second derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivedSpeechRow {
    pub timestamp: f64,
    pub values: [f64; 3 * SPEECH_BASE_DIM],
}

/// A speaking turn `[start, end)` in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TurnInterval {
    pub start: f64,
    pub end: f64,
}

/// Tracker quality for one behavior frame, kept for outlier detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameQuality {
    pub confidence: f64,
    pub success: bool,
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads all of `input` and guesses the delimiter from the header line
/// (openSMILE writes `;`, OpenFace writes `,`).
fn csv_reader(mut input: impl Read) -> Result<csv::Reader<std::io::Cursor<Vec<u8>>>> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf).map_err(|source| IngestError::Io {
        path: PathBuf::from("<input>"),
        source,
    })?;
    let header = buf.split(|&b| b == b'\n').next().unwrap_or(&[]);
    let delimiter = if !header.contains(&b',') && header.contains(&b';') {
        b';'
    } else {
        b','
    };
    Ok(csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .from_reader(std::io::Cursor::new(buf)))
}

struct Columns(HashMap<String, usize>);

impl Columns {
    fn new(headers: &csv::StringRecord) -> Self {
        Self(
            headers
                .iter()
                .enumerate()
                .map(|(i, h)| (h.trim().trim_matches('\'').to_string(), i))
                .collect(),
        )
    }

    fn require(&self, name: &str) -> Result<usize> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| IngestError::MissingColumn(name.to_string()))
    }

    fn first_of(&self, names: &[&str]) -> Result<usize> {
        names
            .iter()
            .find_map(|n| self.0.get(*n).copied())
            .ok_or_else(|| IngestError::MissingColumn(names[0].to_string()))
    }
}

fn cell(record: &csv::StringRecord, row: usize, idx: usize, name: &str) -> Result<f64> {
    let raw = record.get(idx).unwrap_or("");
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| IngestError::BadCell {
            row,
            column: name.to_string(),
            value: raw.to_string(),
        })
}

fn check_monotonic(row: usize, prev: &mut f64, ts: f64) -> Result<()> {
    if ts < *prev {
        return Err(IngestError::NonMonotonic { row, timestamp: ts });
    }
    *prev = ts;
    Ok(())
}

pub fn parse_openface_csv(path: impl AsRef<Path>) -> Result<Vec<RawBehaviorRow>> {
    parse_openface_reader(open(path.as_ref())?)
}

pub fn parse_openface_reader(input: impl Read) -> Result<Vec<RawBehaviorRow>> {
    let mut rdr = csv_reader(input)?;
    let cols = Columns::new(rdr.headers()?);
    let ts_col = cols.require("timestamp")?;
    let conf_col = cols.require("confidence")?;
    let success_col = cols.require("success")?;
    let feature_cols = BEHAVIOR_FEATURES
        .iter()
        .map(|n| cols.require(n))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let timestamp = cell(&record, row, ts_col, "timestamp")?;
        check_monotonic(row, &mut prev, timestamp)?;
        let confidence = cell(&record, row, conf_col, "confidence")?;
        let success = cell(&record, row, success_col, "success")? != 0.0;
        let mut features = [0.0; BEHAVIOR_DIM];
        for (j, (&c, name)) in feature_cols.iter().zip(BEHAVIOR_FEATURES).enumerate() {
            features[j] = cell(&record, row, c, name)?;
        }
        rows.push(RawBehaviorRow {
            timestamp,
            confidence,
            success,
            features,
        });
    }
    Ok(rows)
}

pub fn parse_opensmile_csv(path: impl AsRef<Path>) -> Result<Vec<RawSpeechRow>> {
    parse_opensmile_reader(open(path.as_ref())?)
}

pub fn parse_opensmile_reader(input: impl Read) -> Result<Vec<RawSpeechRow>> {
    let mut rdr = csv_reader(input)?;
    let cols = Columns::new(rdr.headers()?);
    let ts_col = cols.first_of(&["frameTime", "timestamp", "time"])?;
    let feature_cols = SPEECH_BASE_FEATURES
        .iter()
        .map(|n| {
            let candidates = [
                n.to_string(),
                format!("{n}_sma3"),
                format!("{n}_sma3nz"),
                format!("{n}_sma"),
            ];
            let refs: Vec<&str> = candidates.iter().map(String::as_str).collect();
            cols.first_of(&refs)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let timestamp = cell(&record, row, ts_col, "frameTime")?;
        check_monotonic(row, &mut prev, timestamp)?;
        let mut features = [0.0; SPEECH_BASE_DIM];
        for (j, (&c, name)) in feature_cols.iter().zip(SPEECH_BASE_FEATURES).enumerate() {
            features[j] = cell(&record, row, c, name)?;
        }
        rows.push(RawSpeechRow {
            timestamp,
            features,
        });
    }
    Ok(rows)
}

/// Turn annotations: a CSV with `start` and `end` columns in seconds.
pub fn parse_turns_csv(path: impl AsRef<Path>) -> Result<Vec<TurnInterval>> {
    parse_turns_reader(open(path.as_ref())?)
}

pub fn parse_turns_reader(input: impl Read) -> Result<Vec<TurnInterval>> {
    let mut rdr = csv_reader(input)?;
    let cols = Columns::new(rdr.headers()?);
    let start_col = cols.require("start")?;
    let end_col = cols.require("end")?;
    let mut out = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        out.push(TurnInterval {
            start: cell(&record, row, start_col, "start")?,
            end: cell(&record, row, end_col, "end")?,
        });
    }
    Ok(out)
}

/// Centered first difference with one-sided differences at both ends.
fn difference(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|t| match t {
            0 => x[1] - x[0],
            t if t == n - 1 => x[n - 1] - x[n - 2],
            t => (x[t + 1] - x[t - 1]) / 2.0,
        })
        .collect()
}

/// Appends first and second derivatives to each row. Length-preserving.
pub fn add_derivatives(rows: &[RawSpeechRow]) -> Result<Vec<DerivedSpeechRow>> {
    if rows.len() < 3 {
        return Err(IngestError::TooShortForDerivatives);
    }
    let mut out: Vec<DerivedSpeechRow> = rows
        .iter()
        .map(|r| {
            let mut values = [0.0; 3 * SPEECH_BASE_DIM];
            values[..SPEECH_BASE_DIM].copy_from_slice(&r.features);
            DerivedSpeechRow {
                timestamp: r.timestamp,
                values,
            }
        })
        .collect();
    for j in 0..SPEECH_BASE_DIM {
        let series: Vec<f64> = rows.iter().map(|r| r.features[j]).collect();
        let d1 = difference(&series);
        let d2 = difference(&d1);
        for (t, row) in out.iter_mut().enumerate() {
            row.values[SPEECH_BASE_DIM + j] = d1[t];
            row.values[2 * SPEECH_BASE_DIM + j] = d2[t];
        }
    }
    Ok(out)
}

/// 50 fps → 25 fps by averaging consecutive pairs; a trailing odd row is dropped.
pub fn downsample_speech(rows: &[DerivedSpeechRow]) -> Result<Vec<DerivedSpeechRow>> {
    if rows.len() < 2 {
        return Err(IngestError::TooShortToDownsample(rows.len()));
    }
    Ok(rows
        .chunks_exact(2)
        .map(|pair| {
            let mut values = [0.0; 3 * SPEECH_BASE_DIM];
            for (j, v) in values.iter_mut().enumerate() {
                *v = (pair[0].values[j] + pair[1].values[j]) / 2.0;
            }
            DerivedSpeechRow {
                timestamp: pair[0].timestamp,
                values,
            }
        })
        .collect())
}

/// Sorts turns and rejects inverted or overlapping intervals.
pub fn validate_turns(turns: &[TurnInterval]) -> Result<Vec<TurnInterval>> {
    let mut sorted = turns.to_vec();
    for t in &sorted {
        if !(t.end > t.start) {
            return Err(IngestError::InvalidTurn {
                start: t.start,
                end: t.end,
            });
        }
    }
    sorted.sort_by(|a, b| a.start.total_cmp(&b.start));
    for w in sorted.windows(2) {
        if w[1].start < w[0].end - TIME_EPS {
            return Err(IngestError::OverlappingTurns(
                w[0].start, w[0].end, w[1].start, w[1].end,
            ));
        }
    }
    Ok(sorted)
}

fn in_turns(turns: &[TurnInterval], t: f64) -> bool {
    turns
        .iter()
        .any(|iv| t >= iv.start - TIME_EPS && t < iv.end - TIME_EPS)
}

/// Adds the speaking flag: 1 exactly for frames whose timestamp lies in a turn.
pub fn attach_speaking_flag(
    speech: &[DerivedSpeechRow],
    turns: &[TurnInterval],
    source_id: &str,
    role: SpeakerRole,
) -> Result<SpeechTrack> {
    let turns = validate_turns(turns)?;
    let mut frames = Array2::zeros((speech.len(), SPEECH_DIM));
    for (t, row) in speech.iter().enumerate() {
        for (j, &v) in row.values.iter().enumerate() {
            frames[[t, j]] = v;
        }
        frames[[t, SPEECH_DIM - 1]] = if in_turns(&turns, row.timestamp) {
            1.0
        } else {
            0.0
        };
    }
    Ok(Track::new(frames, FRAME_RATE, source_id, role)?)
}

/// Full speech path: derivatives at 50 fps, pairwise downsampling, flag.
pub fn speech_track_from_rows(
    rows: &[RawSpeechRow],
    turns: &[TurnInterval],
    source_id: &str,
    role: SpeakerRole,
) -> Result<SpeechTrack> {
    let derived = add_derivatives(rows)?;
    let downsampled = downsample_speech(&derived)?;
    attach_speaking_flag(&downsampled, turns, source_id, role)
}

pub fn behavior_track_from_rows(
    rows: &[RawBehaviorRow],
    source_id: &str,
    role: SpeakerRole,
) -> Result<(BehaviorTrack, Vec<FrameQuality>)> {
    let mut frames = Array2::zeros((rows.len(), BEHAVIOR_DIM));
    for (t, r) in rows.iter().enumerate() {
        for (j, &v) in r.features.iter().enumerate() {
            frames[[t, j]] = v;
        }
    }
    let quality = rows
        .iter()
        .map(|r| FrameQuality {
            confidence: r.confidence,
            success: r.success,
        })
        .collect();
    Ok((Track::new(frames, FRAME_RATE, source_id, role)?, quality))
}

/// Truncates the longer track so both have the same length. Tracks that differ
/// by more than one frame are rejected.
pub fn align(
    speech: &SpeechTrack,
    behavior: &BehaviorTrack,
    quality: &[FrameQuality],
) -> Result<(SpeechTrack, BehaviorTrack, Vec<FrameQuality>)> {
    let (ns, nb) = (speech.len(), behavior.len());
    if ns.abs_diff(nb) > 1 {
        return Err(IngestError::LengthMismatch {
            speech: ns,
            behavior: nb,
        });
    }
    let n = ns.min(nb);
    Ok((
        speech.truncated(n),
        behavior.truncated(n),
        quality[..n.min(quality.len())].to_vec(),
    ))
}

/// An ingested source: aligned 25 fps tracks plus tracker quality.
#[derive(Debug, Clone)]
pub struct IngestedSource {
    pub speech: SpeechTrack,
    pub behavior: BehaviorTrack,
    pub quality: Vec<FrameQuality>,
}

pub fn ingest_files(
    behavior_csv: &Path,
    speech_csv: &Path,
    turns_csv: &Path,
    source_id: &str,
    role: SpeakerRole,
) -> Result<IngestedSource> {
    let behavior_rows = parse_openface_csv(behavior_csv)?;
    let speech_rows = parse_opensmile_csv(speech_csv)?;
    let turns = parse_turns_csv(turns_csv)?;
    let speech = speech_track_from_rows(&speech_rows, &turns, source_id, role)?;
    let (behavior, quality) = behavior_track_from_rows(&behavior_rows, source_id, role)?;
    let (speech, behavior, quality) = align(&speech, &behavior, &quality)?;
    Ok(IngestedSource {
        speech,
        behavior,
        quality,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes a behavior track as `timestamp[,confidence,success],<28 features>`.
/// With quality, the output is itself a valid OpenFace-style export.
pub fn write_behavior_csv(
    out: &mut impl Write,
    track: &BehaviorTrack,
    quality: Option<&[FrameQuality]>,
) -> std::io::Result<()> {
    let mut header = vec!["timestamp"];
    if quality.is_some() {
        header.extend(["confidence", "success"]);
    }
    header.extend(BEHAVIOR_FEATURES);
    writeln!(out, "{}", header.join(","))?;
    for (t, row) in track.frames().outer_iter().enumerate() {
        let mut line = format!("{}", t as f64 / track.frame_rate());
        if let Some(q) = quality {
            line.push_str(&format!(
                ",{},{}",
                q[t].confidence,
                if q[t].success { 1 } else { 0 }
            ));
        }
        for v in row {
            line.push_str(&format!(",{v}"));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Writes a speech track as `timestamp,<22 features>`.
pub fn write_speech_csv(out: &mut impl Write, track: &SpeechTrack) -> std::io::Result<()> {
    let mut header = vec!["timestamp"];
    header.extend(SPEECH_FEATURES);
    writeln!(out, "{}", header.join(","))?;
    for (t, row) in track.frames().outer_iter().enumerate() {
        let mut line = format!("{}", t as f64 / track.frame_rate());
        for v in row {
            line.push_str(&format!(",{v}"));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn save_behavior_csv(
    path: &Path,
    track: &BehaviorTrack,
    quality: Option<&[FrameQuality]>,
) -> Result<()> {
    let mut f = std::io::BufWriter::new(File::create(path).map_err(io_err(path))?);
    write_behavior_csv(&mut f, track, quality).map_err(io_err(path))?;
    f.flush().map_err(io_err(path))
}

pub fn save_speech_csv(path: &Path, track: &SpeechTrack) -> Result<()> {
    let mut f = std::io::BufWriter::new(File::create(path).map_err(io_err(path))?);
    write_speech_csv(&mut f, track).map_err(io_err(path))?;
    f.flush().map_err(io_err(path))
}

/// Reads a canonical 22-column speech CSV (as written by [`write_speech_csv`]).
pub fn read_speech_csv(
    path: impl AsRef<Path>,
    source_id: &str,
    role: SpeakerRole,
) -> Result<SpeechTrack> {
    read_speech_reader(open(path.as_ref())?, source_id, role)
}

pub fn read_speech_reader(
    input: impl Read,
    source_id: &str,
    role: SpeakerRole,
) -> Result<SpeechTrack> {
    let mut rdr = csv_reader(input)?;
    let cols = Columns::new(rdr.headers()?);
    let idx = SPEECH_FEATURES
        .iter()
        .map(|n| cols.require(n))
        .collect::<Result<Vec<_>>>()?;
    let mut data = Vec::new();
    let mut n = 0;
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        for (&c, name) in idx.iter().zip(SPEECH_FEATURES) {
            data.push(cell(&record, row, c, name)?);
        }
        n += 1;
    }
    let frames = Array2::from_shape_vec((n, SPEECH_DIM), data).expect("row-major fill");
    Ok(Track::new(frames, FRAME_RATE, source_id, role)?)
}

/// Whether a CSV header looks like the canonical speech layout (has a
/// `speaking` column) rather than a raw openSMILE export.
pub fn is_canonical_speech_csv(path: impl AsRef<Path>) -> Result<bool> {
    let path = path.as_ref();
    let mut first = String::new();
    BufReader::new(open(path)?)
        .read_line(&mut first)
        .map_err(io_err(path))?;
    Ok(first
        .split([',', ';'])
        .any(|h| h.trim() == SPEECH_FEATURES[SPEECH_DIM - 1]))
}

/// One source in a corpus manifest. Paths are relative to the manifest's
/// directory. `turns` may be empty when the speech file is already in the
/// canonical layout and carries its own speaking flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub source_id: String,
    pub role: SpeakerRole,
    pub behavior: PathBuf,
    pub speech: PathBuf,
    pub turns: Option<PathBuf>,
}

impl ManifestEntry {
    /// File stem shared by the files of this source.
    pub fn track_id(&self) -> String {
        format!("{}_{}", self.source_id, self.role)
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_reader(open(path)?);
    let mut out = Vec::new();
    for entry in rdr.deserialize() {
        out.push(entry?);
    }
    Ok(out)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(File::create(path).map_err(io_err(path))?);
    for e in entries {
        w.serialize(e)?;
    }
    w.flush().map_err(io_err(path))
}

/// Ingests one manifest entry, accepting either raw extractor exports or the
/// canonical layout written by [`save_sources`].
pub fn ingest_entry(base: &Path, entry: &ManifestEntry) -> Result<IngestedSource> {
    let speech_path = base.join(&entry.speech);
    let behavior_path = base.join(&entry.behavior);
    if is_canonical_speech_csv(&speech_path)? {
        let speech = read_speech_csv(&speech_path, &entry.source_id, entry.role)?;
        let rows = parse_openface_csv(&behavior_path)?;
        let (behavior, quality) = behavior_track_from_rows(&rows, &entry.source_id, entry.role)?;
        let (speech, behavior, quality) = align(&speech, &behavior, &quality)?;
        return Ok(IngestedSource {
            speech,
            behavior,
            quality,
        });
    }
    let turns = entry
        .turns
        .as_ref()
        .ok_or_else(|| IngestError::MissingTurns(entry.track_id()))?;
    ingest_files(
        &behavior_path,
        &speech_path,
        &base.join(turns),
        &entry.source_id,
        entry.role,
    )
}

/// Ingests every source listed in a manifest, in manifest order.
pub fn ingest_manifest(path: impl AsRef<Path>) -> Result<Vec<IngestedSource>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let entries = read_manifest(path)?;
    crate::par::try_map_slice(&entries, |e| ingest_entry(base, e))
}

/// Writes sources in canonical layout (`<dir>/tracks/*.csv`) plus
/// `<dir>/manifest.csv`, readable again with [`ingest_manifest`].
pub fn save_sources(dir: &Path, sources: &[IngestedSource]) -> Result<Vec<ManifestEntry>> {
    let tracks = dir.join("tracks");
    std::fs::create_dir_all(&tracks).map_err(io_err(&tracks))?;
    let mut entries = Vec::with_capacity(sources.len());
    for s in sources {
        let id = format!("{}_{}", s.speech.source_id(), s.speech.role());
        let speech = PathBuf::from("tracks").join(format!("{id}.speech.csv"));
        let behavior = PathBuf::from("tracks").join(format!("{id}.behavior.csv"));
        save_speech_csv(&dir.join(&speech), &s.speech)?;
        save_behavior_csv(&dir.join(&behavior), &s.behavior, Some(&s.quality))?;
        entries.push(ManifestEntry {
            source_id: s.speech.source_id().to_string(),
            role: s.speech.role(),
            behavior,
            speech,
            turns: None,
        });
    }
    write_manifest(dir.join("manifest.csv"), &entries)?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::SPEAKING;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn openface_header(skip: Option<&str>) -> Vec<String> {
        let mut h: Vec<String> = ["frame", "face_id", "timestamp", "confidence", "success"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        h.extend(["pose_Tx", "pose_Ty", "pose_Tz"].iter().map(|s| s.to_string()));
        h.extend(
            BEHAVIOR_FEATURES
                .iter()
                .filter(|n| Some(**n) != skip)
                .map(|s| s.to_string()),
        );
        h.push("AU28_c".into());
        h
    }

    fn openface_fixture(n: usize, skip: Option<&str>) -> String {
        let header = openface_header(skip);
        // OpenFace pads with a space after each comma.
        let mut s = header.join(", ");
        s.push('\n');
        for t in 0..n {
            let vals: Vec<String> = header
                .iter()
                .map(|h| match h.as_str() {
                    "frame" => format!("{}", t + 1),
                    "face_id" => "0".into(),
                    "timestamp" => format!("{}", t as f64 / 25.0),
                    "confidence" => "0.98".into(),
                    "success" => "1".into(),
                    name => {
                        let j = BEHAVIOR_FEATURES.iter().position(|n| n == &name);
                        match j {
                            Some(j) => format!("{}", (t * 100 + j) as f64 / 1000.0),
                            None => "7".into(),
                        }
                    }
                })
                .collect();
            s.push_str(&vals.join(", "));
            s.push('\n');
        }
        s
    }

    #[test]
    fn openface_three_rows_field_exact() {
        let rows = parse_openface_reader(openface_fixture(3, None).as_bytes()).unwrap();
        assert_eq!(rows.len(), 3);
        for (t, r) in rows.iter().enumerate() {
            assert_eq!(r.timestamp, t as f64 / 25.0);
            assert_eq!(r.confidence, 0.98);
            assert!(r.success);
            for j in 0..BEHAVIOR_DIM {
                assert_eq!(r.features[j], (t * 100 + j) as f64 / 1000.0);
            }
        }
    }

    #[test]
    fn openface_missing_au45_is_named() {
        let err = parse_openface_reader(openface_fixture(3, Some("AU45_r")).as_bytes()).unwrap_err();
        assert_eq!(err.to_string(), "missing column AU45_r");
    }

    #[test]
    fn openface_bad_cell_reports_row() {
        let fixture = openface_fixture(3, None);
        let mut lines: Vec<String> = fixture.lines().map(str::to_string).collect();
        lines[2] = lines[2].replacen("0.98", "oops", 1);
        let s = lines.join("\n");
        match parse_openface_reader(s.as_bytes()).unwrap_err() {
            IngestError::BadCell { row, column, .. } => {
                assert_eq!(row, 1);
                assert_eq!(column, "confidence");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn openface_250_rows_span_ten_seconds() {
        let rows = parse_openface_reader(openface_fixture(250, None).as_bytes()).unwrap();
        let span = rows.last().unwrap().timestamp - rows[0].timestamp;
        assert!((span - 249.0 / 25.0).abs() < 1e-12);
        assert!((span - 9.96).abs() < 1e-12);
    }

    fn egemaps_fixture(n: usize, order: &[&str]) -> String {
        let mut s = format!("name;frameTime;{}\n", order.join(";"));
        for t in 0..n {
            let vals: Vec<String> = order
                .iter()
                .enumerate()
                .map(|(j, _)| format!("{}", (t * 10 + j) as f64))
                .collect();
            s.push_str(&format!("'unknown';{};{}\n", t as f64 * 0.02, vals.join(";")));
        }
        s
    }

    const EGEMAPS_LLD: [&str; 20] = [
        "Loudness_sma3",
        "alphaRatio_sma3",
        "hammarbergIndex_sma3",
        "slope0-500_sma3",
        "slope500-1500_sma3",
        "spectralFlux_sma3",
        "mfcc1_sma3",
        "mfcc2_sma3",
        "mfcc3_sma3",
        "mfcc4_sma3",
        "F0semitoneFrom27.5Hz_sma3nz",
        "jitterLocal_sma3nz",
        "shimmerLocaldB_sma3nz",
        "HNRdBACF_sma3nz",
        "logRelF0-H1-H2_sma3nz",
        "logRelF0-H1-A3_sma3nz",
        "F1frequency_sma3nz",
        "F1bandwidth_sma3nz",
        "F1amplitudeLogRelF0_sma3nz",
        "F2frequency_sma3nz",
    ];

    #[test]
    fn opensmile_keeps_exactly_seven_in_canonical_order() {
        let rows = parse_opensmile_reader(egemaps_fixture(4, &EGEMAPS_LLD).as_bytes()).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].features.len(), 7);
        // positions of the kept features in the fixture
        let expected = [1.0, 2.0, 6.0, 7.0, 8.0, 10.0, 14.0];
        assert_eq!(rows[0].features, expected);
        assert_eq!(rows[2].timestamp, 0.04);
    }

    #[test]
    fn opensmile_order_independent_of_columns() {
        let mut reversed = EGEMAPS_LLD;
        reversed.reverse();
        let a = parse_opensmile_reader(egemaps_fixture(3, &EGEMAPS_LLD).as_bytes()).unwrap();
        let b = parse_opensmile_reader(egemaps_fixture(3, &reversed).as_bytes()).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            assert_eq!(ra.timestamp, rb.timestamp);
        }
        // values encode column position; canonical feature j must come from
        // the same named column in both files
        for j in 0..7 {
            let pos_a = a[0].features[j] as usize;
            let pos_b = b[0].features[j] as usize;
            assert_eq!(EGEMAPS_LLD[pos_a], reversed[pos_b]);
        }
    }

    #[test]
    fn opensmile_preserves_row_count() {
        let rows = parse_opensmile_reader(egemaps_fixture(500, &EGEMAPS_LLD).as_bytes()).unwrap();
        assert_eq!(rows.len(), 500);
    }

    #[test]
    fn opensmile_missing_feature() {
        let cols: Vec<&str> = EGEMAPS_LLD
            .iter()
            .copied()
            .filter(|c| !c.starts_with("mfcc2"))
            .collect();
        let err = parse_opensmile_reader(egemaps_fixture(2, &cols).as_bytes()).unwrap_err();
        assert_eq!(err.to_string(), "missing column mfcc2");
    }

    fn raw(series: &[[f64; 7]]) -> Vec<RawSpeechRow> {
        series
            .iter()
            .enumerate()
            .map(|(t, f)| RawSpeechRow {
                timestamp: t as f64 * 0.02,
                features: *f,
            })
            .collect()
    }

    #[test]
    fn derivatives_of_constant_are_zero() {
        let rows = raw(&[[3.0; 7]; 6]);
        let d = add_derivatives(&rows).unwrap();
        assert_eq!(d.len(), 6);
        assert!(d.iter().all(|r| r.values[7..].iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn derivatives_of_ramp() {
        let rows: Vec<[f64; 7]> = (0..8).map(|t| [t as f64; 7]).collect();
        let d = add_derivatives(&raw(&rows)).unwrap();
        for r in &d[1..7] {
            assert_eq!(r.values[7], 1.0);
        }
        for r in &d {
            assert_eq!(r.values[14], 0.0);
        }
    }

    #[test]
    fn derivatives_match_finite_difference_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<[f64; 7]> = (0..10)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect();
        let d = add_derivatives(&raw(&rows)).unwrap();
        for j in 0..7 {
            let x: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            // independent oracle: explicit stencil per position
            let mut d1 = vec![0.0; 10];
            d1[0] = x[1] - x[0];
            d1[9] = x[9] - x[8];
            for t in 1..9 {
                d1[t] = 0.5 * x[t + 1] - 0.5 * x[t - 1];
            }
            let mut d2 = vec![0.0; 10];
            d2[0] = d1[1] - d1[0];
            d2[9] = d1[9] - d1[8];
            for t in 1..9 {
                d2[t] = 0.5 * d1[t + 1] - 0.5 * d1[t - 1];
            }
            for t in 0..10 {
                assert!((d[t].values[7 + j] - d1[t]).abs() < 1e-12);
                assert!((d[t].values[14 + j] - d2[t]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn derivatives_need_three_rows() {
        let err = add_derivatives(&raw(&[[0.0; 7]; 2])).unwrap_err();
        assert_eq!(err.to_string(), "sequence too short for derivatives");
    }

    fn derived(values: &[f64]) -> Vec<DerivedSpeechRow> {
        values
            .iter()
            .enumerate()
            .map(|(t, &v)| DerivedSpeechRow {
                timestamp: t as f64 * 0.02,
                values: [v; 21],
            })
            .collect()
    }

    #[test]
    fn downsample_pairwise_mean() {
        let out = downsample_speech(&derived(&[1.0, 3.0, 5.0, 7.0])).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].values[0], 2.0);
        assert_eq!(out[1].values[0], 6.0);
        assert_eq!(out[1].timestamp, 0.04);
    }

    #[test]
    fn downsample_constant_and_odd_length() {
        let out = downsample_speech(&derived(&[4.0; 10])).unwrap();
        assert_eq!(out.len(), 5);
        assert!(out.iter().all(|r| r.values[3] == 4.0));
        assert_eq!(downsample_speech(&derived(&[1.0; 5])).unwrap().len(), 2);
        assert!(downsample_speech(&derived(&[1.0])).is_err());
    }

    fn frames_25(n: usize) -> Vec<DerivedSpeechRow> {
        (0..n)
            .map(|t| DerivedSpeechRow {
                timestamp: (2 * t) as f64 * 0.02,
                values: [0.0; 21],
            })
            .collect()
    }

    #[test]
    fn speaking_flag_half_track() {
        let turns = [TurnInterval {
            start: 0.0,
            end: 2.0,
        }];
        let track =
            attach_speaking_flag(&frames_25(100), &turns, "s", SpeakerRole::FirstPerson).unwrap();
        let flags: Vec<bool> = track.speaking().collect();
        assert!(flags[..50].iter().all(|&f| f));
        assert!(flags[50..].iter().all(|&f| !f));
        assert_eq!(track.frames().ncols(), 22);
    }

    #[test]
    fn speaking_flag_empty_and_full() {
        let none = attach_speaking_flag(&frames_25(100), &[], "s", SpeakerRole::FirstPerson).unwrap();
        assert!(none.frames().column(SPEAKING).iter().all(|&v| v == 0.0));
        let full = attach_speaking_flag(
            &frames_25(100),
            &[TurnInterval {
                start: 0.0,
                end: 4.0,
            }],
            "s",
            SpeakerRole::FirstPerson,
        )
        .unwrap();
        assert!(full.frames().column(SPEAKING).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn overlapping_turns_rejected_with_pair() {
        let turns = [
            TurnInterval {
                start: 1.0,
                end: 3.0,
            },
            TurnInterval {
                start: 0.0,
                end: 1.5,
            },
        ];
        let err = attach_speaking_flag(&frames_25(10), &turns, "s", SpeakerRole::FirstPerson)
            .unwrap_err();
        assert_eq!(err.to_string(), "overlapping turns [0, 1.5) and [1, 3)");
    }

    #[test]
    fn align_truncates_by_one_and_rejects_more() {
        let s: SpeechTrack =
            Track::new(Array2::zeros((101, 22)), 25.0, "a", SpeakerRole::FirstPerson).unwrap();
        let b: BehaviorTrack =
            Track::new(Array2::zeros((100, 28)), 25.0, "a", SpeakerRole::FirstPerson).unwrap();
        let q = vec![
            FrameQuality {
                confidence: 1.0,
                success: true
            };
            100
        ];
        let (s2, b2, q2) = align(&s, &b, &q).unwrap();
        assert_eq!((s2.len(), b2.len(), q2.len()), (100, 100, 100));
        let long = s.with_frames(Array2::zeros((103, 22))).unwrap();
        assert!(matches!(
            align(&long, &b, &q),
            Err(IngestError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn canonical_csv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut frames = Array2::from_shape_fn((12, 22), |_| rng.random_range(-5.0..5.0));
        frames
            .column_mut(SPEAKING)
            .mapv_inplace(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let track: SpeechTrack = Track::new(frames, 25.0, "x", SpeakerRole::SecondPerson).unwrap();
        let mut buf = Vec::new();
        write_speech_csv(&mut buf, &track).unwrap();
        let back = read_speech_reader(buf.as_slice(), "x", SpeakerRole::SecondPerson).unwrap();
        assert_eq!(back, track);

        let b: BehaviorTrack = Track::new(
            Array2::from_shape_fn((5, 28), |(t, j)| (t + j) as f64 / 7.0),
            25.0,
            "x",
            SpeakerRole::FirstPerson,
        )
        .unwrap();
        let q = vec![
            FrameQuality {
                confidence: 0.9,
                success: true
            };
            5
        ];
        let mut buf = Vec::new();
        write_behavior_csv(&mut buf, &b, Some(&q)).unwrap();
        let rows = parse_openface_reader(buf.as_slice()).unwrap();
        let (b2, q2) = behavior_track_from_rows(&rows, "x", SpeakerRole::FirstPerson).unwrap();
        assert_eq!(b2, b);
        assert_eq!(q2, q);
    }
}
