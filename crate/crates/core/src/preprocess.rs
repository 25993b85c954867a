//! Behavior cleaning pipeline and segmentation into fixed-length clips.
//!
//! Stages run in a fixed order: outlier detection, transition bridging,
//! median smoothing, centering, listening clamp, segmentation. Every stage
//! except segmentation preserves track length.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    BehaviorTrack, DomainError, SpeakerRole, SpeechTrack, BEHAVIOR_DIM, BEHAVIOR_FEATURES,
    HEAD_ROTATION, SPEAKING, SPEECH_DIM, SPEECH_FEATURES,
};
use crate::ingestion::IngestedSource;
use crate::par;

/// Frames per clip: 4 s at 25 fps.
pub const CLIP_LEN: usize = 100;

/// Default median window.
pub const MEDIAN_WINDOW: usize = 7;

/// Columns shifted by centering: both gaze vectors, gaze angles, head rotation.
const POSE_COLUMNS: std::ops::Range<usize> = 0..HEAD_ROTATION.end;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("track unusable")]
    TrackUnusable,
    #[error("median window must be odd and at least 3, got {0}")]
    Window(usize),
    #[error("track has {len} frames, shorter than the median window {window}")]
    TooShortForWindow { len: usize, window: usize },
    #[error("behavior has {behavior} frames but speech has {speech}")]
    LengthMismatch { behavior: usize, speech: usize },
    #[error("quality has {quality} entries for {frames} frames")]
    QualityLength { quality: usize, frames: usize },
    #[error("invalid outlier policy: {0}")]
    Policy(String),
    #[error("segment length and stride must be positive")]
    SegmentLength,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{path}: unexpected header")]
    Header { path: PathBuf },
    #[error("{path}: row {row}: {reason}")]
    ClipFile {
        path: PathBuf,
        row: usize,
        reason: String,
    },
    #[error(transparent)]
    Domain(#[from] DomainError),
}

pub type Result<T> = std::result::Result<T, PreprocessError>;

/// Rules deciding which tracked frames are discarded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutlierPolicy {
    pub min_confidence: f64,
    /// Largest allowed change of any head-rotation component, radians per frame.
    pub max_rotation_jump: f64,
    pub require_success: bool,
}

impl Default for OutlierPolicy {
    fn default() -> Self {
        Self {
            min_confidence: 0.8,
            max_rotation_jump: 0.3,
            require_success: true,
        }
    }
}

impl OutlierPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_confidence > 0.0 && self.min_confidence <= 1.0) {
            return Err(PreprocessError::Policy(format!(
                "min_confidence {} not in (0, 1]",
                self.min_confidence
            )));
        }
        if !(self.max_rotation_jump > 0.0 && self.max_rotation_jump.is_finite()) {
            return Err(PreprocessError::Policy(format!(
                "max_rotation_jump {} must be positive",
                self.max_rotation_jump
            )));
        }
        Ok(())
    }
}

/// Stage toggles and parameters for [`preprocess_source`] and [`build_clips`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub outliers: OutlierPolicy,
    pub remove_outliers: bool,
    pub smooth: bool,
    pub median_window: usize,
    pub center: bool,
    pub clamp_listening: bool,
    pub segment_length: usize,
    /// Offset between consecutive clip starts; equal to `segment_length`
    /// for non-overlapping clips.
    pub stride: usize,
    /// Share of interactions held out for testing.
    pub test_fraction: f64,
    pub split_seed: u64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            outliers: OutlierPolicy::default(),
            remove_outliers: true,
            smooth: true,
            median_window: MEDIAN_WINDOW,
            center: true,
            clamp_listening: true,
            segment_length: CLIP_LEN,
            stride: CLIP_LEN,
            test_fraction: 0.2,
            split_seed: 0,
        }
    }
}

/// Aligned speech/behavior window, the training unit of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipPair {
    pub speech: Array2<f64>,
    pub behavior: Array2<f64>,
    pub source_id: String,
    pub role: SpeakerRole,
    pub start_frame: usize,
}

impl ClipPair {
    pub fn len(&self) -> usize {
        self.speech.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.speech.nrows() == 0
    }

    /// Share of frames whose speaking flag is 1.
    pub fn speaking_fraction(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let n = self.speech.column(SPEAKING).iter().filter(|&&v| v == 1.0).count();
        n as f64 / self.len() as f64
    }

    pub fn id(&self) -> String {
        format!("{}_{}_{:06}", self.source_id, self.role, self.start_frame)
    }
}

/// Frames to discard: failed tracking, low confidence, or a head-rotation
/// jump larger than the policy allows relative to the previous kept frame.
pub fn detect_outliers(
    track: &BehaviorTrack,
    quality: &[crate::ingestion::FrameQuality],
    policy: &OutlierPolicy,
) -> Result<BTreeSet<usize>> {
    if quality.len() != track.len() {
        return Err(PreprocessError::QualityLength {
            quality: quality.len(),
            frames: track.len(),
        });
    }
    let frames = track.frames();
    let mut out = BTreeSet::new();
    let mut last_kept: Option<usize> = None;
    for (t, q) in quality.iter().enumerate() {
        let bad_tracking =
            (policy.require_success && !q.success) || q.confidence < policy.min_confidence;
        let jumped = last_kept.is_some_and(|p| {
            HEAD_ROTATION
                .clone()
                .any(|c| (frames[[t, c]] - frames[[p, c]]).abs() > policy.max_rotation_jump)
        });
        if bad_tracking || jumped {
            out.insert(t);
        } else {
            last_kept = Some(t);
        }
    }
    Ok(out)
}

/// Replaces removed frames by per-feature linear interpolation between the
/// nearest kept neighbours; leading and trailing gaps copy the nearest kept frame.
pub fn bridge_transitions(track: &BehaviorTrack, removed: &BTreeSet<usize>) -> Result<BehaviorTrack> {
    let n = track.len();
    let kept: Vec<usize> = (0..n).filter(|t| !removed.contains(t)).collect();
    if kept.is_empty() {
        return Err(PreprocessError::TrackUnusable);
    }
    let src = track.frames();
    let mut out = src.clone();
    let first = kept[0];
    let last = kept[kept.len() - 1];
    for t in 0..first {
        out.row_mut(t).assign(&src.row(first));
    }
    for t in last + 1..n {
        out.row_mut(t).assign(&src.row(last));
    }
    for w in kept.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b - a < 2 {
            continue;
        }
        let span = (b - a) as f64;
        for t in a + 1..b {
            let u = (t - a) as f64 / span;
            for c in 0..src.ncols() {
                out[[t, c]] = src[[a, c]] + u * (src[[b, c]] - src[[a, c]]);
            }
        }
    }
    Ok(track.with_frames(out)?)
}

fn check_window(window: usize) -> Result<()> {
    if window < 3 || window % 2 == 0 {
        return Err(PreprocessError::Window(window));
    }
    Ok(())
}

fn median_of_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Sliding median over one series, keeping a sorted copy of the window.
/// Edge windows are truncated to the available frames.
fn sliding_median(x: &[f64], window: usize) -> Vec<f64> {
    let n = x.len();
    let half = window / 2;
    let mut buf: Vec<f64> = Vec::with_capacity(window);
    let insert = |buf: &mut Vec<f64>, v: f64| {
        let i = buf.partition_point(|&y| y.total_cmp(&v).is_lt());
        buf.insert(i, v);
    };
    for &v in &x[..half.min(n)] {
        insert(&mut buf, v);
    }
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        if t + half < n {
            insert(&mut buf, x[t + half]);
        }
        if t > half {
            let old = x[t - half - 1];
            let i = buf.partition_point(|&y| y.total_cmp(&old).is_lt());
            buf.remove(i);
        }
        out.push(median_of_sorted(&buf));
    }
    out
}

/// Per-feature sliding median with truncated windows at the edges.
pub fn median_smooth(track: &BehaviorTrack, window: usize) -> Result<BehaviorTrack> {
    check_window(window)?;
    if track.len() < window {
        return Err(PreprocessError::TooShortForWindow {
            len: track.len(),
            window,
        });
    }
    let mut out = track.frames().clone();
    for mut col in out.axis_iter_mut(Axis(1)) {
        let series = col.to_vec();
        for (dst, v) in col.iter_mut().zip(sliding_median(&series, window)) {
            *dst = v;
        }
    }
    Ok(track.with_frames(out)?)
}

/// Median of a series; the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    median_of_sorted(&v)
}

/// Subtracts the per-track median from gaze and head columns so the median
/// pose faces forward. Action units are left alone.
pub fn center_track(track: &BehaviorTrack) -> Result<BehaviorTrack> {
    let mut out = track.frames().clone();
    if out.nrows() == 0 {
        return Ok(track.clone());
    }
    for c in POSE_COLUMNS {
        let m = median(&out.column(c).to_vec());
        out.column_mut(c).mapv_inplace(|v| v - m);
    }
    Ok(track.with_frames(out)?)
}

/// Zeroes every behavior feature on frames where the speaking flag is 0.
pub fn clamp_listening(behavior: &BehaviorTrack, speech: &SpeechTrack) -> Result<BehaviorTrack> {
    if behavior.len() != speech.len() {
        return Err(PreprocessError::LengthMismatch {
            behavior: behavior.len(),
            speech: speech.len(),
        });
    }
    let mut out = behavior.frames().clone();
    for (mut row, speaking) in out.outer_iter_mut().zip(speech.speaking()) {
        if !speaking {
            row.fill(0.0);
        }
    }
    Ok(behavior.with_frames(out)?)
}

/// Cuts aligned tracks into windows of `length` frames starting every
/// `stride` frames. A trailing remainder shorter than `length` is dropped.
pub fn segment_with_stride(
    speech: &SpeechTrack,
    behavior: &BehaviorTrack,
    length: usize,
    stride: usize,
) -> Result<Vec<ClipPair>> {
    if length == 0 || stride == 0 {
        return Err(PreprocessError::SegmentLength);
    }
    if behavior.len() != speech.len() {
        return Err(PreprocessError::LengthMismatch {
            behavior: behavior.len(),
            speech: speech.len(),
        });
    }
    let n = speech.len();
    let mut out = Vec::new();
    let mut start = 0;
    while start + length <= n {
        out.push(ClipPair {
            speech: speech.frames().slice(s![start..start + length, ..]).to_owned(),
            behavior: behavior.frames().slice(s![start..start + length, ..]).to_owned(),
            source_id: speech.source_id().to_string(),
            role: speech.role(),
            start_frame: start,
        });
        start += stride;
    }
    Ok(out)
}

/// Non-overlapping windows of `length` frames.
pub fn segment(speech: &SpeechTrack, behavior: &BehaviorTrack, length: usize) -> Result<Vec<ClipPair>> {
    segment_with_stride(speech, behavior, length, length)
}

/// Runs the enabled cleaning stages on one ingested source.
pub fn preprocess_source(
    src: &IngestedSource,
    cfg: &PreprocessConfig,
) -> Result<(SpeechTrack, BehaviorTrack)> {
    let mut behavior = src.behavior.clone();
    if cfg.remove_outliers {
        cfg.outliers.validate()?;
        let removed = detect_outliers(&behavior, &src.quality, &cfg.outliers)?;
        if !removed.is_empty() {
            log::debug!(
                "{}_{}: bridging {} outlier frames",
                behavior.source_id(),
                behavior.role(),
                removed.len()
            );
            behavior = bridge_transitions(&behavior, &removed)?;
        }
    }
    if cfg.smooth {
        behavior = median_smooth(&behavior, cfg.median_window)?;
    }
    if cfg.center {
        behavior = center_track(&behavior)?;
    }
    if cfg.clamp_listening {
        behavior = clamp_listening(&behavior, &src.speech)?;
    }
    Ok((src.speech.clone(), behavior))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Assigns whole interactions to a split, so both speakers of one
/// interaction always land together. Deterministic in `seed`.
pub fn assign_splits<'a>(
    source_ids: impl IntoIterator<Item = &'a str>,
    test_fraction: f64,
    seed: u64,
) -> BTreeMap<String, Split> {
    let ids: BTreeSet<&str> = source_ids.into_iter().collect();
    let mut ids: Vec<&str> = ids.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n = ids.len();
    let mut n_test = (test_fraction.clamp(0.0, 1.0) * n as f64).round() as usize;
    if test_fraction > 0.0 && n > 1 {
        n_test = n_test.clamp(1, n - 1);
    }
    ids.iter()
        .enumerate()
        .map(|(i, id)| {
            let split = if i < n_test { Split::Test } else { Split::Train };
            (id.to_string(), split)
        })
        .collect()
}

/// A clip with its split assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub split: Split,
    pub pair: ClipPair,
}

/// Cleans every source, assigns splits per interaction and segments.
pub fn build_clips(sources: &[IngestedSource], cfg: &PreprocessConfig) -> Result<Vec<Clip>> {
    let splits = assign_splits(
        sources.iter().map(|s| s.speech.source_id()),
        cfg.test_fraction,
        cfg.split_seed,
    );
    let per_source = par::try_map_slice(sources, |src| {
        let (speech, behavior) = preprocess_source(src, cfg)?;
        let split = splits[speech.source_id()];
        let pairs = segment_with_stride(&speech, &behavior, cfg.segment_length, cfg.stride)?;
        Ok::<_, PreprocessError>(
            pairs
                .into_iter()
                .map(|pair| Clip { split, pair })
                .collect::<Vec<_>>(),
        )
    })?;
    Ok(per_source.into_iter().flatten().collect())
}

/// One line of a clip directory manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub source_id: String,
    pub role: SpeakerRole,
    pub split: Split,
    pub start_frame: usize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PreprocessError + '_ {
    move |source| PreprocessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_matrix(path: &Path, names: &[&str], m: ArrayView2<'_, f64>) -> Result<()> {
    let mut f = BufWriter::new(File::create(path).map_err(io_err(path))?);
    writeln!(f, "{}", names.join(",")).map_err(io_err(path))?;
    for row in m.outer_iter() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(f, "{}", line.join(",")).map_err(io_err(path))?;
    }
    f.flush().map_err(io_err(path))
}

fn read_matrix(path: &Path, names: &[&str]) -> Result<Array2<f64>> {
    let mut rdr = csv::Reader::from_reader(File::open(path).map_err(io_err(path))?);
    if rdr.headers()?.iter().ne(names.iter().copied()) {
        return Err(PreprocessError::Header {
            path: path.to_path_buf(),
        });
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != names.len() {
            return Err(PreprocessError::ClipFile {
                path: path.to_path_buf(),
                row,
                reason: format!("{} cells, expected {}", rec.len(), names.len()),
            });
        }
        for cell in rec.iter() {
            let v = cell.parse::<f64>().map_err(|e| PreprocessError::ClipFile {
                path: path.to_path_buf(),
                row,
                reason: e.to_string(),
            })?;
            data.push(v);
        }
        rows += 1;
    }
    Ok(Array2::from_shape_vec((rows, names.len()), data).expect("row-major fill"))
}

/// Writes clips as `<dir>/clips/<id>.{speech,behavior}.csv` plus
/// `<dir>/manifest.csv`.
pub fn save_clips(dir: &Path, clips: &[Clip]) -> Result<Vec<ClipRecord>> {
    let clip_dir = dir.join("clips");
    std::fs::create_dir_all(&clip_dir).map_err(io_err(&clip_dir))?;
    par::try_map_slice(clips, |c| {
        let id = c.pair.id();
        write_matrix(
            &clip_dir.join(format!("{id}.speech.csv")),
            &SPEECH_FEATURES,
            c.pair.speech.view(),
        )?;
        write_matrix(
            &clip_dir.join(format!("{id}.behavior.csv")),
            &BEHAVIOR_FEATURES,
            c.pair.behavior.view(),
        )
    })?;
    let records: Vec<ClipRecord> = clips
        .iter()
        .map(|c| ClipRecord {
            clip_id: c.pair.id(),
            source_id: c.pair.source_id.clone(),
            role: c.pair.role,
            split: c.split,
            start_frame: c.pair.start_frame,
        })
        .collect();
    let path = dir.join("manifest.csv");
    let mut w = csv::Writer::from_writer(File::create(&path).map_err(io_err(&path))?);
    for r in &records {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(records)
}

pub fn read_clip_manifest(dir: &Path) -> Result<Vec<ClipRecord>> {
    let path = dir.join("manifest.csv");
    let mut rdr = csv::Reader::from_reader(File::open(&path).map_err(io_err(&path))?);
    let mut out = Vec::new();
    for r in rdr.deserialize() {
        out.push(r?);
    }
    Ok(out)
}

/// Loads clips from a directory written by [`save_clips`], optionally
/// restricted to one split. Manifest order is preserved.
pub fn load_clips(dir: &Path, split: Option<Split>) -> Result<Vec<Clip>> {
    let records: Vec<ClipRecord> = read_clip_manifest(dir)?
        .into_iter()
        .filter(|r| split.is_none_or(|s| s == r.split))
        .collect();
    let clip_dir = dir.join("clips");
    par::try_map_slice(&records, |r| {
        let speech = read_matrix(
            &clip_dir.join(format!("{}.speech.csv", r.clip_id)),
            &SPEECH_FEATURES,
        )?;
        let behavior = read_matrix(
            &clip_dir.join(format!("{}.behavior.csv", r.clip_id)),
            &BEHAVIOR_FEATURES,
        )?;
        if speech.nrows() != behavior.nrows() {
            return Err(PreprocessError::LengthMismatch {
                behavior: behavior.nrows(),
                speech: speech.nrows(),
            });
        }
        debug_assert_eq!(speech.ncols(), SPEECH_DIM);
        debug_assert_eq!(behavior.ncols(), BEHAVIOR_DIM);
        Ok(Clip {
            split: r.split,
            pair: ClipPair {
                speech,
                behavior,
                source_id: r.source_id.clone(),
                role: r.role,
                start_frame: r.start_frame,
            },
        })
    })
}
