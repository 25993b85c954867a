//! Feature vocabulary, track containers and min-max normalization.
//!
//! Behavior frames carry 28 features (two gaze direction vectors, two gaze
//! angles, three head rotations, 17 action-unit intensities). Speech frames
//! carry 22 (seven eGeMAPS descriptors, their first and second derivatives,
//! and a binary speaking flag). Both are stored row-major in an
//! `Array2<f64>` with one row per frame.

use std::fmt;
use std::marker::PhantomData;
use std::ops::Range;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Frame rate of aligned tracks, frames per second.
pub const FRAME_RATE: f64 = 25.0;

pub const BEHAVIOR_DIM: usize = 28;
pub const SPEECH_DIM: usize = 22;
pub const SPEECH_BASE_DIM: usize = 7;
pub const AU_DIM: usize = 17;

pub const GAZE_DIR_LEFT: Range<usize> = 0..3;
pub const GAZE_DIR_RIGHT: Range<usize> = 3..6;
pub const GAZE_ANGLE: Range<usize> = 6..8;
pub const HEAD_ROTATION: Range<usize> = 8..11;
pub const AUS: Range<usize> = 11..28;

/// Feature groups produced by the three generator heads, in output order.
pub const GAZE_GROUP: Range<usize> = 0..8;
pub const HEAD_GROUP: Range<usize> = 8..11;
pub const AU_GROUP: Range<usize> = 11..28;

/// Column of the head pitch (`pose_Rx`) in a behavior row.
pub const HEAD_PITCH: usize = 8;
/// Column of the speaking flag in a speech row.
pub const SPEAKING: usize = 21;
/// Column of `F0semitoneFrom27.5Hz` in a speech row.
pub const PITCH: usize = 5;
/// Column of `mfcc1` in a speech row, used as an energy proxy.
pub const ENERGY: usize = 2;

/// Action units tracked, in column order.
pub const AU_CODES: [&str; AU_DIM] = [
    "AU01", "AU02", "AU04", "AU05", "AU06", "AU07", "AU09", "AU10", "AU12", "AU14", "AU15",
    "AU17", "AU20", "AU23", "AU25", "AU26", "AU45",
];

/// Canonical behavior column names (OpenFace naming).
pub const BEHAVIOR_FEATURES: [&str; BEHAVIOR_DIM] = [
    "gaze_0_x", "gaze_0_y", "gaze_0_z", "gaze_1_x", "gaze_1_y", "gaze_1_z", "gaze_angle_x",
    "gaze_angle_y", "pose_Rx", "pose_Ry", "pose_Rz", "AU01_r", "AU02_r", "AU04_r", "AU05_r",
    "AU06_r", "AU07_r", "AU09_r", "AU10_r", "AU12_r", "AU14_r", "AU15_r", "AU17_r", "AU20_r",
    "AU23_r", "AU25_r", "AU26_r", "AU45_r",
];

/// The seven retained eGeMAPS descriptors, in canonical order.
pub const SPEECH_BASE_FEATURES: [&str; SPEECH_BASE_DIM] = [
    "alphaRatio",
    "hammarbergIndex",
    "mfcc1",
    "mfcc2",
    "mfcc3",
    "F0semitoneFrom27.5Hz",
    "logRelF0-H1-H2",
];

/// Canonical speech column names.
pub const SPEECH_FEATURES: [&str; SPEECH_DIM] = [
    "alphaRatio",
    "hammarbergIndex",
    "mfcc1",
    "mfcc2",
    "mfcc3",
    "F0semitoneFrom27.5Hz",
    "logRelF0-H1-H2",
    "alphaRatio_delta",
    "hammarbergIndex_delta",
    "mfcc1_delta",
    "mfcc2_delta",
    "mfcc3_delta",
    "F0semitoneFrom27.5Hz_delta",
    "logRelF0-H1-H2_delta",
    "alphaRatio_delta2",
    "hammarbergIndex_delta2",
    "mfcc1_delta2",
    "mfcc2_delta2",
    "mfcc3_delta2",
    "F0semitoneFrom27.5Hz_delta2",
    "logRelF0-H1-H2_delta2",
    "speaking",
];

#[derive(Debug, Error, PartialEq)]
pub enum DomainError {
    #[error("{kind} frame needs {expected} features, got {got}")]
    Dimension {
        kind: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("frame rate must be positive and finite, got {0}")]
    FrameRate(f64),
    #[error("non-finite value in feature {feature}")]
    NonFiniteFeature { feature: &'static str },
    #[error("action unit {au} intensity {value} outside [0, 5]")]
    AuRange { au: &'static str, value: f64 },
    #[error("speaking flag must be 0 or 1, got {value} at frame {frame}")]
    SpeakingFlag { frame: usize, value: f64 },
    #[error("no training data")]
    NoTrainingData,
    #[error("non-finite {kind} value in track {track}, frame {frame}, feature {feature}")]
    NonFinite {
        kind: &'static str,
        track: usize,
        frame: usize,
        feature: &'static str,
    },
    #[error("norm stats line {line}: {reason}")]
    StatsFormat { line: usize, reason: String },
    #[error("unknown speaker role {0:?}")]
    Role(String),
}

/// One time step of facial behavior.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BehaviorFrame {
    pub gaze_dir_left: [f64; 3],
    pub gaze_dir_right: [f64; 3],
    pub gaze_angle: [f64; 2],
    pub head_rotation: [f64; 3],
    pub aus: [f64; AU_DIM],
}

impl BehaviorFrame {
    /// Builds a frame from a 28-value row, rejecting wrong lengths,
    /// non-finite values and AU intensities outside [0, 5].
    pub fn from_slice(values: &[f64]) -> Result<Self, DomainError> {
        if values.len() != BEHAVIOR_DIM {
            return Err(DomainError::Dimension {
                kind: "behavior",
                expected: BEHAVIOR_DIM,
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DomainError::NonFiniteFeature {
                feature: BEHAVIOR_FEATURES[i],
            });
        }
        for (i, &v) in values[AUS].iter().enumerate() {
            if !(0.0..=5.0).contains(&v) {
                return Err(DomainError::AuRange {
                    au: AU_CODES[i],
                    value: v,
                });
            }
        }
        Ok(Self::from_row_unchecked(values))
    }

    fn from_row_unchecked(v: &[f64]) -> Self {
        let mut f = Self::default();
        f.gaze_dir_left.copy_from_slice(&v[GAZE_DIR_LEFT]);
        f.gaze_dir_right.copy_from_slice(&v[GAZE_DIR_RIGHT]);
        f.gaze_angle.copy_from_slice(&v[GAZE_ANGLE]);
        f.head_rotation.copy_from_slice(&v[HEAD_ROTATION]);
        f.aus.copy_from_slice(&v[AUS]);
        f
    }

    pub fn to_array(&self) -> [f64; BEHAVIOR_DIM] {
        let mut out = [0.0; BEHAVIOR_DIM];
        out[GAZE_DIR_LEFT].copy_from_slice(&self.gaze_dir_left);
        out[GAZE_DIR_RIGHT].copy_from_slice(&self.gaze_dir_right);
        out[GAZE_ANGLE].copy_from_slice(&self.gaze_angle);
        out[HEAD_ROTATION].copy_from_slice(&self.head_rotation);
        out[AUS].copy_from_slice(&self.aus);
        out
    }
}

/// One time step of acoustic features.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SpeechFrame {
    pub base: [f64; SPEECH_BASE_DIM],
    pub delta: [f64; SPEECH_BASE_DIM],
    pub delta2: [f64; SPEECH_BASE_DIM],
    pub speaking: bool,
}

impl SpeechFrame {
    pub fn from_slice(values: &[f64]) -> Result<Self, DomainError> {
        if values.len() != SPEECH_DIM {
            return Err(DomainError::Dimension {
                kind: "speech",
                expected: SPEECH_DIM,
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DomainError::NonFiniteFeature {
                feature: SPEECH_FEATURES[i],
            });
        }
        let flag = values[SPEAKING];
        if flag != 0.0 && flag != 1.0 {
            return Err(DomainError::SpeakingFlag {
                frame: 0,
                value: flag,
            });
        }
        Ok(Self::from_row_unchecked(values))
    }

    fn from_row_unchecked(v: &[f64]) -> Self {
        let mut f = Self::default();
        f.base.copy_from_slice(&v[0..7]);
        f.delta.copy_from_slice(&v[7..14]);
        f.delta2.copy_from_slice(&v[14..21]);
        f.speaking = v[SPEAKING] == 1.0;
        f
    }

    pub fn to_array(&self) -> [f64; SPEECH_DIM] {
        let mut out = [0.0; SPEECH_DIM];
        out[0..7].copy_from_slice(&self.base);
        out[7..14].copy_from_slice(&self.delta);
        out[14..21].copy_from_slice(&self.delta2);
        out[SPEAKING] = if self.speaking { 1.0 } else { 0.0 };
        out
    }
}

/// Which side of a dyadic interaction a track records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeakerRole {
    FirstPerson,
    SecondPerson,
}

impl fmt::Display for SpeakerRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpeakerRole::FirstPerson => "first_person",
            SpeakerRole::SecondPerson => "second_person",
        })
    }
}

impl FromStr for SpeakerRole {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "first_person" => Ok(SpeakerRole::FirstPerson),
            "second_person" => Ok(SpeakerRole::SecondPerson),
            other => Err(DomainError::Role(other.to_string())),
        }
    }
}

/// Marker trait distinguishing behavior tracks from speech tracks.
pub trait FrameKind: fmt::Debug + Clone + Copy + Send + Sync + 'static {
    const DIM: usize;
    const NAME: &'static str;
    type Frame;

    fn feature_names() -> &'static [&'static str];
    fn ranges(stats: &NormStats) -> &[FeatureRange];
    fn frame_from_row(row: ArrayView1<'_, f64>) -> Self::Frame;

    /// Kind-specific row checks beyond dimensionality.
    fn check_rows(_frames: ArrayView2<'_, f64>) -> Result<(), DomainError> {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Behavior;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Speech;

impl FrameKind for Behavior {
    const DIM: usize = BEHAVIOR_DIM;
    const NAME: &'static str = "behavior";
    type Frame = BehaviorFrame;

    fn feature_names() -> &'static [&'static str] {
        &BEHAVIOR_FEATURES
    }

    fn ranges(stats: &NormStats) -> &[FeatureRange] {
        &stats.behavior
    }

    fn frame_from_row(row: ArrayView1<'_, f64>) -> BehaviorFrame {
        BehaviorFrame::from_row_unchecked(&row.to_vec())
    }
}

impl FrameKind for Speech {
    const DIM: usize = SPEECH_DIM;
    const NAME: &'static str = "speech";
    type Frame = SpeechFrame;

    fn feature_names() -> &'static [&'static str] {
        &SPEECH_FEATURES
    }

    fn ranges(stats: &NormStats) -> &[FeatureRange] {
        &stats.speech
    }

    fn frame_from_row(row: ArrayView1<'_, f64>) -> SpeechFrame {
        SpeechFrame::from_row_unchecked(&row.to_vec())
    }

    fn check_rows(frames: ArrayView2<'_, f64>) -> Result<(), DomainError> {
        for (t, &v) in frames.column(SPEAKING).iter().enumerate() {
            if v != 0.0 && v != 1.0 {
                return Err(DomainError::SpeakingFlag { frame: t, value: v });
            }
        }
        Ok(())
    }
}

/// A time series of frames of one kind.
#[derive(Debug, Clone, PartialEq)]
pub struct Track<K: FrameKind> {
    frames: Array2<f64>,
    frame_rate: f64,
    source_id: String,
    role: SpeakerRole,
    _kind: PhantomData<K>,
}

pub type BehaviorTrack = Track<Behavior>;
pub type SpeechTrack = Track<Speech>;

impl<K: FrameKind> Track<K> {
    pub fn new(
        frames: Array2<f64>,
        frame_rate: f64,
        source_id: impl Into<String>,
        role: SpeakerRole,
    ) -> Result<Self, DomainError> {
        if frames.ncols() != K::DIM {
            return Err(DomainError::Dimension {
                kind: K::NAME,
                expected: K::DIM,
                got: frames.ncols(),
            });
        }
        if !(frame_rate.is_finite() && frame_rate > 0.0) {
            return Err(DomainError::FrameRate(frame_rate));
        }
        K::check_rows(frames.view())?;
        Ok(Self {
            frames,
            frame_rate,
            source_id: source_id.into(),
            role,
            _kind: PhantomData,
        })
    }

    /// Same metadata, new frame matrix.
    pub fn with_frames(&self, frames: Array2<f64>) -> Result<Self, DomainError> {
        Self::new(frames, self.frame_rate, self.source_id.clone(), self.role)
    }

    pub fn frames(&self) -> &Array2<f64> {
        &self.frames
    }

    pub fn into_frames(self) -> Array2<f64> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn role(&self) -> SpeakerRole {
        self.role
    }

    pub fn frame(&self, t: usize) -> K::Frame {
        K::frame_from_row(self.frames.row(t))
    }

    /// Keeps the first `len` frames.
    pub fn truncated(&self, len: usize) -> Self {
        let len = len.min(self.len());
        Self {
            frames: self.frames.slice(ndarray::s![..len, ..]).to_owned(),
            frame_rate: self.frame_rate,
            source_id: self.source_id.clone(),
            role: self.role,
            _kind: PhantomData,
        }
    }

    /// Position of the first non-finite value as `(frame, feature)`.
    pub fn first_non_finite(&self) -> Option<(usize, usize)> {
        self.frames
            .indexed_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(ix, _)| ix)
    }
}

impl SpeechTrack {
    pub fn speaking(&self) -> impl Iterator<Item = bool> + '_ {
        self.frames.column(SPEAKING).into_iter().map(|&v| v == 1.0)
    }
}

/// Observed extrema of one feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureRange {
    pub min: f64,
    pub max: f64,
}

impl FeatureRange {
    fn empty() -> Self {
        Self {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        }
    }

    fn include(&mut self, v: f64) {
        self.min = self.min.min(v);
        self.max = self.max.max(v);
    }

    pub fn is_degenerate(&self) -> bool {
        self.max == self.min
    }

    pub fn normalize(&self, x: f64) -> f64 {
        if self.is_degenerate() {
            0.0
        } else {
            ((x - self.min) / (self.max - self.min)).clamp(0.0, 1.0)
        }
    }

    pub fn denormalize(&self, y: f64) -> f64 {
        if self.is_degenerate() {
            self.min
        } else {
            self.min + y.clamp(0.0, 1.0) * (self.max - self.min)
        }
    }
}

/// Per-feature minimum and maximum over the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub behavior: Vec<FeatureRange>,
    pub speech: Vec<FeatureRange>,
}

const DENORM_SLACK: f64 = 1e-6;

impl NormStats {
    /// Exact extrema over every frame of the given tracks.
    pub fn compute(speech: &[SpeechTrack], behavior: &[BehaviorTrack]) -> Result<Self, DomainError> {
        Self::from_matrices(
            speech.iter().map(|t| t.frames().view()),
            behavior.iter().map(|t| t.frames().view()),
        )
    }

    /// Extrema over raw frame matrices (speech: n×22, behavior: n×28).
    pub fn from_matrices<'a>(
        speech: impl IntoIterator<Item = ArrayView2<'a, f64>>,
        behavior: impl IntoIterator<Item = ArrayView2<'a, f64>>,
    ) -> Result<Self, DomainError> {
        let speech = scan::<Speech>(speech)?;
        let behavior = scan::<Behavior>(behavior)?;
        Ok(Self { behavior, speech })
    }

    pub fn ranges<K: FrameKind>(&self) -> &[FeatureRange] {
        K::ranges(self)
    }

    /// Maps each feature to `(x - min) / (max - min)`, clamped to [0, 1];
    /// degenerate features map to 0.
    pub fn normalize<K: FrameKind>(&self, track: &Track<K>) -> Track<K> {
        let frames = self.normalize_rows::<K>(track.frames().view());
        track
            .with_frames(frames)
            .expect("normalization preserves shape and flags")
    }

    pub fn normalize_rows<K: FrameKind>(&self, rows: ArrayView2<'_, f64>) -> Array2<f64> {
        let ranges = K::ranges(self);
        let mut out = rows.to_owned();
        for (mut col, r) in out.axis_iter_mut(Axis(1)).zip(ranges) {
            col.mapv_inplace(|x| r.normalize(x));
        }
        out
    }

    /// Inverse of [`normalize`](Self::normalize). Values outside [0, 1] by
    /// more than 1e-6 are reported with a warning and clamped first.
    pub fn denormalize<K: FrameKind>(&self, track: &Track<K>) -> Track<K> {
        let frames = self.denormalize_rows::<K>(track.frames().view());
        track
            .with_frames(frames)
            .expect("denormalization preserves shape and flags")
    }

    pub fn denormalize_rows<K: FrameKind>(&self, rows: ArrayView2<'_, f64>) -> Array2<f64> {
        let ranges = K::ranges(self);
        let out_of_range = rows
            .iter()
            .filter(|&&y| !(-DENORM_SLACK..=1.0 + DENORM_SLACK).contains(&y))
            .count();
        if out_of_range > 0 {
            log::warn!(
                "{out_of_range} {} values outside [0, 1] clamped before denormalization",
                K::NAME
            );
        }
        let mut out = rows.to_owned();
        for (mut col, r) in out.axis_iter_mut(Axis(1)).zip(ranges) {
            col.mapv_inplace(|y| r.denormalize(y));
        }
        out
    }

    /// Tab-separated `name min max` lines, behavior features first.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let rows = BEHAVIOR_FEATURES
            .iter()
            .zip(&self.behavior)
            .chain(SPEECH_FEATURES.iter().zip(&self.speech));
        for (name, r) in rows {
            out.push_str(&format!("{name}\t{}\t{}\n", r.min, r.max));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, DomainError> {
        let mut behavior = vec![None; BEHAVIOR_DIM];
        let mut speech = vec![None; SPEECH_DIM];
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let err = |reason: String| DomainError::StatsFormat {
                line: line_no,
                reason,
            };
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(err(format!("expected 3 fields, got {}", parts.len())));
            }
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| err(format!("bad number {s:?}: {e}")))
            };
            let range = FeatureRange {
                min: parse(parts[1])?,
                max: parse(parts[2])?,
            };
            if !(range.max >= range.min) {
                return Err(err(format!("max {} below min {}", range.max, range.min)));
            }
            let slot = if let Some(j) = BEHAVIOR_FEATURES.iter().position(|n| *n == parts[0]) {
                &mut behavior[j]
            } else if let Some(j) = SPEECH_FEATURES.iter().position(|n| *n == parts[0]) {
                &mut speech[j]
            } else {
                return Err(err(format!("unknown feature {:?}", parts[0])));
            };
            if slot.replace(range).is_some() {
                return Err(err(format!("duplicate feature {:?}", parts[0])));
            }
        }
        let collect = |v: Vec<Option<FeatureRange>>, names: &[&str]| {
            v.into_iter()
                .zip(names)
                .map(|(r, n)| {
                    r.ok_or_else(|| DomainError::StatsFormat {
                        line: 0,
                        reason: format!("missing feature {n:?}"),
                    })
                })
                .collect::<Result<Vec<_>, _>>()
        };
        Ok(Self {
            behavior: collect(behavior, &BEHAVIOR_FEATURES)?,
            speech: collect(speech, &SPEECH_FEATURES)?,
        })
    }
}

fn scan<'a, K: FrameKind>(
    mats: impl IntoIterator<Item = ArrayView2<'a, f64>>,
) -> Result<Vec<FeatureRange>, DomainError> {
    let mut ranges = vec![FeatureRange::empty(); K::DIM];
    let mut seen = 0usize;
    for (track, m) in mats.into_iter().enumerate() {
        if m.ncols() != K::DIM {
            return Err(DomainError::Dimension {
                kind: K::NAME,
                expected: K::DIM,
                got: m.ncols(),
            });
        }
        for (frame, row) in m.outer_iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(DomainError::NonFinite {
                        kind: K::NAME,
                        track,
                        frame,
                        feature: K::feature_names()[j],
                    });
                }
                ranges[j].include(v);
            }
            seen += 1;
        }
    }
    if seen == 0 {
        return Err(DomainError::NoTrainingData);
    }
    Ok(ranges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn behavior(frames: Array2<f64>) -> BehaviorTrack {
        Track::new(frames, FRAME_RATE, "t", SpeakerRole::FirstPerson).unwrap()
    }

    fn speech(frames: Array2<f64>) -> SpeechTrack {
        Track::new(frames, FRAME_RATE, "t", SpeakerRole::FirstPerson).unwrap()
    }

    fn random_pair(rng: &mut ChaCha8Rng, n: usize) -> (SpeechTrack, BehaviorTrack) {
        let mut s = Array::from_shape_fn((n, SPEECH_DIM), |_| rng.random_range(-3.0..3.0));
        s.column_mut(SPEAKING)
            .mapv_inplace(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let b = Array::from_shape_fn((n, BEHAVIOR_DIM), |_| rng.random_range(-1.0..4.0));
        (speech(s), behavior(b))
    }

    #[test]
    fn name_tables_have_expected_sizes_and_order() {
        assert_eq!(BEHAVIOR_FEATURES.len(), 28);
        assert_eq!(SPEECH_FEATURES.len(), 22);
        assert_eq!(BEHAVIOR_FEATURES[HEAD_PITCH], "pose_Rx");
        assert_eq!(SPEECH_FEATURES[PITCH], "F0semitoneFrom27.5Hz");
        assert_eq!(SPEECH_FEATURES[SPEAKING], "speaking");
        for (i, au) in AU_CODES.iter().enumerate() {
            assert_eq!(BEHAVIOR_FEATURES[AUS.start + i], format!("{au}_r"));
        }
    }

    #[test]
    fn frame_construction_enforces_dimensions() {
        assert!(matches!(
            BehaviorFrame::from_slice(&[0.0; 27]),
            Err(DomainError::Dimension { got: 27, .. })
        ));
        assert!(matches!(
            SpeechFrame::from_slice(&[0.0; 23]),
            Err(DomainError::Dimension { got: 23, .. })
        ));
        let mut row = [0.0; 28];
        row[AUS.start] = 5.5;
        assert!(matches!(
            BehaviorFrame::from_slice(&row),
            Err(DomainError::AuRange { au: "AU01", .. })
        ));
        let mut s = [0.0; 22];
        s[SPEAKING] = 0.5;
        assert!(SpeechFrame::from_slice(&s).is_err());
        s[SPEAKING] = 1.0;
        let f = SpeechFrame::from_slice(&s).unwrap();
        assert!(f.speaking);
        assert_eq!(f.to_array(), s);
    }

    #[test]
    fn behavior_frame_round_trips_through_array() {
        let row: Vec<f64> = (0..28).map(|i| (i as f64) * 0.1).collect();
        let f = BehaviorFrame::from_slice(&row).unwrap();
        assert_eq!(f.head_rotation, [0.8, 0.9, 1.0]);
        assert_eq!(f.to_array().to_vec(), row);
    }

    #[test]
    fn track_rejects_bad_shapes_and_rates() {
        let r: Result<BehaviorTrack, _> =
            Track::new(Array2::zeros((3, 27)), 25.0, "x", SpeakerRole::FirstPerson);
        assert!(r.is_err());
        let r: Result<BehaviorTrack, _> =
            Track::new(Array2::zeros((3, 28)), 0.0, "x", SpeakerRole::FirstPerson);
        assert_eq!(r.unwrap_err(), DomainError::FrameRate(0.0));
        let mut s = Array2::zeros((3, 22));
        s[[1, SPEAKING]] = 2.0;
        let r: Result<SpeechTrack, _> = Track::new(s, 25.0, "x", SpeakerRole::FirstPerson);
        assert_eq!(
            r.unwrap_err(),
            DomainError::SpeakingFlag {
                frame: 1,
                value: 2.0
            }
        );
    }

    #[test]
    fn stats_of_single_track_are_its_extrema() {
        let mut b = Array2::zeros((3, BEHAVIOR_DIM));
        b[[0, 4]] = 2.0;
        b[[1, 4]] = 6.0;
        b[[2, 4]] = 3.0;
        let s = Array2::zeros((3, SPEECH_DIM));
        let stats = NormStats::compute(&[speech(s)], &[behavior(b)]).unwrap();
        assert_eq!(stats.behavior[4], FeatureRange { min: 2.0, max: 6.0 });
    }

    #[test]
    fn stats_union_over_tracks() {
        let mut b1 = Array2::zeros((2, BEHAVIOR_DIM));
        b1[[0, 0]] = 0.0;
        b1[[1, 0]] = 1.0;
        let mut b2 = Array2::zeros((2, BEHAVIOR_DIM));
        b2[[0, 0]] = -1.0;
        b2[[1, 0]] = 2.0;
        let s = Array2::zeros((2, SPEECH_DIM));
        let stats = NormStats::compute(
            &[speech(s.clone()), speech(s)],
            &[behavior(b1), behavior(b2)],
        )
        .unwrap();
        assert_eq!(stats.behavior[0], FeatureRange { min: -1.0, max: 2.0 });
    }

    #[test]
    fn stats_match_direct_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (s, b) = random_pair(&mut rng, 100);
        let stats = NormStats::compute(&[s.clone()], &[b.clone()]).unwrap();
        for j in 0..BEHAVIOR_DIM {
            let mut lo = f64::MAX;
            let mut hi = f64::MIN;
            for t in 0..100 {
                let v = b.frames()[[t, j]];
                if v < lo {
                    lo = v;
                }
                if v > hi {
                    hi = v;
                }
            }
            assert_eq!(stats.behavior[j], FeatureRange { min: lo, max: hi });
        }
        for j in 0..SPEECH_DIM {
            let col: Vec<f64> = s.frames().column(j).to_vec();
            let lo = col.iter().cloned().fold(f64::MAX, f64::min);
            let hi = col.iter().cloned().fold(f64::MIN, f64::max);
            assert_eq!(stats.speech[j], FeatureRange { min: lo, max: hi });
        }
    }

    #[test]
    fn stats_errors() {
        assert_eq!(
            NormStats::compute(&[], &[]).unwrap_err(),
            DomainError::NoTrainingData
        );
        let mut b = Array2::zeros((4, BEHAVIOR_DIM));
        b[[2, 9]] = f64::NAN;
        let s = Array2::zeros((4, SPEECH_DIM));
        let ok = behavior(Array2::zeros((4, BEHAVIOR_DIM)));
        let err = NormStats::compute(&[speech(s.clone()), speech(s)], &[ok, behavior(b)])
            .unwrap_err();
        assert_eq!(
            err,
            DomainError::NonFinite {
                kind: "behavior",
                track: 1,
                frame: 2,
                feature: "pose_Ry"
            }
        );
    }

    #[test]
    fn normalize_endpoints_midpoint_and_degenerate() {
        let r = FeatureRange { min: -2.0, max: 6.0 };
        assert_eq!(r.normalize(-2.0), 0.0);
        assert_eq!(r.normalize(6.0), 1.0);
        assert_eq!(r.normalize(2.0), 0.5);
        let d = FeatureRange { min: 3.0, max: 3.0 };
        assert_eq!(d.normalize(3.0), 0.0);
        assert_eq!(d.denormalize(0.7), 3.0);
        assert_eq!(r.denormalize(0.0), -2.0);
        assert_eq!(r.denormalize(1.0), 6.0);
    }

    #[test]
    fn normalize_clamps_out_of_range_inputs() {
        let r = FeatureRange { min: 0.0, max: 2.0 };
        assert_eq!(r.normalize(5.0), 1.0);
        assert_eq!(r.normalize(-1.0), 0.0);
        assert_eq!(r.denormalize(1.5), 2.0);
    }

    #[test]
    fn constant_feature_normalizes_to_zero() {
        let b = behavior(Array2::from_elem((5, BEHAVIOR_DIM), 1.5));
        let s = speech(Array2::zeros((5, SPEECH_DIM)));
        let stats = NormStats::compute(&[s], &[b.clone()]).unwrap();
        let n = stats.normalize(&b);
        assert!(n.frames().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn round_trip_on_random_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (s, b) = random_pair(&mut rng, 1000);
        let stats = NormStats::compute(&[s.clone()], &[b.clone()]).unwrap();
        let back = stats.denormalize(&stats.normalize(&b));
        let err = (back.frames() - b.frames())
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-9, "max abs error {err}");
        let back = stats.denormalize(&stats.normalize(&s));
        let err = (back.frames() - s.frames())
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-9, "max abs error {err}");
    }

    #[test]
    fn text_format_round_trips_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (s, b) = random_pair(&mut rng, 20);
        let stats = NormStats::compute(&[s], &[b]).unwrap();
        let text = stats.to_text();
        assert_eq!(text.lines().count(), 50);
        assert!(text.starts_with("gaze_0_x\t"));
        assert_eq!(NormStats::from_text(&text).unwrap(), stats);
    }

    #[test]
    fn text_format_rejects_missing_and_unknown() {
        let stats = NormStats {
            behavior: vec![FeatureRange { min: 0.0, max: 1.0 }; 28],
            speech: vec![FeatureRange { min: 0.0, max: 1.0 }; 22],
        };
        let text = stats.to_text();
        let truncated: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
        assert!(NormStats::from_text(&truncated).is_err());
        let bogus = format!("{text}bogus\t0\t1\n");
        assert!(NormStats::from_text(&bogus).is_err());
        let inverted = text.replacen("gaze_0_x\t0\t1", "gaze_0_x\t2\t1", 1);
        assert!(NormStats::from_text(&inverted).is_err());
    }

    #[test]
    fn speaking_iterator_reads_flag_column() {
        let mut s = Array2::zeros((3, SPEECH_DIM));
        s[[1, SPEAKING]] = 1.0;
        let t = speech(s);
        assert_eq!(t.speaking().collect::<Vec<_>>(), vec![false, true, false]);
        assert!(!t.frame(0).speaking);
    }
}
