//! Objective metrics: per-feature DTW against ground truth, mean absolute
//! acceleration and jerk, and condition reports.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::ArrayView2;
use thiserror::Error;

use crate::domain::{BehaviorTrack, GAZE_DIR_LEFT, GAZE_DIR_RIGHT, HEAD_ROTATION};
use crate::par;

/// Name of the ground-truth column in reports.
pub const GROUND_TRUTH: &str = "GTS";

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("DTW needs non-empty sequences")]
    EmptySequence,
    #[error("feature dimensions differ: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("motion stats need at least 4 frames, got {0}")]
    TooShort(usize),
    #[error("frame rate must be positive, got {0}")]
    FrameRate(f64),
    #[error("condition {condition} is missing clips: {}", missing.join(", "))]
    MissingClips {
        condition: String,
        missing: Vec<String>,
    },
    #[error("condition {condition} has clips absent from ground truth: {}", extra.join(", "))]
    ExtraClips {
        condition: String,
        extra: Vec<String>,
    },
    #[error("no ground-truth clips")]
    NoClips,
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Minimal cumulative |a_i − b_j| over monotone alignment paths with
/// match, insertion and deletion steps.
pub fn dtw_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::EmptySequence);
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for &ai in a {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let best = prev[j - 1].min(prev[j]).min(cur[j - 1]);
            cur[j] = (ai - b[j - 1]).abs() + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

/// DTW per column, averaged over columns.
pub fn dtw_matrix(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(EvalError::Dimension(a.ncols(), b.ncols()));
    }
    if a.ncols() == 0 {
        return Err(EvalError::EmptySequence);
    }
    let mut total = 0.0;
    for c in 0..a.ncols() {
        total += dtw_distance(&a.column(c).to_vec(), &b.column(c).to_vec())?;
    }
    Ok(total / a.ncols() as f64)
}

pub fn dtw_track(a: &BehaviorTrack, b: &BehaviorTrack) -> Result<f64> {
    dtw_matrix(a.frames().view(), b.frames().view())
}

/// Central second difference at interior frames, scaled to units per s².
pub fn acceleration_series(x: &[f64], fps: f64) -> Vec<f64> {
    x.windows(3)
        .map(|w| ((w[2] - w[1]) - (w[1] - w[0])) * fps * fps)
        .collect()
}

/// Four-point third difference, scaled to units per s³.
pub fn jerk_series(x: &[f64], fps: f64) -> Vec<f64> {
    x.windows(4)
        .map(|w| ((w[3] - w[0]) - 3.0 * (w[2] - w[1])) * fps * fps * fps)
        .collect()
}

fn mean_abs(x: &[f64]) -> f64 {
    x.iter().map(|v| v.abs()).sum::<f64>() / x.len() as f64
}

/// Mean absolute acceleration and jerk of a track.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionStats {
    pub acceleration: f64,
    pub jerk: f64,
}

/// Columns entering motion statistics: both gaze direction vectors and head rotation.
pub fn motion_channels() -> impl Iterator<Item = usize> {
    GAZE_DIR_LEFT.chain(GAZE_DIR_RIGHT).chain(HEAD_ROTATION)
}

/// Motion statistics over an arbitrary frame matrix sampled at `fps`.
pub fn motion_stats_matrix(frames: ArrayView2<'_, f64>, fps: f64) -> Result<MotionStats> {
    if !(fps.is_finite() && fps > 0.0) {
        return Err(EvalError::FrameRate(fps));
    }
    if frames.nrows() < 4 {
        return Err(EvalError::TooShort(frames.nrows()));
    }
    let (mut acc, mut jerk, mut n) = (0.0, 0.0, 0);
    for c in motion_channels() {
        let x = frames.column(c).to_vec();
        acc += mean_abs(&acceleration_series(&x, fps));
        jerk += mean_abs(&jerk_series(&x, fps));
        n += 1;
    }
    Ok(MotionStats {
        acceleration: acc / n as f64,
        jerk: jerk / n as f64,
    })
}

pub fn motion_stats(track: &BehaviorTrack) -> Result<MotionStats> {
    motion_stats_matrix(track.frames().view(), track.frame_rate())
}

/// Sample mean and sample standard deviation (n − 1 denominator; 0 for one sample).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn from_samples(x: &[f64]) -> Self {
        let n = x.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        let mean = x.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n }
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3} ({:.3})", self.mean, self.std)
    }
}

/// Metrics of one report column. Ground truth has no DTW entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportColumn {
    pub name: String,
    pub dtw: Option<MeanStd>,
    pub acceleration: MeanStd,
    pub jerk: MeanStd,
}

/// Ground truth first, then conditions in the order given.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub columns: Vec<ReportColumn>,
    pub clips: usize,
}

fn check_clip_ids(
    name: &str,
    truth: &BTreeMap<String, BehaviorTrack>,
    cond: &BTreeMap<String, BehaviorTrack>,
) -> Result<()> {
    let missing: Vec<String> = truth.keys().filter(|k| !cond.contains_key(*k)).cloned().collect();
    if !missing.is_empty() {
        return Err(EvalError::MissingClips {
            condition: name.to_string(),
            missing,
        });
    }
    let extra: Vec<String> = cond.keys().filter(|k| !truth.contains_key(*k)).cloned().collect();
    if !extra.is_empty() {
        return Err(EvalError::ExtraClips {
            condition: name.to_string(),
            extra,
        });
    }
    Ok(())
}

fn motion_column(name: &str, tracks: &[&BehaviorTrack], dtw: Option<MeanStd>) -> Result<ReportColumn> {
    let stats = par::try_map_slice(tracks, |t| motion_stats(t))?;
    let acc: Vec<f64> = stats.iter().map(|s| s.acceleration).collect();
    let jerk: Vec<f64> = stats.iter().map(|s| s.jerk).collect();
    Ok(ReportColumn {
        name: name.to_string(),
        dtw,
        acceleration: MeanStd::from_samples(&acc),
        jerk: MeanStd::from_samples(&jerk),
    })
}

/// Scores every condition against ground truth on the same clip ids.
pub fn build_report(
    ground_truth: &BTreeMap<String, BehaviorTrack>,
    conditions: &[(String, BTreeMap<String, BehaviorTrack>)],
) -> Result<MetricReport> {
    if ground_truth.is_empty() {
        return Err(EvalError::NoClips);
    }
    let truth: Vec<&BehaviorTrack> = ground_truth.values().collect();
    let mut columns = vec![motion_column(GROUND_TRUTH, &truth, None)?];
    for (name, tracks) in conditions {
        check_clip_ids(name, ground_truth, tracks)?;
        let gen: Vec<&BehaviorTrack> = tracks.values().collect();
        let pairs: Vec<(&BehaviorTrack, &BehaviorTrack)> =
            gen.iter().copied().zip(truth.iter().copied()).collect();
        let dtw = par::try_map_slice(&pairs, |(g, t)| dtw_track(g, t))?;
        columns.push(motion_column(name, &gen, Some(MeanStd::from_samples(&dtw)))?);
    }
    Ok(MetricReport {
        columns,
        clips: ground_truth.len(),
    })
}

impl MetricReport {
    /// Tab-separated: one row per metric statistic, one column per condition.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("metric");
        for c in &self.columns {
            out.push('\t');
            out.push_str(&c.name);
        }
        out.push('\n');
        type Getter = fn(&ReportColumn) -> Option<MeanStd>;
        let rows: [(&str, Getter); 3] = [
            ("dtw", |c| c.dtw),
            ("acceleration", |c| Some(c.acceleration)),
            ("jerk", |c| Some(c.jerk)),
        ];
        for (name, get) in rows {
            for (stat, pick) in [("mean", true), ("std", false)] {
                out.push_str(&format!("{name}_{stat}"));
                for c in &self.columns {
                    match get(c) {
                        Some(ms) => out.push_str(&format!("\t{}", if pick { ms.mean } else { ms.std })),
                        None => out.push_str("\t-"),
                    }
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn column(&self, name: &str) -> Option<&ReportColumn> {
        self.columns.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = 22;
        write!(f, "{:<14}", "")?;
        for c in &self.columns {
            write!(f, "{:>width$}", c.name)?;
        }
        writeln!(f)?;
        let cell = |ms: Option<MeanStd>| ms.map_or_else(|| "-".to_string(), |m| m.to_string());
        for (label, pick) in [
            ("DTW", &(|c: &ReportColumn| c.dtw) as &dyn Fn(&ReportColumn) -> Option<MeanStd>),
            ("Acceleration", &|c: &ReportColumn| Some(c.acceleration)),
            ("Jerk", &|c: &ReportColumn| Some(c.jerk)),
        ] {
            write!(f, "{label:<14}")?;
            for c in &self.columns {
                write!(f, "{:>width$}", cell(pick(c)))?;
            }
            writeln!(f)?;
        }
        write!(f, "mean (std) over {} clips", self.clips)
    }
}
