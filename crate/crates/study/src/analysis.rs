//! Descriptive statistics and one-way repeated-measures ANOVA over ratings.
//!
//! Each participant's scores are first averaged over sequences, giving one
//! value per (participant, criterion, condition).

use crate::config::{Criterion, StudyConfig};
use crate::record::RatingRecord;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, StudentsT};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("incomplete design for {criterion}: missing (participant, condition) cells {missing:?}")]
    IncompleteDesign {
        criterion: Criterion,
        missing: Vec<(String, String)>,
    },
    #[error("{criterion}: need at least 2 participants and 2 conditions, got {participants} and {conditions}")]
    TooSmall {
        criterion: Criterion,
        participants: usize,
        conditions: usize,
    },
}

/// Sequences and conditions the analysis expects.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Design {
    pub sequences: Vec<String>,
    pub conditions: Vec<String>,
}

impl Design {
    pub fn from_config(cfg: &StudyConfig) -> Self {
        Self {
            sequences: cfg.sequences.clone(),
            conditions: cfg.conditions.clone(),
        }
    }

    /// Sorted ids seen in the records.
    pub fn infer(records: &[RatingRecord]) -> Self {
        let seqs: BTreeSet<_> = records.iter().map(|r| r.sequence_id.clone()).collect();
        let conds: BTreeSet<_> = records.iter().map(|r| r.condition.clone()).collect();
        Self {
            sequences: seqs.into_iter().collect(),
            conditions: conds.into_iter().collect(),
        }
    }

    pub fn cells_per_participant(&self) -> usize {
        Criterion::ORDER.len() * self.sequences.len() * self.conditions.len()
    }
}

/// Participants with exactly one record in every design cell.
pub fn complete_participants(records: &[RatingRecord], design: &Design) -> BTreeSet<String> {
    let mut cells: BTreeMap<&str, BTreeMap<(Criterion, &str, &str), usize>> = BTreeMap::new();
    for r in records {
        *cells
            .entry(&r.participant_id)
            .or_default()
            .entry((r.criterion, &r.sequence_id, &r.condition))
            .or_default() += 1;
    }
    cells
        .into_iter()
        .filter(|(_, c)| {
            Criterion::ORDER.iter().all(|&crit| {
                design.sequences.iter().all(|s| {
                    design
                        .conditions
                        .iter()
                        .all(|k| c.get(&(crit, s.as_str(), k.as_str())) == Some(&1))
                })
            })
        })
        .map(|(p, _)| p.to_string())
        .collect()
}

/// Mean over sequences per participant for one (criterion, condition).
pub fn participant_means(
    records: &[RatingRecord],
    criterion: Criterion,
    condition: &str,
) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in records
        .iter()
        .filter(|r| r.criterion == criterion && r.condition == condition)
    {
        let e = acc.entry(r.participant_id.clone()).or_default();
        e.0 += f64::from(r.score);
        e.1 += 1;
    }
    acc.into_iter().map(|(p, (s, n))| (p, s / n as f64)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub criterion: Criterion,
    pub condition: String,
    pub n_participants: usize,
    pub mean: Option<f64>,
    /// Sample standard deviation; `None` below two participants.
    pub std: Option<f64>,
    pub empty: bool,
}

fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (Some(mean), None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some(var.sqrt()))
}

pub fn descriptive_stats(records: &[RatingRecord], design: &Design) -> Vec<CellStats> {
    let mut out = Vec::new();
    for criterion in Criterion::ORDER {
        for condition in &design.conditions {
            let means: Vec<f64> = participant_means(records, criterion, condition)
                .into_values()
                .collect();
            let (mean, std) = mean_std(&means);
            out.push(CellStats {
                criterion,
                condition: condition.clone(),
                n_participants: means.len(),
                mean,
                std,
                empty: means.is_empty(),
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Significance {
    #[serde(rename = "n.s.")]
    NotSignificant,
    #[serde(rename = "p<.05")]
    P05,
    #[serde(rename = "p<.01")]
    P01,
}

impl Significance {
    pub fn from_p(p: f64) -> Self {
        if p < 0.01 {
            Significance::P01
        } else if p < 0.05 {
            Significance::P05
        } else {
            Significance::NotSignificant
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Significance::NotSignificant => "n.s.",
            Significance::P05 => "p<.05",
            Significance::P01 => "p<.01",
        }
    }
}

/// Paired comparison of two conditions; `mean_diff` is `b - a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseComparison {
    pub a: String,
    pub b: String,
    pub mean_diff: f64,
    /// `None` when every difference is identical (zero spread).
    pub t: Option<f64>,
    pub df: usize,
    pub p: f64,
    pub significance: Significance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    pub criterion: Criterion,
    pub conditions: Vec<String>,
    pub n_participants: usize,
    pub ss_conditions: f64,
    pub ss_subjects: f64,
    pub ss_error: f64,
    pub ss_total: f64,
    pub df_conditions: usize,
    pub df_error: usize,
    pub f: f64,
    pub p: f64,
    pub significance: Significance,
    pub pairwise: Vec<PairwiseComparison>,
}

/// Paired t-test on `b - a`. Zero spread with a non-zero mean difference is
/// an exact difference and gets p = 0.
pub fn paired_comparison(a_name: &str, a: &[f64], b_name: &str, b: &[f64]) -> PairwiseComparison {
    assert_eq!(a.len(), b.len(), "paired samples differ in length");
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let n = d.len();
    let (mean, sd) = mean_std(&d);
    let mean = mean.unwrap_or(0.0);
    let df = n.saturating_sub(1);
    let (t, p) = match sd {
        Some(sd) if sd > 1e-12 * mean.abs().max(1.0) => {
            let t = mean / (sd / (n as f64).sqrt());
            let dist = StudentsT::new(0.0, 1.0, df as f64).expect("df >= 1");
            (Some(t), (2.0 * dist.sf(t.abs())).min(1.0))
        }
        _ if mean.abs() > 1e-12 && n >= 2 => (None, 0.0),
        _ => (None, 1.0),
    };
    PairwiseComparison {
        a: a_name.to_string(),
        b: b_name.to_string(),
        mean_diff: mean,
        t,
        df,
        p,
        significance: Significance::from_p(p),
    }
}

/// One-way repeated-measures ANOVA over conditions with participants as
/// the repeated factor, plus all pairwise paired comparisons. No
/// sphericity correction is applied.
pub fn rm_anova(
    records: &[RatingRecord],
    criterion: Criterion,
    conditions: &[String],
) -> Result<AnovaResult, AnalysisError> {
    let per_cond: Vec<BTreeMap<String, f64>> = conditions
        .iter()
        .map(|c| participant_means(records, criterion, c))
        .collect();
    let participants: BTreeSet<String> = per_cond.iter().flat_map(|m| m.keys().cloned()).collect();
    let mut missing = Vec::new();
    for p in &participants {
        for (c, m) in conditions.iter().zip(&per_cond) {
            if !m.contains_key(p) {
                missing.push((p.clone(), c.clone()));
            }
        }
    }
    if !missing.is_empty() {
        return Err(AnalysisError::IncompleteDesign { criterion, missing });
    }
    let n = participants.len();
    let k = conditions.len();
    if n < 2 || k < 2 {
        return Err(AnalysisError::TooSmall {
            criterion,
            participants: n,
            conditions: k,
        });
    }
    // y[j][i]: condition j, participant i
    let y: Vec<Vec<f64>> = per_cond.iter().map(|m| m.values().copied().collect()).collect();
    let grand = y.iter().flatten().sum::<f64>() / (n * k) as f64;
    let cond_means: Vec<f64> = y.iter().map(|c| c.iter().sum::<f64>() / n as f64).collect();
    let subj_means: Vec<f64> = (0..n)
        .map(|i| y.iter().map(|c| c[i]).sum::<f64>() / k as f64)
        .collect();
    let ss_total: f64 = y.iter().flatten().map(|v| (v - grand).powi(2)).sum();
    let ss_conditions = n as f64 * cond_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_subjects = k as f64 * subj_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_error = (ss_total - ss_conditions - ss_subjects).max(0.0);
    let df_conditions = k - 1;
    let df_error = (k - 1) * (n - 1);
    let scale = ss_total.max(1.0);
    let (f, p) = if ss_conditions <= 1e-12 * scale {
        (0.0, 1.0)
    } else if ss_error <= 1e-12 * scale {
        (f64::INFINITY, 0.0)
    } else {
        let f = (ss_conditions / df_conditions as f64) / (ss_error / df_error as f64);
        let dist = FisherSnedecor::new(df_conditions as f64, df_error as f64).expect("df >= 1");
        (f, dist.sf(f))
    };
    let mut pairwise = Vec::new();
    for a in 0..k {
        for b in a + 1..k {
            pairwise.push(paired_comparison(&conditions[a], &y[a], &conditions[b], &y[b]));
        }
    }
    Ok(AnovaResult {
        criterion,
        conditions: conditions.to_vec(),
        n_participants: n,
        ss_conditions,
        ss_subjects,
        ss_error,
        ss_total,
        df_conditions,
        df_error,
        f,
        p,
        significance: Significance::from_p(p),
        pairwise,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaEntry {
    pub criterion: Criterion,
    pub result: Option<AnovaResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub participants_total: usize,
    pub participants_analyzed: usize,
    pub excluded_incomplete: Vec<String>,
    pub cells: Vec<CellStats>,
    pub anova: Vec<AnovaEntry>,
    pub note: String,
}

pub const SPHERICITY_NOTE: &str =
    "repeated-measures ANOVA without sphericity correction; pairwise paired t-tests uncorrected";

/// Full analysis. Participants without a complete set of ratings are
/// excluded unless `include_incomplete` is set.
pub fn analyze(records: &[RatingRecord], design: &Design, include_incomplete: bool) -> StudyReport {
    let all: BTreeSet<&str> = records.iter().map(|r| r.participant_id.as_str()).collect();
    let complete = complete_participants(records, design);
    let excluded: Vec<String> = if include_incomplete {
        Vec::new()
    } else {
        all.iter()
            .filter(|p| !complete.contains(**p))
            .map(|p| p.to_string())
            .collect()
    };
    let used: Vec<RatingRecord> = records
        .iter()
        .filter(|r| !excluded.contains(&r.participant_id))
        .cloned()
        .collect();
    let analyzed: BTreeSet<&str> = used.iter().map(|r| r.participant_id.as_str()).collect();
    let anova = Criterion::ORDER
        .iter()
        .map(|&c| match rm_anova(&used, c, &design.conditions) {
            Ok(r) => AnovaEntry {
                criterion: c,
                result: Some(r),
                error: None,
            },
            Err(e) => AnovaEntry {
                criterion: c,
                result: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    StudyReport {
        participants_total: all.len(),
        participants_analyzed: analyzed.len(),
        excluded_incomplete: excluded,
        cells: descriptive_stats(&used, design),
        anova,
        note: SPHERICITY_NOTE.to_string(),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
}

impl StudyReport {
    pub fn cell(&self, criterion: Criterion, condition: &str) -> Option<&CellStats> {
        self.cells
            .iter()
            .find(|c| c.criterion == criterion && c.condition == condition)
    }

    /// Plain-text table: one mean row and one std row per criterion.
    pub fn to_text(&self) -> String {
        let mut conds: Vec<&str> = Vec::new();
        for c in &self.cells {
            if !conds.contains(&c.condition.as_str()) {
                conds.push(&c.condition);
            }
        }
        let mut s = String::new();
        let _ = writeln!(
            s,
            "participants: {} analyzed of {} ({} incomplete excluded)",
            self.participants_analyzed,
            self.participants_total,
            self.excluded_incomplete.len()
        );
        let _ = write!(s, "{:<20}", "");
        for c in &conds {
            let _ = write!(s, "{c:>10}");
        }
        s.push('\n');
        for crit in [Criterion::Coordination, Criterion::Believability] {
            for (label, pick) in [("mean", true), ("std", false)] {
                let _ = write!(s, "{:<20}", format!("{crit} {label}"));
                for c in &conds {
                    let v = self.cell(crit, c).and_then(|x| if pick { x.mean } else { x.std });
                    let _ = write!(s, "{:>10}", fmt_opt(v));
                }
                s.push('\n');
            }
        }
        for e in &self.anova {
            match (&e.result, &e.error) {
                (Some(r), _) => {
                    let _ = writeln!(
                        s,
                        "{}: F({}, {}) = {:.3}, p = {:.4} ({})",
                        e.criterion,
                        r.df_conditions,
                        r.df_error,
                        r.f,
                        r.p,
                        r.significance.label()
                    );
                    for pw in &r.pairwise {
                        let _ = writeln!(
                            s,
                            "  {} vs {}: diff {:+.2}, p = {:.4} ({})",
                            pw.b,
                            pw.a,
                            pw.mean_diff,
                            pw.p,
                            pw.significance.label()
                        );
                    }
                }
                (None, err) => {
                    let _ = writeln!(s, "{}: {}", e.criterion, err.as_deref().unwrap_or("no result"));
                }
            }
        }
        let _ = writeln!(s, "note: {}", self.note);
        s
    }
}
