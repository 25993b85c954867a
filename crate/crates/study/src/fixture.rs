//! Synthetic rating sets with prescribed per-cell mean and standard
//! deviation, used to exercise the analysis on realistic numbers.

use crate::config::Criterion;
use crate::record::RatingRecord;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

/// Target (mean, std) per criterion and condition for the reference study:
/// 30 participants, conditions GTS, m1, m2, m3.
pub const REFERENCE_CONDITIONS: [&str; 4] = ["GTS", "m1", "m2", "m3"];
pub const REFERENCE_PARTICIPANTS: usize = 30;
pub const REFERENCE_COORDINATION: [(f64, f64); 4] =
    [(36.53, 19.67), (43.42, 19.04), (38.82, 18.69), (38.77, 20.91)];
pub const REFERENCE_BELIEVABILITY: [(f64, f64); 4] =
    [(47.60, 17.33), (45.39, 14.81), (58.74, 15.48), (39.02, 16.17)];

fn stats(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

fn cost(xs: &[f64], mean: f64, std: f64) -> f64 {
    let (m, s) = stats(xs);
    (m - mean).powi(2) + (s - std).powi(2)
}

/// `n` values on a `step` grid inside [0, 100] whose sample mean and std
/// approach the targets. Starts from normal quantiles, then greedily moves
/// single values or pairs by one grid step until no move helps.
pub fn grid_sample(n: usize, mean: f64, std: f64, step: f64) -> Vec<f64> {
    assert!(n >= 2, "need at least two values");
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let z: Vec<f64> = (0..n)
        .map(|i| normal.inverse_cdf((i as f64 + 0.5) / n as f64))
        .collect();
    let (_, zs) = stats(&z);
    let snap = |v: f64| ((v / step).round() * step).clamp(0.0, 100.0);
    let mut xs: Vec<f64> = z.iter().map(|v| snap(mean + std * v / zs)).collect();
    let mut best = cost(&xs, mean, std);
    loop {
        let mut choice: Option<(usize, f64, Option<usize>)> = None;
        let mut try_move = |xs: &mut Vec<f64>, i: usize, d: f64, j: Option<usize>| {
            let (oi, oj) = (xs[i], j.map(|j| xs[j]));
            xs[i] = oi + d;
            if let Some(j) = j {
                xs[j] -= d;
            }
            let valid = xs[i] >= 0.0 && xs[i] <= 100.0 && j.is_none_or(|j| (0.0..=100.0).contains(&xs[j]));
            if valid {
                let c = cost(xs, mean, std);
                if c < best - 1e-15 {
                    best = c;
                    choice = Some((i, d, j));
                }
            }
            xs[i] = oi;
            if let (Some(j), Some(oj)) = (j, oj) {
                xs[j] = oj;
            }
        };
        for i in 0..n {
            for d in [step, -step] {
                try_move(&mut xs, i, d, None);
                for j in 0..n {
                    if j != i {
                        try_move(&mut xs, i, d, Some(j));
                    }
                }
            }
        }
        match choice {
            Some((i, d, j)) => {
                xs[i] += d;
                if let Some(j) = j {
                    xs[j] -= d;
                }
            }
            None => return xs,
        }
    }
}

/// Splits a per-participant mean into integer scores for each sequence
/// that average back to it exactly.
fn split_scores(mean: f64, n_seq: usize, rotate: usize) -> Vec<u32> {
    let total = (mean * n_seq as f64).round() as i64;
    let base = total.div_euclid(n_seq as i64);
    let extra = total.rem_euclid(n_seq as i64) as usize;
    let mut scores: Vec<i64> = (0..n_seq).map(|i| base + i64::from(i < extra)).collect();
    // Spread scores around the mean when there is headroom; sums stay put.
    let spread: Vec<i64> = (0..n_seq).map(|i| if i % 2 == 0 { 6 } else { -6 }).collect();
    if n_seq % 2 == 0 && scores.iter().zip(&spread).all(|(s, d)| (0..=100).contains(&(s + d))) {
        for (s, d) in scores.iter_mut().zip(&spread) {
            *s += d;
        }
    }
    scores.rotate_left(rotate % n_seq);
    scores.into_iter().map(|s| s as u32).collect()
}

/// Complete rating records for `participants`, one per (criterion,
/// sequence, condition), whose per-cell statistics match `targets`
/// (indexed [criterion][condition] with believability first).
pub fn build_records(
    participants: usize,
    sequences: &[String],
    conditions: &[String],
    targets: [&[(f64, f64)]; 2],
    seed: u64,
) -> Vec<RatingRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let step = 1.0 / sequences.len() as f64;
    for (ci, criterion) in Criterion::ORDER.into_iter().enumerate() {
        for (k, condition) in conditions.iter().enumerate() {
            let (mean, std) = targets[ci][k];
            let mut means = grid_sample(participants, mean, std, step);
            means.shuffle(&mut rng);
            for (p, m) in means.into_iter().enumerate() {
                let scores = split_scores(m, sequences.len(), p + k);
                for (s, (seq, score)) in sequences.iter().zip(scores).enumerate() {
                    out.push(RatingRecord {
                        participant_id: format!("p{:02}", p + 1),
                        criterion,
                        sequence_id: seq.clone(),
                        condition: condition.clone(),
                        score,
                        page_index: ci * sequences.len() + s,
                        position: k,
                        timestamp_ms: 0,
                    });
                }
            }
        }
    }
    out
}

/// Records matching the reference table: 30 participants, 4 sequences.
pub fn reference_records(seed: u64) -> Vec<RatingRecord> {
    let seqs: Vec<String> = (1..=4).map(|i| format!("seq{i}")).collect();
    let conds: Vec<String> = REFERENCE_CONDITIONS.map(String::from).to_vec();
    build_records(
        REFERENCE_PARTICIPANTS,
        &seqs,
        &conds,
        [&REFERENCE_BELIEVABILITY, &REFERENCE_COORDINATION],
        seed,
    )
}
