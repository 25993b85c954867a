//! Acceptance gate: runs every primary criterion at its stated tolerance and
//! prints one PASS/FAIL line each. Exits non-zero if any criterion fails.

use ndarray::{Array2, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};
use talkface_cli::commands;
use talkface_cli::config::{ConditionSpec, RunConfig};
use talkface_core::domain::{FRAME_RATE, HEAD_PITCH, PITCH, SPEAKING};
use talkface_core::evalobj::{acceleration_series, dtw_distance, jerk_series, motion_stats_matrix};
use talkface_core::preprocess::{
    build_clips, clamp_listening, median_smooth, segment, segment_with_stride, ClipPair, PreprocessConfig,
};
use talkface_core::synthcorpus::{generate_corpus, write_corpus, SynthConfig};
use talkface_core::{BehaviorTrack, NormStats, SpeakerRole, SpeechTrack, Track};
use talkface_model::autograd::{Graph, Var};
use talkface_model::nn::{Forward, Mode, ParamSet};
use talkface_model::training::{
    classify_clip, evaluate_reconstruction, gradient_penalty, normalize_clips, Critic, TurnKind,
};
use talkface_model::{make_noise, train, ArchConfig, Checkpoint, Generator, ModelError, TrainConfig};
use talkface_study::analysis::rm_anova;
use talkface_study::fixture::{reference_records, REFERENCE_BELIEVABILITY, REFERENCE_CONDITIONS, REFERENCE_COORDINATION};
use talkface_study::service::StudyService;
use talkface_study::session::{PageSubmission, SlotRating};
use talkface_study::{analyze, Criterion, Design, RatingRecord, RecordStore, StudyConfig};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    ensure(
        start.elapsed() < limit,
        format!("runtime {:.1?} exceeds {limit:?}", start.elapsed()),
    )
}

// ---------------------------------------------------------------- penalty

struct LinearCritic {
    norm: f64,
}

impl Critic for LinearCritic {
    fn score<'g>(&self, _f: &mut Forward<'g>, _speech: Var<'g>, behavior: Var<'g>) -> Result<Var<'g>, ModelError> {
        let s = behavior.shape();
        let dim = (s[1] * s[2]) as f64;
        Ok(behavior
            .sum_to(&[s[0], 1, 1])
            .reshape(&[s[0], 1])
            .scale(self.norm / dim.sqrt()))
    }
}

fn penalty_for(norm: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let real = ArrayD::from_shape_fn(vec![6, 28, 100], |_| rng.random::<f64>());
    let fake = ArrayD::from_shape_fn(vec![6, 28, 100], |_| rng.random::<f64>());
    let t: Vec<f64> = (0..6).map(|_| rng.random()).collect();
    let g = Graph::new();
    let mut f = Forward::new(&g, &ParamSet::new(), Mode::Train, 0);
    let speech = g.leaf(ArrayD::zeros(vec![6, 22, 100]));
    gradient_penalty(&LinearCritic { norm }, &mut f, speech, &real, &fake, &t, 10.0)
        .expect("finite penalty")
        .item()
}

fn gradient_penalty_suite() -> Check {
    let start = Instant::now();
    let mut got = Vec::new();
    for (norm, expect) in [(0.0, 10.0), (1.0, 0.0), (2.0, 10.0)] {
        let p = penalty_for(norm);
        ensure((p - expect).abs() <= 1e-4, format!("|grad| = {norm}: penalty {p}, expected {expect}"))?;
        got.push(format!("{p:.6}"));
    }
    within(Duration::from_secs(10), start)?;
    Ok(format!("penalties {}", got.join(", ")))
}

// -------------------------------------------------------------------- DTW

fn enumerate_paths(a: &[f64], b: &[f64], i: usize, j: usize, acc: f64, best: &mut f64) {
    let acc = (a[i] - b[j]).abs() + acc;
    if i + 1 == a.len() && j + 1 == b.len() {
        *best = best.min(acc);
        return;
    }
    if i + 1 < a.len() {
        enumerate_paths(a, b, i + 1, j, acc, best);
    }
    if j + 1 < b.len() {
        enumerate_paths(a, b, i, j + 1, acc, best);
    }
    if i + 1 < a.len() && j + 1 < b.len() {
        enumerate_paths(a, b, i + 1, j + 1, acc, best);
    }
}

fn dtw_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for k in 0..200 {
        let a: Vec<f64> = (0..rng.random_range(1..=8)).map(|_| rng.random_range(-5.0..5.0)).collect();
        let b: Vec<f64> = (0..rng.random_range(1..=8)).map(|_| rng.random_range(-5.0..5.0)).collect();
        let dp = dtw_distance(&a, &b).map_err(|e| e.to_string())?;
        let mut best = f64::INFINITY;
        enumerate_paths(&a, &b, 0, 0, 0.0, &mut best);
        ensure(dp == best, format!("pair {k}: DP {dp} vs enumeration {best}"))?;
    }
    within(Duration::from_secs(30), start)?;
    Ok("200 pairs equal exactly".into())
}

// ----------------------------------------------------------- motion stats

fn motion_suite() -> Check {
    let fps = FRAME_RATE;
    let t = |i: usize| i as f64 / fps;
    let constant = Array2::from_elem((50, 28), 0.3);
    let s = motion_stats_matrix(constant.view(), fps).map_err(|e| e.to_string())?;
    ensure(s.acceleration == 0.0 && s.jerk == 0.0, format!("constant: {s:?}"))?;
    let quad: Vec<f64> = (0..50).map(|i| t(i) * t(i)).collect();
    let acc = acceleration_series(&quad, fps);
    let worst_acc = acc.iter().map(|a| (a - 2.0).abs()).fold(0.0, f64::max);
    ensure(worst_acc <= 1e-6, format!("quadratic acceleration off by {worst_acc}"))?;
    let cubic: Vec<f64> = (0..50).map(|i| t(i).powi(3)).collect();
    let jerk = jerk_series(&cubic, fps);
    let worst_jerk = jerk.iter().map(|j| (j - 6.0).abs()).fold(0.0, f64::max);
    ensure(worst_jerk <= 1e-6, format!("cubic jerk off by {worst_jerk}"))?;
    Ok(format!("max errors: acceleration {worst_acc:.2e}, jerk {worst_jerk:.2e}"))
}

// ---------------------------------------------------- pipeline invariants

fn sorted_window_median(x: &[f64], t: usize, half: usize) -> f64 {
    let lo = t.saturating_sub(half);
    let hi = (t + half).min(x.len() - 1);
    let mut w = x[lo..=hi].to_vec();
    w.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = w.len();
    if n % 2 == 1 {
        w[n / 2]
    } else {
        (w[n / 2 - 1] + w[n / 2]) / 2.0
    }
}

fn random_speech(rng: &mut ChaCha8Rng, n: usize) -> SpeechTrack {
    let frames = Array2::from_shape_fn((n, 22), |(_, c)| {
        if c == SPEAKING {
            f64::from(u8::from(rng.random_bool(0.5)))
        } else {
            rng.random_range(-3.0..3.0)
        }
    });
    Track::new(frames, FRAME_RATE, "s", SpeakerRole::FirstPerson).unwrap()
}

fn random_behavior(rng: &mut ChaCha8Rng, n: usize) -> BehaviorTrack {
    let frames = Array2::from_shape_fn((n, 28), |_| rng.random_range(-2.0..2.0));
    Track::new(frames, FRAME_RATE, "s", SpeakerRole::FirstPerson).unwrap()
}

fn pipeline_invariants() -> Check {
    let corpus = generate_corpus(&SynthConfig { seed: 4, n_tracks: 4, ..SynthConfig::default() }).map_err(|e| e.to_string())?;
    let (mut flag0, mut zero) = (0usize, 0usize);
    for tr in &corpus {
        let clamped = clamp_listening(&tr.behavior, &tr.speech).map_err(|e| e.to_string())?;
        for (t, speaking) in tr.speech.speaking().enumerate() {
            if !speaking {
                flag0 += 1;
                zero += usize::from(clamped.frames().row(t).iter().all(|&v| v == 0.0));
            }
        }
    }
    ensure(flag0 > 0 && zero == flag0, format!("{zero} of {flag0} listening frames are zero"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for k in 0..100 {
        let n = rng.random_range(7..80);
        let track = random_behavior(&mut rng, n);
        let smooth = median_smooth(&track, 7).map_err(|e| e.to_string())?;
        for c in 0..28 {
            let x = track.frames().column(c).to_vec();
            for t in 0..n {
                let want = sorted_window_median(&x, t, 3);
                ensure(smooth.frames()[[t, c]] == want, format!("signal {k}: median differs at ({t}, {c})"))?;
            }
        }
    }

    let speech: Vec<_> = (0..5).map(|_| random_speech(&mut rng, 60)).collect();
    let behavior: Vec<_> = (0..5).map(|_| random_behavior(&mut rng, 60)).collect();
    let norm = NormStats::compute(&speech, &behavior).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (s, b) in speech.iter().zip(&behavior) {
        let s2 = norm.denormalize(&norm.normalize(s));
        let b2 = norm.denormalize(&norm.normalize(b));
        worst = s2.frames().iter().zip(s.frames()).chain(b2.frames().iter().zip(b.frames()))
            .map(|(x, y)| (x - y).abs())
            .fold(worst, f64::max);
    }
    ensure(worst < 1e-9, format!("round-trip error {worst}"))?;

    for _ in 0..20 {
        let n = rng.random_range(1..1200);
        let s = random_speech(&mut rng, n);
        let b = random_behavior(&mut rng, n);
        let got = segment(&s, &b, 100).map_err(|e| e.to_string())?.len();
        ensure(got == n / 100, format!("length {n}: {got} clips, expected {}", n / 100))?;
        let stride = rng.random_range(1..100);
        let got = segment_with_stride(&s, &b, 100, stride).map_err(|e| e.to_string())?.len();
        let want = if n >= 100 { (n - 100) / stride + 1 } else { 0 };
        ensure(got == want, format!("length {n} stride {stride}: {got} clips, expected {want}"))?;
    }
    Ok(format!("{flag0} listening frames zeroed, 100 median signals, round-trip {worst:.1e}, 20 segment lengths"))
}

// ------------------------------------------------- architecture contracts

fn architecture_contracts() -> Check {
    let arch = ArchConfig::default();
    let gen = Generator::new(arch.clone(), 5).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let speech: Vec<Array2<f64>> = (0..50)
        .map(|_| {
            Array2::from_shape_fn((100, 22), |(_, c)| {
                if c == SPEAKING {
                    f64::from(u8::from(rng.random_bool(0.5)))
                } else {
                    rng.random::<f64>()
                }
            })
        })
        .collect();
    let noise: Vec<_> = (0..50).map(|_| make_noise(&mut rng)).collect();
    let views: Vec<_> = speech.iter().map(|s| s.view()).collect();
    let out = gen.generate_batch(&views, &noise).map_err(|e| e.to_string())?;
    for (k, y) in out.iter().enumerate() {
        ensure(y.dim() == (100, 28), format!("input {k}: shape {:?}", y.dim()))?;
        ensure(y.iter().all(|&v| v > 0.0 && v < 1.0), format!("input {k}: value outside (0, 1)"))?;
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("g.ckpt");
    let ckpt = Checkpoint {
        generator: gen.clone(),
        discriminator: talkface_model::Discriminator::new(arch.clone(), 6).map_err(|e| e.to_string())?,
        norm_stats: None,
        step: 0,
    };
    ckpt.save(&path).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    let again = loaded.generator.generate_batch(&views, &noise).map_err(|e| e.to_string())?;
    ensure(again == out, "reloaded generator output differs")?;

    let corrupted = ArchConfig {
        skip_levels: vec![3, 3, 2, 1],
        ..ArchConfig::default()
    };
    ensure(corrupted.validate().is_err(), "corrupted skip levels accepted by validate")?;
    ensure(Generator::new(corrupted, 1).is_err(), "corrupted skip levels accepted by generator")?;
    Ok("50 inputs in (0,1), reload bit-identical, corrupted skips rejected".into())
}

// ---------------------------------------------------------------- overfit

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Frozen calibration: 6 speaking and 2 listening clips from a seeded
/// corpus, 300 iterations of one batch.
fn overfit() -> Check {
    let start = Instant::now();
    let corpus = generate_corpus(&SynthConfig { seed: 11, n_tracks: 4, duration_s: 40.0, ..SynthConfig::default() })
        .map_err(|e| e.to_string())?;
    let sources: Vec<_> = corpus.iter().map(|t| t.to_source()).collect();
    let clips = build_clips(&sources, &PreprocessConfig { test_fraction: 0.0, ..PreprocessConfig::default() })
        .map_err(|e| e.to_string())?;
    let all: Vec<ClipPair> = clips.into_iter().map(|c| c.pair).collect();
    let of_kind = |k: TurnKind, n: usize| all.iter().filter(|c| classify_clip(c, 0.8) == k).take(n).cloned().collect::<Vec<_>>();
    let mut train_clips = of_kind(TurnKind::Speaking, 6);
    train_clips.extend(of_kind(TurnKind::Listening, 2));
    ensure(train_clips.len() == 8, format!("only {} clips selected", train_clips.len()))?;
    let norm = NormStats::from_matrices(
        train_clips.iter().map(|c| c.speech.view()),
        train_clips.iter().map(|c| c.behavior.view()),
    )
    .map_err(|e| e.to_string())?;
    let arch = ArchConfig {
        encoder_channels: vec![16, 32, 32, 64, 64],
        dropout_rate: 0.0,
        ..ArchConfig::default()
    };
    let cfg = TrainConfig {
        batch_size: 8,
        epochs: 300,
        lr_generator: 1e-2,
        lr_discriminator: 1e-4,
        n_critic: 5,
        seed: 1,
        ..TrainConfig::default()
    };
    let data = normalize_clips(&train_clips, &norm);
    let initial = Generator::new(arch.clone(), cfg.seed).map_err(|e| e.to_string())?;
    let l0 = evaluate_reconstruction(&initial, &data, 5).map_err(|e| e.to_string())?.total;
    let out = train(&train_clips, &norm, &arch, &cfg, &Default::default()).map_err(|e| e.to_string())?;
    let l1 = evaluate_reconstruction(&out.checkpoint.generator, &data, 5).map_err(|e| e.to_string())?.total;
    let ratio = l1 / l0;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut head, mut pitch) = (Vec::new(), Vec::new());
    for (s, _) in &data {
        let y = out.checkpoint.generator.generate(s.view(), &make_noise(&mut rng)).map_err(|e| e.to_string())?;
        for t in 2..s.nrows() {
            if s[[t, SPEAKING]] > 0.5 && s[[t - 2, SPEAKING]] > 0.5 {
                head.push(y[[t, HEAD_PITCH]]);
                pitch.push(s[[t - 2, PITCH]]);
            }
        }
    }
    let r = pearson(&head, &pitch);
    let detail = format!("L_G {l0:.4} -> {l1:.4} (ratio {ratio:.3}), r = {r:.3}, {:.0?}", start.elapsed());
    ensure(ratio <= 0.2, format!("{detail}: ratio above 0.2"))?;
    ensure(r > 0.5, format!("{detail}: correlation not above 0.5"))?;
    within(Duration::from_secs(600), start)?;
    Ok(detail)
}

// --------------------------------------------------------------- ablation

fn small_run(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::default().with_overrides(Some(3), Some(root.to_path_buf()));
    cfg.synth.n_tracks = 4;
    cfg.synth.duration_s = 40.0;
    cfg.preprocess.test_fraction = 0.5;
    cfg.arch = ArchConfig::small();
    cfg.train.epochs = 2;
    cfg.train.batch_size = 8;
    cfg.train.n_critic = 2;
    cfg
}

fn ablation() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let err = |e: talkface_cli::CliError| e.to_string();

    // Corpus A feeds m1 and m3; m2 trains on A together with a less expressive corpus B.
    let mut a = small_run(root);
    a.paths.corpus_dir = "corpus_a".into();
    a.synth.id_prefix = "a".into();
    commands::synth(&a).map_err(err)?;
    commands::ingest(&a).map_err(err)?;
    commands::preprocess(&a).map_err(err)?;

    let mut m1 = a.clone();
    m1.paths.checkpoints_dir = "m1".into();
    commands::train(&m1).map_err(err)?;

    let mut m3 = a.clone();
    m3.paths.checkpoints_dir = "m3".into();
    m3.train.mismatch_fraction = 0.0;
    ensure(m3.train.mismatch_count(m3.train.batch_size) == 0, "m3 still fabricates mismatch pairs")?;
    commands::train(&m3).map_err(err)?;

    let mut b = small_run(root);
    b.paths.corpus_dir = "corpus_b".into();
    b.synth.id_prefix = "b".into();
    b.synth.seed = 8;
    b.synth.expressiveness = 0.4;
    commands::synth(&b).map_err(err)?;
    let mut m2 = a.clone();
    m2.ingest.corpora = vec!["corpus_a".into(), "corpus_b".into()];
    m2.paths.ingested_dir = "ingested_ab".into();
    m2.paths.clips_dir = "clips_ab".into();
    m2.paths.checkpoints_dir = "m2".into();
    commands::ingest(&m2).map_err(err)?;
    commands::preprocess(&m2).map_err(err)?;
    commands::train(&m2).map_err(err)?;

    let mut eval = a.clone();
    eval.evaluate.conditions = ["m1", "m2", "m3"]
        .iter()
        .map(|n| ConditionSpec { name: n.to_string(), checkpoint: format!("{n}/final.ckpt").into() })
        .collect();
    commands::evaluate(&eval).map_err(err)?;
    let report = commands::evaluate_report(&eval).map_err(err)?;
    let names: Vec<&str> = report.columns.iter().map(|c| c.name.as_str()).collect();
    ensure(names == ["GTS", "m1", "m2", "m3"], format!("columns {names:?}"))?;
    let tsv = std::fs::read_to_string(root.join("reports/evaluation.tsv")).map_err(|e| e.to_string())?;
    ensure(tsv.lines().next() == Some("metric\tGTS\tm1\tm2\tm3"), "report header")?;
    let dtw: Vec<f64> = report.columns[1..].iter().map(|c| c.dtw.expect("generated columns have DTW").mean).collect();
    let distinct: BTreeSet<u64> = dtw.iter().map(|v| v.to_bits()).collect();
    ensure(distinct.len() == 3, format!("DTW columns not distinct: {dtw:?}"))?;
    Ok(format!(
        "{} test clips; DTW m1 {:.4}, m2 {:.4}, m3 {:.4}",
        report.clips, dtw[0], dtw[1], dtw[2]
    ))
}

// ------------------------------------------------------------ determinism

fn files_under(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Check {
    let cfg = SynthConfig { seed: 21, n_tracks: 3, duration_s: 20.0, ..SynthConfig::default() };
    let d1 = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d2 = tempfile::tempdir().map_err(|e| e.to_string())?;
    for d in [&d1, &d2] {
        let corpus = generate_corpus(&cfg).map_err(|e| e.to_string())?;
        write_corpus(d.path(), &corpus).map_err(|e| e.to_string())?;
    }
    let (f1, f2) = (files_under(d1.path()), files_under(d2.path()));
    ensure(!f1.is_empty() && f1 == f2, "synthetic corpus differs between runs")?;

    let corpus = generate_corpus(&cfg).map_err(|e| e.to_string())?;
    let sources: Vec<_> = corpus.iter().map(|t| t.to_source()).collect();
    let clips: Vec<ClipPair> = build_clips(&sources, &PreprocessConfig { test_fraction: 0.0, ..PreprocessConfig::default() })
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|c| c.pair)
        .collect();
    let norm = NormStats::from_matrices(clips.iter().map(|c| c.speech.view()), clips.iter().map(|c| c.behavior.view()))
        .map_err(|e| e.to_string())?;
    let tc = TrainConfig { batch_size: 4, epochs: 1, n_critic: 2, seed: 13, ..TrainConfig::default() };
    let run = || train(&clips, &norm, &ArchConfig::small(), &tc, &Default::default()).map(|o| o.records);
    let (r1, r2) = (run().map_err(|e| e.to_string())?, run().map_err(|e| e.to_string())?);
    ensure(r1.len() >= 10, format!("only {} steps logged", r1.len()))?;
    ensure(r1[..10] == r2[..10], "first 10 step losses differ")?;
    Ok(format!("{} corpus files byte-identical, first 10 of {} step losses identical", f1.len(), r1.len()))
}

// ----------------------------------------------------------------- study

fn study_analysis() -> Check {
    let records = reference_records(1);
    let report = analyze(&records, &Design::infer(&records), false);
    let mut worst: f64 = 0.0;
    for (crit, targets) in [
        (Criterion::Coordination, REFERENCE_COORDINATION),
        (Criterion::Believability, REFERENCE_BELIEVABILITY),
    ] {
        for (cond, (m, s)) in REFERENCE_CONDITIONS.iter().zip(targets) {
            let c = report.cell(crit, cond).ok_or(format!("no cell {crit}/{cond}"))?;
            let (gm, gs) = (c.mean.unwrap_or(f64::NAN), c.std.unwrap_or(f64::NAN));
            worst = worst.max((gm - m).abs()).max((gs - s).abs());
            ensure((gm - m).abs() <= 0.01 && (gs - s).abs() <= 0.01, format!("{crit}/{cond}: {gm:.4}/{gs:.4} vs {m}/{s}"))?;
        }
    }
    let m1 = report.cell(Criterion::Coordination, "m1").unwrap();

    // A = [10, 20, 30], B = [14, 22, 36]: SS_cond 24, SS_subj 444, SS_err 4, F = 24 / (4 / 2).
    let rec = |p: usize, cond: &str, score: u32| RatingRecord {
        participant_id: format!("p{p}"),
        criterion: Criterion::Coordination,
        sequence_id: "s".into(),
        condition: cond.into(),
        score,
        page_index: 0,
        position: 0,
        timestamp_ms: 0,
    };
    let mut small = Vec::new();
    for (p, (a, b)) in [(10, 14), (20, 22), (30, 36)].into_iter().enumerate() {
        small.push(rec(p, "A", a));
        small.push(rec(p, "B", b));
    }
    let r = rm_anova(&small, Criterion::Coordination, &["A".to_string(), "B".to_string()]).map_err(|e| e.to_string())?;
    for (name, got, want) in [
        ("SS_cond", r.ss_conditions, 24.0),
        ("SS_subj", r.ss_subjects, 444.0),
        ("SS_err", r.ss_error, 4.0),
        ("F", r.f, 12.0),
    ] {
        ensure((got - want).abs() <= 1e-6, format!("{name} {got} vs {want}"))?;
    }
    Ok(format!(
        "coordination/m1 {:.2}/{:.2}, worst cell error {worst:.4}; F = {:.6}",
        m1.mean.unwrap(),
        m1.std.unwrap(),
        r.f
    ))
}

fn ui_protocol() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let store = RecordStore::open(dir.path().join("r.ndjson")).map_err(|e| e.to_string())?;
    let svc = StudyService::new(StudyConfig::default(), store).map_err(|e| e.to_string())?;
    let mut view = svc.create(Some("sim".into())).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut pages = 0;
    while let Some(page) = view.page.clone() {
        ensure(page.videos.len() == 4, "page without 4 videos")?;
        ensure(page.muted == (page.criterion == Criterion::Believability), "wrong mute flag")?;
        let sub = PageSubmission {
            page_index: page.page_index,
            ratings: (0..4).map(|slot| SlotRating { slot, score: rng.random_range(0..=100) }).collect(),
        };
        view = svc.submit("sim", &sub).map_err(|e| e.to_string())?;
        let back = svc.submit("sim", &sub);
        ensure(back.is_err(), "resubmission of a past page accepted")?;
        pages += 1;
    }
    let records = svc.records().map_err(|e| e.to_string())?;
    ensure(pages == 8 && view.completed, format!("{pages} pages"))?;
    ensure(records.len() == 32 && records.iter().all(|r| r.score <= 100), format!("{} records", records.len()))?;
    Ok("8 pages x 4 sliders, 32 records".into())
}

fn main() {
    let criteria: Vec<(&str, &str, fn() -> Check)> = vec![
        ("PRIMARY", "gradient-penalty analytic suite", gradient_penalty_suite),
        ("PRIMARY", "DTW oracle equivalence", dtw_oracle),
        ("PRIMARY", "motion-stats analytic suite", motion_suite),
        ("PRIMARY", "pipeline invariants", pipeline_invariants),
        ("PRIMARY", "architecture contracts", architecture_contracts),
        ("PRIMARY", "overfit", overfit),
        ("PRIMARY", "ablation wiring m1/m2/m3", ablation),
        ("PRIMARY", "determinism", determinism),
        ("PRIMARY", "study analysis", study_analysis),
        ("SECONDARY", "UI protocol simulation", ui_protocol),
    ];
    let mut failed = 0;
    for (level, name, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS [{level}] {name}: {detail} ({secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{level}] {name}: {detail} ({secs:.1}s)");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
