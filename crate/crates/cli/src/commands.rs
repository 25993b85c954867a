//! One function per subcommand. Each returns a one-line summary.

use crate::config::RunConfig;
use crate::CliError;
use ndarray::{s, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use talkface_core::domain::{Behavior, Speech, FRAME_RATE};
use talkface_core::evalobj::{build_report, MetricReport};
use talkface_core::ingestion::{self, IngestedSource};
use talkface_core::preprocess::{self, Clip, Split};
use talkface_core::synthcorpus;
use talkface_core::{BehaviorTrack, NormStats, SpeakerRole, Track};
use talkface_model::training::{self, TrainOutputs};
use talkface_model::{make_noise, Checkpoint, Generator};
use talkface_study::service::{self, StudyService};
use talkface_study::{analyze, read_records, Design, RecordStore, StudyReport};

fn stage<E>(name: &'static str) -> impl FnOnce(E) -> CliError
where
    E: std::error::Error + Send + Sync + 'static,
{
    move |e| CliError::Stage {
        stage: name,
        source: Box::new(e),
    }
}

fn require(stage: &'static str, path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingInput {
            stage,
            path: path.to_path_buf(),
        })
    }
}

fn create_dir(stage_name: &'static str, dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
        stage: stage_name,
        path: dir.to_path_buf(),
        source,
    })
}

fn write_file(stage_name: &'static str, path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        create_dir(stage_name, parent)?;
    }
    std::fs::write(path, contents).map_err(|source| CliError::Io {
        stage: stage_name,
        path: path.to_path_buf(),
        source,
    })
}

pub fn synth(cfg: &RunConfig) -> Result<String, CliError> {
    let dir = cfg.paths.corpus();
    let corpus = synthcorpus::generate_corpus(&cfg.synth).map_err(stage("synth"))?;
    let entries = synthcorpus::write_corpus(&dir, &corpus).map_err(stage("synth"))?;
    Ok(format!(
        "synth: wrote {} speech and {} behavior files plus manifest to {}",
        entries.len(),
        entries.len(),
        dir.display()
    ))
}

/// Merges every configured corpus, rejecting clashing source ids.
pub fn ingest(cfg: &RunConfig) -> Result<String, CliError> {
    let corpora: Vec<PathBuf> = if cfg.ingest.corpora.is_empty() {
        vec![cfg.paths.corpus()]
    } else {
        cfg.ingest.corpora.iter().map(|p| cfg.paths.resolve(p)).collect()
    };
    let mut sources: Vec<IngestedSource> = Vec::new();
    let mut seen = BTreeSet::new();
    for dir in &corpora {
        let manifest = dir.join("manifest.csv");
        require("ingest", &manifest)?;
        for src in ingestion::ingest_manifest(&manifest).map_err(stage("ingest"))? {
            let key = format!("{}_{}", src.speech.source_id(), src.speech.role());
            if !seen.insert(key.clone()) {
                return Err(CliError::Config(format!(
                    "ingest: source {key} appears in more than one corpus; give each corpus its own id_prefix"
                )));
            }
            sources.push(src);
        }
    }
    let out = cfg.paths.ingested();
    let entries = ingestion::save_sources(&out, &sources).map_err(stage("ingest"))?;
    let frames: usize = sources.iter().map(|s| s.speech.len()).sum();
    Ok(format!(
        "ingest: {} sources from {} corpora, {frames} frames, written to {}",
        entries.len(),
        corpora.len(),
        out.display()
    ))
}

pub fn preprocess(cfg: &RunConfig) -> Result<String, CliError> {
    cfg.validate()?;
    let manifest = cfg.paths.ingested().join("manifest.csv");
    require("preprocess", &manifest)?;
    let sources = ingestion::ingest_manifest(&manifest).map_err(stage("preprocess"))?;
    let clips = preprocess::build_clips(&sources, &cfg.preprocess).map_err(stage("preprocess"))?;
    let out = cfg.paths.clips();
    preprocess::save_clips(&out, &clips).map_err(stage("preprocess"))?;
    let n_test = clips.iter().filter(|c| c.split == Split::Test).count();
    Ok(format!(
        "preprocess: {} clips ({} train, {n_test} test) written to {}",
        clips.len(),
        clips.len() - n_test,
        out.display()
    ))
}

pub fn load_split(cfg: &RunConfig, stage_name: &'static str, split: Split) -> Result<Vec<Clip>, CliError> {
    let dir = cfg.paths.clips();
    require(stage_name, &dir.join("manifest.csv"))?;
    preprocess::load_clips(&dir, Some(split)).map_err(stage(stage_name))
}

pub fn train(cfg: &RunConfig) -> Result<String, CliError> {
    cfg.validate()?;
    let clips = load_split(cfg, "train", Split::Train)?;
    let pairs: Vec<_> = clips.into_iter().map(|c| c.pair).collect();
    let norm = NormStats::from_matrices(
        pairs.iter().map(|p| p.speech.view()),
        pairs.iter().map(|p| p.behavior.view()),
    )
    .map_err(stage("train"))?;
    let ckpt_dir = cfg.paths.checkpoints();
    let outputs = TrainOutputs {
        checkpoint_dir: Some(ckpt_dir.clone()),
        loss_log: Some(ckpt_dir.join("losses.tsv")),
    };
    let outcome = training::train(&pairs, &norm, &cfg.arch, &cfg.train, &outputs).map_err(stage("train"))?;
    let last = outcome.records.iter().rev().find(|r| r.l_d.is_some());
    let l_d = last.and_then(|r| r.l_d).unwrap_or(f64::NAN);
    let l_g = outcome.records.last().map_or(f64::NAN, |r| r.recon.total);
    Ok(format!(
        "train: {} clips, {} iterations, {} optimizer steps, final L_D {l_d:.4}, final L_G {l_g:.4}, checkpoint {}",
        pairs.len(),
        outcome.iterations,
        outcome.records.len(),
        ckpt_dir.join("final.ckpt").display()
    ))
}

/// Loads a checkpoint whose architecture must equal the configured one.
fn load_checkpoint(
    cfg: &RunConfig,
    stage_name: &'static str,
    path: &Path,
) -> Result<(Checkpoint, NormStats), CliError> {
    require(stage_name, path)?;
    let ckpt = Checkpoint::load(path).map_err(stage(stage_name))?;
    if ckpt.arch() != &cfg.arch {
        return Err(CliError::Config(format!(
            "{stage_name}: incompatible checkpoint {}: its architecture differs from [arch] in the run configuration",
            path.display()
        )));
    }
    let norm = ckpt.norm_stats.clone().ok_or_else(|| {
        CliError::Config(format!(
            "{stage_name}: checkpoint {} carries no normalization statistics",
            path.display()
        ))
    })?;
    Ok((ckpt, norm))
}

/// Generates behavior in raw units for speech of any length: the speech is
/// cut into `seq_len` windows, the last padded with its final frame, and
/// the padded tail is trimmed from the output.
pub fn generate_raw(
    generator: &Generator,
    norm: &NormStats,
    speech: ArrayView2<'_, f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>, CliError> {
    let len = generator.arch().seq_len;
    let n = speech.nrows();
    if n == 0 {
        return Err(CliError::Config("generate: speech input has no frames".into()));
    }
    let normalized = norm.normalize_rows::<Speech>(speech);
    let windows = n.div_ceil(len);
    let mut padded = Array2::zeros((windows * len, normalized.ncols()));
    padded.slice_mut(s![..n, ..]).assign(&normalized);
    let last = normalized.row(n - 1).to_owned();
    for mut row in padded.slice_mut(s![n.., ..]).rows_mut() {
        row.assign(&last);
    }
    let views: Vec<_> = (0..windows).map(|w| padded.slice(s![w * len..(w + 1) * len, ..])).collect();
    let noise: Vec<_> = (0..windows).map(|_| make_noise(rng)).collect();
    let out = generator.generate_batch(&views, &noise).map_err(stage("generate"))?;
    let views: Vec<_> = out.iter().map(|m| m.view()).collect();
    let joined = ndarray::concatenate(ndarray::Axis(0), &views).expect("windows share width");
    Ok(norm.denormalize_rows::<Behavior>(joined.slice(s![..n, ..])))
}

/// `generate`: behavior CSV for one speech CSV (canonical 22 columns).
pub fn generate(
    cfg: &RunConfig,
    checkpoint: &Path,
    speech_csv: &Path,
    out_path: &Path,
) -> Result<String, CliError> {
    let (ckpt, norm) = load_checkpoint(cfg, "generate", checkpoint)?;
    require("generate", speech_csv)?;
    let id = speech_csv
        .file_stem()
        .map_or_else(|| "speech".to_string(), |s| s.to_string_lossy().into_owned());
    let speech = ingestion::read_speech_csv(speech_csv, &id, SpeakerRole::FirstPerson).map_err(stage("generate"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.generate.seed);
    let frames = generate_raw(&ckpt.generator, &norm, speech.frames().view(), &mut rng)?;
    let track: BehaviorTrack = Track::new(frames, FRAME_RATE, id, SpeakerRole::FirstPerson).map_err(stage("generate"))?;
    let mut buf = Vec::new();
    ingestion::write_behavior_csv(&mut buf, &track, None).map_err(|source| CliError::Io {
        stage: "generate",
        path: out_path.to_path_buf(),
        source,
    })?;
    write_file("generate", out_path, &buf)?;
    Ok(format!(
        "generate: {} frames of behavior written to {}",
        track.len(),
        out_path.display()
    ))
}

fn clip_key(c: &Clip) -> String {
    c.pair.id()
}

/// Metric report over the evaluation split: ground truth plus one column
/// per configured condition, each generated with the same noise draws.
pub fn evaluate_report(cfg: &RunConfig) -> Result<MetricReport, CliError> {
    let split = if cfg.evaluate.use_train_split { Split::Train } else { Split::Test };
    let clips = load_split(cfg, "evaluate", split)?;
    if clips.is_empty() {
        return Err(CliError::Config(format!("evaluate: no {split:?} clips in {}", cfg.paths.clips().display())));
    }
    let track = |c: &Clip, frames: Array2<f64>| -> Result<BehaviorTrack, CliError> {
        Track::new(frames, FRAME_RATE, c.pair.source_id.clone(), c.pair.role).map_err(stage("evaluate"))
    };
    let mut truth = BTreeMap::new();
    for c in &clips {
        truth.insert(clip_key(c), track(c, c.pair.behavior.clone())?);
    }
    let mut conditions = Vec::new();
    for cond in &cfg.evaluate.conditions {
        let (ckpt, norm) = load_checkpoint(cfg, "evaluate", &cfg.paths.resolve(&cond.checkpoint))?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.evaluate.seed);
        let mut generated = BTreeMap::new();
        for c in &clips {
            let frames = generate_raw(&ckpt.generator, &norm, c.pair.speech.view(), &mut rng)?;
            generated.insert(clip_key(c), track(c, frames)?);
        }
        conditions.push((cond.name.clone(), generated));
    }
    build_report(&truth, &conditions).map_err(stage("evaluate"))
}

pub fn evaluate(cfg: &RunConfig) -> Result<String, CliError> {
    let report = evaluate_report(cfg)?;
    let path = cfg.paths.reports().join("evaluation.tsv");
    write_file("evaluate", &path, report.to_tsv().as_bytes())?;
    log::info!("\n{report}");
    Ok(format!(
        "evaluate: {} clips, columns {}, report {}",
        report.clips,
        report.columns.iter().map(|c| c.name.as_str()).collect::<Vec<_>>().join(" "),
        path.display()
    ))
}

pub fn study_report(cfg: &RunConfig, include_incomplete: bool) -> Result<StudyReport, CliError> {
    let path = cfg.paths.records_file();
    require("study analyze", &path)?;
    let records = read_records(&path).map_err(stage("study analyze"))?;
    Ok(analyze(&records, &Design::from_config(&cfg.study), include_incomplete))
}

pub fn study_analyze(cfg: &RunConfig, include_incomplete: bool) -> Result<String, CliError> {
    let report = study_report(cfg, include_incomplete)?;
    let dir = cfg.paths.reports();
    let json = serde_json::to_vec_pretty(&report).expect("report always serializes");
    write_file("study analyze", &dir.join("study_report.json"), &json)?;
    let text = report.to_text();
    write_file("study analyze", &dir.join("study_report.txt"), text.as_bytes())?;
    println!("{text}");
    Ok(format!(
        "study analyze: {} participants analyzed, report {}",
        report.participants_analyzed,
        dir.join("study_report.txt").display()
    ))
}

pub async fn study_serve(cfg: &RunConfig) -> Result<String, CliError> {
    cfg.study.validate().map_err(stage("study serve"))?;
    let store = RecordStore::open(cfg.paths.records_file()).map_err(stage("study serve"))?;
    let svc = StudyService::new(cfg.study.clone(), store).map_err(stage("study serve"))?;
    let videos = cfg.paths.videos();
    if let Some(v) = &videos {
        require("study serve", v)?;
    }
    service::serve(Arc::new(svc), videos, cfg.serve.addr)
        .await
        .map_err(|source| CliError::Io {
            stage: "study serve",
            path: PathBuf::from(cfg.serve.addr.to_string()),
            source,
        })?;
    Ok("study serve: stopped".into())
}
