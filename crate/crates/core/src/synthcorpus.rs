//! Seeded synthetic conversations with a known speech → motion coupling.
//!
//! Each interaction has two speakers with complementary turn schedules.
//! While a speaker talks, a pitch contour `s(t)` drives their head pitch
//! two frames later and an energy contour drives AU12. Listening behavior
//! is exactly zero. Output uses the same file formats the ingestion module
//! reads, so a synthetic corpus exercises the whole real-data path.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    BehaviorTrack, SpeakerRole, SpeechTrack, Track, AUS, AU_CODES, BEHAVIOR_DIM, FRAME_RATE,
    GAZE_ANGLE, GAZE_DIR_LEFT, GAZE_DIR_RIGHT, HEAD_PITCH, HEAD_ROTATION, SPEECH_BASE_DIM,
    SPEECH_BASE_FEATURES,
};
use crate::ingestion::{
    self, write_manifest, FrameQuality, IngestError, IngestedSource, ManifestEntry, RawSpeechRow,
    TurnInterval,
};
use crate::par;

/// Rate of the raw acoustic rows, before pairwise downsampling.
pub const SPEECH_RATE: f64 = 50.0;

/// Frames between a pitch movement and the head movement it drives.
pub const MOTION_LAG: usize = 2;

/// Head-pitch amplitude (radians) per unit of pitch contour at full gain.
const HEAD_GAIN: f64 = 0.15;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_tracks: usize,
    pub duration_s: f64,
    /// Mean length of one speaking or listening turn.
    pub turn_length_s: f64,
    pub coupling_gain: f64,
    /// Scales head and AU amplitude, 0 = motionless, 1 = fully expressive.
    pub expressiveness: f64,
    pub noise_sigma: f64,
    /// Prefix of generated source ids, so two corpora can be merged.
    pub id_prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_tracks: 10,
            duration_s: 40.0,
            turn_length_s: 4.0,
            coupling_gain: 1.0,
            expressiveness: 1.0,
            noise_sigma: 0.01,
            id_prefix: "int".into(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        if self.n_tracks == 0 {
            return bad("n_tracks must be positive");
        }
        if !(self.duration_s.is_finite() && self.duration_s * FRAME_RATE >= 4.0) {
            return bad("duration_s must cover at least 4 frames");
        }
        if !(self.turn_length_s.is_finite() && self.turn_length_s * FRAME_RATE >= 1.0) {
            return bad("turn_length_s must cover at least one frame");
        }
        if !(self.coupling_gain.is_finite() && self.coupling_gain > 0.0) {
            return bad("coupling_gain must be positive");
        }
        if !(0.0..=1.0).contains(&self.expressiveness) {
            return bad("expressiveness must lie in [0, 1]");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative");
        }
        Ok(())
    }

    fn frames(&self) -> usize {
        (self.duration_s * FRAME_RATE).round() as usize
    }
}

/// One speaker of one synthetic interaction, in both raw and aligned form.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTrack {
    pub source_id: String,
    pub role: SpeakerRole,
    pub raw_speech: Vec<RawSpeechRow>,
    pub turns: Vec<TurnInterval>,
    pub speech: SpeechTrack,
    pub behavior: BehaviorTrack,
    pub quality: Vec<FrameQuality>,
}

impl SynthTrack {
    /// The aligned streams as ingestion would produce them from the written files.
    pub fn to_source(&self) -> IngestedSource {
        IngestedSource {
            speech: self.speech.clone(),
            behavior: self.behavior.clone(),
            quality: self.quality.clone(),
        }
    }
}

/// Sum of sinusoids with per-speaker random frequencies and phases.
#[derive(Debug, Clone)]
struct Contour {
    parts: Vec<(f64, f64, f64)>,
}

impl Contour {
    fn random(rng: &mut impl Rng, bands: &[(f64, f64, f64)]) -> Self {
        let parts = bands
            .iter()
            .map(|&(amp, lo, hi)| (amp, rng.random_range(lo..hi), rng.random_range(0.0..TAU)))
            .collect();
        Self { parts }
    }

    fn at(&self, t: f64) -> f64 {
        self.parts
            .iter()
            .map(|&(a, f, p)| a * (TAU * f * t + p).sin())
            .sum()
    }

    /// Value seen by a 25 fps frame: the mean of its two 50 fps samples.
    fn frame(&self, k: isize) -> f64 {
        let t = k as f64 / FRAME_RATE;
        0.5 * (self.at(t) + self.at(t + 1.0 / SPEECH_RATE))
    }
}

/// Alternating turns quantized to whole frames. Even turns belong to the
/// first speaker, odd turns to the second.
fn turn_schedule(rng: &mut impl Rng, frames: usize, mean_len: f64) -> Vec<(usize, usize)> {
    let mean = (mean_len * FRAME_RATE).max(1.0);
    let mut out = Vec::new();
    let mut start = 0;
    while start < frames {
        let len = (rng.random_range(0.5 * mean..1.5 * mean).round() as usize).max(1);
        let end = (start + len).min(frames);
        out.push((start, end));
        start = end;
    }
    out
}

struct Speaker {
    pitch: Contour,
    energy: Contour,
    timbre: Contour,
    gaze: Contour,
    yaw: Contour,
    aus: Vec<Contour>,
}

impl Speaker {
    fn random(rng: &mut impl Rng) -> Self {
        Self {
            pitch: Contour::random(rng, &[(0.6, 0.5, 1.2), (0.4, 1.5, 2.5)]),
            energy: Contour::random(rng, &[(0.5, 1.0, 3.0)]),
            timbre: Contour::random(rng, &[(1.0, 2.0, 5.0)]),
            gaze: Contour::random(rng, &[(1.0, 0.1, 0.4)]),
            yaw: Contour::random(rng, &[(1.0, 0.2, 0.6)]),
            aus: (0..AU_CODES.len())
                .map(|_| Contour::random(rng, &[(1.0, 0.2, 1.5)]))
                .collect(),
        }
    }

    /// The seven base descriptors at time `t` (seconds).
    fn speech_row(&self, t: f64, speaking: bool) -> [f64; SPEECH_BASE_DIM] {
        if !speaking {
            return [-20.0, 25.0, 5.0, 0.0, 0.0, 0.0, 0.0];
        }
        let e = 0.5 + self.energy.at(t);
        let s = self.pitch.at(t);
        let w = self.timbre.at(t);
        [
            -10.0 + 3.0 * e,
            15.0 - 3.0 * e,
            20.0 + 15.0 * e,
            5.0 * w,
            3.0 * w * e,
            30.0 + 6.0 * s,
            2.0 + s,
        ]
    }

    fn behavior_row(&self, k: usize, amp: f64, gain: f64) -> [f64; BEHAVIOR_DIM] {
        let mut row = [0.0; BEHAVIOR_DIM];
        let t = k as f64 / FRAME_RATE;
        let g = 0.1 * amp * self.gaze.at(t);
        for c in GAZE_DIR_LEFT.chain(GAZE_DIR_RIGHT) {
            row[c] = g * [1.0, 0.5, -0.2][c % 3];
        }
        row[GAZE_ANGLE.start] = g;
        row[GAZE_ANGLE.start + 1] = 0.5 * g;
        row[HEAD_PITCH] = amp * gain * HEAD_GAIN * self.pitch.frame(k as isize - MOTION_LAG as isize);
        row[HEAD_ROTATION.start + 1] = 0.1 * amp * self.yaw.at(t);
        row[HEAD_ROTATION.start + 2] = 0.03 * amp * self.yaw.at(t + 0.7);
        for (i, c) in AUS.enumerate() {
            row[c] = amp * (0.4 + 0.3 * self.aus[i].at(t));
        }
        // AU12 tracks vocal energy.
        row[AUS.start + 8] = amp * gain * (1.0 + 1.5 * (0.5 + self.energy.frame(k as isize)));
        row
    }
}

fn generate_interaction(cfg: &SynthConfig, index: usize, roles: &[SpeakerRole]) -> Vec<SynthTrack> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let frames = cfg.frames();
    let schedule = turn_schedule(&mut rng, frames, cfg.turn_length_s);
    let source_id = format!("{}{:03}", cfg.id_prefix, index);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let amp = cfg.expressiveness;

    roles
        .iter()
        .map(|&role| {
            let speaker = Speaker::random(&mut rng);
            let parity = match role {
                SpeakerRole::FirstPerson => 0,
                SpeakerRole::SecondPerson => 1,
            };
            let mut speaking = vec![false; frames];
            let mut turns = Vec::new();
            for (i, &(a, b)) in schedule.iter().enumerate() {
                if i % 2 == parity {
                    speaking[a..b].fill(true);
                    turns.push(TurnInterval {
                        start: a as f64 / FRAME_RATE,
                        end: b as f64 / FRAME_RATE,
                    });
                }
            }

            let raw_speech: Vec<RawSpeechRow> = (0..2 * frames)
                .map(|i| {
                    let t = i as f64 / SPEECH_RATE;
                    let mut features = speaker.speech_row(t, speaking[i / 2]);
                    for v in &mut features {
                        *v += cfg.noise_sigma * noise.sample(&mut rng);
                    }
                    RawSpeechRow {
                        timestamp: t,
                        features,
                    }
                })
                .collect();

            let mut behavior = Array2::zeros((frames, BEHAVIOR_DIM));
            for k in (0..frames).filter(|&k| speaking[k]) {
                let row = speaker.behavior_row(k, amp, cfg.coupling_gain);
                for (c, v) in row.into_iter().enumerate() {
                    let v = v + amp * cfg.noise_sigma * noise.sample(&mut rng);
                    behavior[[k, c]] = if AUS.contains(&c) {
                        v.clamp(0.0, 5.0)
                    } else if HEAD_ROTATION.contains(&c) {
                        v.clamp(-0.5, 0.5)
                    } else {
                        v
                    };
                }
            }

            let speech = ingestion::speech_track_from_rows(&raw_speech, &turns, &source_id, role)
                .expect("synthetic speech is well formed");
            let behavior =
                Track::new(behavior, FRAME_RATE, source_id.clone(), role).expect("28 columns");
            let quality = vec![
                FrameQuality {
                    confidence: 0.98,
                    success: true,
                };
                frames
            ];
            SynthTrack {
                source_id: source_id.clone(),
                role,
                raw_speech,
                turns,
                speech,
                behavior,
                quality,
            }
        })
        .collect()
}

/// Generates `n_tracks` speaker tracks, two per interaction. Interactions
/// draw from independent streams of one seeded generator, so the corpus is
/// bit-identical for a given config regardless of thread count.
pub fn generate_corpus(cfg: &SynthConfig) -> Result<Vec<SynthTrack>, SynthError> {
    cfg.validate()?;
    let n_interactions = cfg.n_tracks.div_ceil(2);
    let per = par::map_range(n_interactions, |i| {
        let roles: &[SpeakerRole] = if 2 * i + 1 < cfg.n_tracks {
            &[SpeakerRole::FirstPerson, SpeakerRole::SecondPerson]
        } else {
            &[SpeakerRole::FirstPerson]
        };
        generate_interaction(cfg, i, roles)
    });
    Ok(per.into_iter().flatten().collect())
}

fn write_opensmile(path: &Path, rows: &[RawSpeechRow]) -> Result<(), IngestError> {
    use std::io::Write;
    let io = |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    let names: Vec<String> = SPEECH_BASE_FEATURES
        .iter()
        .enumerate()
        .map(|(j, n)| {
            if j >= 5 {
                format!("{n}_sma3nz")
            } else {
                format!("{n}_sma3")
            }
        })
        .collect();
    writeln!(f, "name;frameTime;{}", names.join(";")).map_err(io)?;
    for r in rows {
        let vals: Vec<String> = r.features.iter().map(|v| v.to_string()).collect();
        writeln!(f, "'unknown';{};{}", r.timestamp, vals.join(";")).map_err(io)?;
    }
    f.flush().map_err(io)
}

fn write_turns(path: &Path, turns: &[TurnInterval]) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["start", "end"])?;
    for t in turns {
        w.write_record([t.start.to_string(), t.end.to_string()])?;
    }
    w.flush().map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes raw-format files under `speech/`, `behavior/` and `turns/` plus a
/// `manifest.csv` that [`ingestion::ingest_manifest`] accepts.
pub fn write_corpus(dir: &Path, corpus: &[SynthTrack]) -> Result<Vec<ManifestEntry>, SynthError> {
    for sub in ["speech", "behavior", "turns"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|source| IngestError::Io { path: p, source })?;
    }
    let entries: Vec<ManifestEntry> = par::try_map_slice(corpus, |tr| {
        let id = format!("{}_{}", tr.source_id, tr.role);
        let speech = PathBuf::from("speech").join(format!("{id}.csv"));
        let behavior = PathBuf::from("behavior").join(format!("{id}.csv"));
        let turns = PathBuf::from("turns").join(format!("{id}.csv"));
        write_opensmile(&dir.join(&speech), &tr.raw_speech)?;
        ingestion::save_behavior_csv(&dir.join(&behavior), &tr.behavior, Some(&tr.quality))?;
        write_turns(&dir.join(&turns), &tr.turns)?;
        Ok::<_, IngestError>(ManifestEntry {
            source_id: tr.source_id.clone(),
            role: tr.role,
            behavior,
            speech,
            turns: Some(turns),
        })
    })?;
    write_manifest(dir.join("manifest.csv"), &entries)?;
    Ok(entries)
}
