//! Run configuration: one TOML file holding every stage's settings.

use serde::{Deserialize, Serialize};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use talkface_core::preprocess::PreprocessConfig;
use talkface_core::synthcorpus::SynthConfig;
use talkface_model::{ArchConfig, TrainConfig};
use talkface_study::StudyConfig;

use crate::CliError;

/// Artifact locations. Relative paths resolve against `root`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub root: PathBuf,
    /// Raw synthetic corpus written by `synth`.
    pub corpus_dir: PathBuf,
    /// Canonical tracks written by `ingest`.
    pub ingested_dir: PathBuf,
    pub clips_dir: PathBuf,
    pub checkpoints_dir: PathBuf,
    pub reports_dir: PathBuf,
    pub records: PathBuf,
    pub videos_dir: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            root: PathBuf::from("."),
            corpus_dir: "corpus".into(),
            ingested_dir: "ingested".into(),
            clips_dir: "clips".into(),
            checkpoints_dir: "checkpoints".into(),
            reports_dir: "reports".into(),
            records: "study/records.ndjson".into(),
            videos_dir: None,
        }
    }
}

impl Paths {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn corpus(&self) -> PathBuf {
        self.resolve(&self.corpus_dir)
    }
    pub fn ingested(&self) -> PathBuf {
        self.resolve(&self.ingested_dir)
    }
    pub fn clips(&self) -> PathBuf {
        self.resolve(&self.clips_dir)
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.resolve(&self.checkpoints_dir)
    }
    pub fn reports(&self) -> PathBuf {
        self.resolve(&self.reports_dir)
    }
    pub fn records_file(&self) -> PathBuf {
        self.resolve(&self.records)
    }
    pub fn videos(&self) -> Option<PathBuf> {
        self.videos_dir.as_deref().map(|p| self.resolve(p))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    /// Corpus directories (each with a `manifest.csv`) merged into one
    /// ingested set. Empty means `paths.corpus_dir`.
    pub corpora: Vec<PathBuf>,
}

/// A generated condition in the evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSpec {
    pub name: String,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub conditions: Vec<ConditionSpec>,
    /// Seeds the noise vectors; every condition sees the same noise.
    pub seed: u64,
    /// Evaluate on the training split instead of the test split.
    pub use_train_split: bool,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            conditions: vec![ConditionSpec {
                name: "m1".into(),
                checkpoint: "checkpoints/final.ckpt".into(),
            }],
            seed: 0,
            use_train_split: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub addr: SocketAddr,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            addr: SocketAddr::from(([127, 0, 0, 1], 8080)),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, replaces every stage seed.
    pub seed: Option<u64>,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub ingest: IngestConfig,
    pub preprocess: PreprocessConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub generate: GenerateConfig,
    pub evaluate: EvaluateConfig,
    pub study: StudyConfig,
    pub serve: ServeConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads a config file; a relative `paths.root` is taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if cfg.paths.root.is_relative() {
            let dir = path.parent().unwrap_or(Path::new(""));
            cfg.paths.root = dir.join(&cfg.paths.root);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    /// Applies command-line overrides, then the global seed.
    pub fn with_overrides(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Self {
        if let Some(out) = out {
            self.paths.root = out;
        }
        if seed.is_some() {
            self.seed = seed;
        }
        if let Some(s) = self.seed {
            self.synth.seed = s;
            self.preprocess.split_seed = s;
            self.train.seed = s;
            self.generate.seed = s;
            self.evaluate.seed = s;
            self.study.seed = s;
        }
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.preprocess.segment_length != self.arch.seq_len {
            return Err(CliError::Config(format!(
                "preprocess.segment_length {} differs from arch.seq_len {}",
                self.preprocess.segment_length, self.arch.seq_len
            )));
        }
        Ok(())
    }
}
