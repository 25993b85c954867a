//! Study layout: criteria blocks, sequences, conditions and video locations.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCALE_MIN: u32 = 0;
pub const SCALE_MAX: u32 = 100;
/// Slider position before the participant touches it.
pub const SCALE_INITIAL: u32 = 50;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid study config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Believability,
    Coordination,
}

impl Criterion {
    /// Block order: believability (muted) first, then coordination with audio.
    pub const ORDER: [Criterion; 2] = [Criterion::Believability, Criterion::Coordination];

    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::Believability => "believability",
            Criterion::Coordination => "coordination",
        }
    }

    /// Believability videos play without sound.
    pub fn muted(self) -> bool {
        self == Criterion::Believability
    }
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Criterion {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "believability" => Ok(Criterion::Believability),
            "coordination" => Ok(Criterion::Coordination),
            other => Err(ConfigError::Invalid(format!("unknown criterion {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub sequences: Vec<String>,
    pub conditions: Vec<String>,
    /// Video URI with `{criterion}`, `{sequence}` and `{condition}` placeholders.
    pub video_uri_template: String,
    pub believability_question: String,
    pub coordination_question: String,
    /// Seeds per-participant page orders.
    pub seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            sequences: (1..=4).map(|i| format!("seq{i}")).collect(),
            conditions: ["GTS", "m1", "m2", "m3"].map(String::from).to_vec(),
            video_uri_template: "/videos/{sequence}/{condition}.mp4".into(),
            believability_question: "How believable is the behavior of the virtual agent?".into(),
            coordination_question:
                "How well is the behavior of the virtual agent coordinated with its speech?".into(),
            seed: 0,
        }
    }
}

fn check_unique(name: &str, items: &[String]) -> Result<(), ConfigError> {
    if items.is_empty() {
        return Err(ConfigError::Invalid(format!("no {name}")));
    }
    let mut seen = std::collections::BTreeSet::new();
    for i in items {
        if i.is_empty() || !seen.insert(i) {
            return Err(ConfigError::Invalid(format!("{name}: empty or duplicate id {i:?}")));
        }
    }
    Ok(())
}

impl StudyConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        check_unique("sequences", &self.sequences)?;
        check_unique("conditions", &self.conditions)?;
        for p in ["{sequence}", "{condition}"] {
            if !self.video_uri_template.contains(p) {
                return Err(ConfigError::Invalid(format!(
                    "video_uri_template lacks {p}, so videos would collide"
                )));
            }
        }
        Ok(())
    }

    pub fn question(&self, c: Criterion) -> &str {
        match c {
            Criterion::Believability => &self.believability_question,
            Criterion::Coordination => &self.coordination_question,
        }
    }

    pub fn video_uri(&self, c: Criterion, sequence: &str, condition: &str) -> String {
        self.video_uri_template
            .replace("{criterion}", c.as_str())
            .replace("{sequence}", sequence)
            .replace("{condition}", condition)
    }

    pub fn page_count(&self) -> usize {
        Criterion::ORDER.len() * self.sequences.len()
    }

    /// Ratings one participant gives over the whole study.
    pub fn slot_count(&self) -> usize {
        self.page_count() * self.conditions.len()
    }
}
