//! Architecture configuration and its validation.

use serde::{Deserialize, Serialize};
use talkface_core::domain::{AU_GROUP, GAZE_GROUP, HEAD_GROUP, SPEECH_DIM};
use thiserror::Error;

use crate::noise::NOISE_LEN;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error("{layer}: expected shape {expected:?}, got {got:?}")]
    Shape {
        layer: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn check_shape(layer: &str, expected: &[usize], got: &[usize]) -> Result<(), ModelError> {
    if expected == got {
        Ok(())
    } else {
        Err(ModelError::Shape {
            layer: layer.to_string(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        })
    }
}

/// Encoder blocks in the generator.
pub const ENCODER_BLOCKS: usize = 5;
/// Decoder stages per head.
pub const DECODER_STAGES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub encoder_channels: Vec<usize>,
    pub kernel_size: usize,
    pub dropout_rate: f64,
    pub gaze_channels: usize,
    pub head_channels: usize,
    pub au_channels: usize,
    /// Frames per clip.
    pub seq_len: usize,
    /// Encoder block feeding each decoder stage's skip connection, outermost stage first.
    pub skip_levels: Vec<usize>,
    /// Sigmoid on the critic output.
    pub critic_sigmoid: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            encoder_channels: vec![64, 128, 256, 512, 512],
            kernel_size: 3,
            dropout_rate: 0.2,
            gaze_channels: GAZE_GROUP.len(),
            head_channels: HEAD_GROUP.len(),
            au_channels: AU_GROUP.len(),
            seq_len: 100,
            skip_levels: vec![4, 3, 2, 1],
            critic_sigmoid: true,
        }
    }
}

impl ArchConfig {
    /// Small widths for tests and quick experiments.
    pub fn small() -> Self {
        Self {
            encoder_channels: vec![8, 16, 16, 32, 32],
            ..Self::default()
        }
    }

    pub fn behavior_channels(&self) -> usize {
        self.gaze_channels + self.head_channels + self.au_channels
    }

    /// Channels the noise vector is folded into.
    pub fn noise_channels(&self) -> usize {
        NOISE_LEN / self.seq_len
    }

    pub fn input_channels(&self) -> usize {
        SPEECH_DIM + self.noise_channels()
    }

    /// Output length of each encoder block before its pooling.
    pub fn encoder_lengths(&self) -> [usize; ENCODER_BLOCKS] {
        let mut lens = [self.seq_len; ENCODER_BLOCKS];
        for b in 2..ENCODER_BLOCKS {
            lens[b] = lens[b - 1] / 2;
        }
        lens
    }

    /// Length after the last pooling.
    pub fn bottleneck_len(&self) -> usize {
        self.encoder_lengths()[ENCODER_BLOCKS - 1] / 2
    }

    /// Output width of decoder stage `s`.
    pub fn decoder_width(&self, s: usize) -> usize {
        self.encoder_channels[DECODER_STAGES - 1 - s]
    }

    /// Frames appended after upsampling at each stage so the skip lengths match.
    pub fn decoder_padding(&self) -> Result<[usize; DECODER_STAGES], ModelError> {
        let lens = self.encoder_lengths();
        let mut prev = self.bottleneck_len();
        let mut pads = [0; DECODER_STAGES];
        for (s, &level) in self.skip_levels.iter().enumerate() {
            let skip = *lens.get(level).ok_or_else(|| {
                ModelError::Arch(format!("decoder stage {s}: skip level {level} out of range"))
            })?;
            let up = 2 * prev;
            if skip < up || skip - up > 1 {
                return Err(ModelError::Arch(format!(
                    "decoder stage {s}: skip from encoder block {level} has {skip} frames, upsampled path has {up}"
                )));
            }
            pads[s] = skip - up;
            prev = skip;
        }
        if prev != self.seq_len {
            return Err(ModelError::Arch(format!(
                "decoder ends at {prev} frames, clips have {}",
                self.seq_len
            )));
        }
        Ok(pads)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Arch(m));
        if self.encoder_channels.len() != ENCODER_BLOCKS {
            return bad(format!(
                "{} encoder widths, need {ENCODER_BLOCKS}",
                self.encoder_channels.len()
            ));
        }
        if self.encoder_channels.contains(&0) {
            return bad("encoder widths must be positive".into());
        }
        if self.kernel_size % 2 == 0 {
            return bad(format!("kernel size {} is not odd", self.kernel_size));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        let heads = [
            ("gaze", self.gaze_channels, GAZE_GROUP.len()),
            ("head", self.head_channels, HEAD_GROUP.len()),
            ("au", self.au_channels, AU_GROUP.len()),
        ];
        for (name, got, want) in heads {
            if got != want {
                return bad(format!("{name} head has {got} channels, features need {want}"));
            }
        }
        if self.seq_len == 0 || NOISE_LEN % self.seq_len != 0 {
            return bad(format!(
                "seq_len {} does not divide the noise length {NOISE_LEN}",
                self.seq_len
            ));
        }
        if self.bottleneck_len() == 0 {
            return bad(format!("seq_len {} too short for four poolings", self.seq_len));
        }
        if self.skip_levels.len() != DECODER_STAGES {
            return bad(format!(
                "{} skip levels, need {DECODER_STAGES}",
                self.skip_levels.len()
            ));
        }
        self.decoder_padding().map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        let a = ArchConfig::default();
        a.validate().unwrap();
        assert_eq!(a.encoder_lengths(), [100, 100, 50, 25, 12]);
        assert_eq!(a.bottleneck_len(), 6);
        assert_eq!(a.decoder_padding().unwrap(), [0, 1, 0, 0]);
        assert_eq!(a.behavior_channels(), 28);
        assert_eq!(a.input_channels(), 24);
    }

    #[test]
    fn mismatched_skip_rejected() {
        let a = ArchConfig {
            skip_levels: vec![3, 3, 2, 1],
            ..ArchConfig::default()
        };
        let err = a.validate().unwrap_err().to_string();
        assert!(err.contains("decoder stage 0"), "{err}");
    }

    #[test]
    fn other_lengths() {
        for len in [40, 200] {
            let a = ArchConfig {
                seq_len: len,
                ..ArchConfig::small()
            };
            a.validate().unwrap();
        }
        let a = ArchConfig {
            seq_len: 8,
            ..ArchConfig::small()
        };
        assert!(a.validate().is_err());
    }

    #[test]
    fn field_checks() {
        let cases = [
            ArchConfig { kernel_size: 4, ..ArchConfig::default() },
            ArchConfig { dropout_rate: 1.0, ..ArchConfig::default() },
            ArchConfig { au_channels: 16, ..ArchConfig::default() },
            ArchConfig { encoder_channels: vec![8; 4], ..ArchConfig::default() },
            ArchConfig { seq_len: 30, ..ArchConfig::default() },
        ];
        for c in cases {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }
}
