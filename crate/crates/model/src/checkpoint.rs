//! Versioned binary checkpoints.
//!
//! Layout: magic `TFCK`, `u32` version, `u64` header length, a JSON header
//! (architecture, normalization stats, step, tensor table), then every
//! tensor's values as little-endian `f64`, generator first.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};
use talkface_core::NormStats;

use crate::arch::{ArchConfig, ModelError};
use crate::autograd::Tensor;
use crate::discriminator::Discriminator;
use crate::generator::Generator;
use crate::nn::ParamSet;

const MAGIC: &[u8; 4] = b"TFCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    norm_stats: Option<NormStats>,
    step: u64,
    generator: Vec<TensorEntry>,
    discriminator: Vec<TensorEntry>,
}

/// Both networks plus what inference needs to map data in and out of [0, 1].
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub norm_stats: Option<NormStats>,
    pub step: u64,
}

fn table(ps: &ParamSet) -> Vec<TensorEntry> {
    ps.iter()
        .map(|(name, v, trainable)| TensorEntry {
            name: name.to_string(),
            shape: v.shape().to_vec(),
            trainable,
        })
        .collect()
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn arch(&self) -> &ArchConfig {
        self.generator.arch()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        let header = Header {
            arch: self.generator.arch().clone(),
            norm_stats: self.norm_stats.clone(),
            step: self.step,
            generator: table(self.generator.params()),
            discriminator: table(self.discriminator.params()),
        };
        let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for ps in [self.generator.params(), self.discriminator.params()] {
            for (_, v, _) in ps.iter() {
                for x in v.iter() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8], ModelError> {
            if cur.len() < n {
                return Err(bad("truncated file"));
            }
            let (head, rest) = cur.split_at(n);
            cur = rest;
            Ok(head)
        };
        if take(4)? != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(format!(
                "format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let header: Header =
            serde_json::from_slice(take(len)?).map_err(|e| bad(format!("header: {e}")))?;

        let mut generator = Generator::new(header.arch.clone(), 0)?;
        let mut discriminator = Discriminator::new(header.arch.clone(), 0)?;
        let mut read_set = |entries: &[TensorEntry]| -> Result<ParamSet, ModelError> {
            let mut ps = ParamSet::new();
            for e in entries {
                let n: usize = e.shape.iter().product();
                let raw = take(n * 8)?;
                let values: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let t = Tensor::from_shape_vec(IxDyn(&e.shape), values)
                    .map_err(|err| bad(format!("{}: {err}", e.name)))?;
                ps.push(e.name.clone(), t, e.trainable);
            }
            Ok(ps)
        };
        let gp = read_set(&header.generator)?;
        let dp = read_set(&header.discriminator)?;
        if !cur.is_empty() {
            return Err(bad(format!("{} trailing bytes", cur.len())));
        }
        generator.load_params(gp)?;
        discriminator.load_params(dp)?;
        Ok(Self {
            generator,
            discriminator,
            norm_stats: header.norm_stats,
            step: header.step,
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ModelError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
