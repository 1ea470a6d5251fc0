//! Binary checkpoint format.
//!
//! ```text
//! magic        8 bytes  "SEGFCKPT"
//! version      u32
//! depth, base_channels, num_classes, input_size   u32 each
//! records      u32
//! per record:  name_len u32, name (utf-8), rank u32, extents u32 * rank,
//!              values f32 * product(extents)
//! ```
//!
//! All integers and floats are little-endian.  Running batch-norm moments are
//! stored as `<layer>.running_mean` and `<layer>.running_var` records.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{ModelConfig, ModelError, ModelWeights};
use crate::tensor::{RunningMoments, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SEGFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_RECORDS: usize = 1 << 16;
const MAX_NAME: usize = 256;
const MAX_RANK: usize = 4;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(
        "checkpoint parameter names do not match the model ({} missing{}, {} unexpected{})",
        missing.len(), preview(missing), unexpected.len(), preview(unexpected)
    )]
    NameSetMismatch {
        missing: Vec<String>,
        unexpected: Vec<String>,
    },
    #[error("checkpoint tensor `{name}` has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint was written for {found:?}, requested {expected:?}")]
    ConfigMismatch {
        expected: ModelConfig,
        found: ModelConfig,
    },
}

fn preview(names: &[String]) -> String {
    match names {
        [] => String::new(),
        [a] => format!(": {a}"),
        [a, b] => format!(": {a}, {b}"),
        [a, b, ..] => format!(": {a}, {b}, ..."),
    }
}

/// Decoded checkpoint contents, not yet matched against a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub records: Vec<(String, Vec<usize>, Vec<f32>)>,
}

pub fn encode_checkpoint(weights: &ModelWeights<f32>) -> Vec<u8> {
    let cfg = weights.config();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let put = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    put(&mut out, CHECKPOINT_VERSION as usize);
    for v in [cfg.depth, cfg.base_channels, cfg.num_classes, cfg.input_size] {
        put(&mut out, v);
    }
    let mut records: Vec<(String, Vec<usize>, &[f32])> = weights
        .params()
        .iter()
        .map(|(k, t)| (k.clone(), t.shape().to_vec(), t.data()))
        .collect();
    for (name, m) in weights.moments() {
        records.push((format!("{name}.running_mean"), vec![m.mean.len()], &m.mean));
        records.push((format!("{name}.running_var"), vec![m.var.len()], &m.var));
    }
    records.sort_by(|a, b| a.0.cmp(&b.0));
    put(&mut out, records.len());
    for (name, shape, values) in records {
        put(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put(&mut out, shape.len());
        for e in shape {
            put(&mut out, e);
        }
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated { offset: self.bytes.len() })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader { bytes, pos: 8 };
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let config = ModelConfig {
        depth: r.u32()?,
        base_channels: r.u32()?,
        num_classes: r.u32()?,
        input_size: r.u32()?,
    };
    let count = r.u32()?;
    if count > MAX_RECORDS {
        return Err(CheckpointError::Malformed(format!("{count} records")));
    }
    let mut records = Vec::with_capacity(count.min(1024));
    let mut seen = BTreeSet::new();
    for _ in 0..count {
        let len = r.u32()?;
        if len == 0 || len > MAX_NAME {
            return Err(CheckpointError::Malformed(format!("name length {len}")));
        }
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Malformed("name is not utf-8".into()))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(CheckpointError::Malformed(format!("duplicate record `{name}`")));
        }
        let rank = r.u32()?;
        if rank == 0 || rank > MAX_RANK {
            return Err(CheckpointError::Malformed(format!("`{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .filter(|&n| n > 0)
            .ok_or_else(|| CheckpointError::Malformed(format!("`{name}` has extents {shape:?}")))?;
        let raw = r.take(n.checked_mul(4).ok_or(CheckpointError::Truncated { offset: bytes.len() })?)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        records.push((name, shape, values));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint { config, records })
}

impl Checkpoint {
    /// Matches the records against the architecture described by `expected`.
    pub fn into_weights(self, expected: &ModelConfig) -> Result<ModelWeights<f32>, ModelError> {
        expected.validate()?;
        let mut want: BTreeMap<String, Vec<usize>> = expected.param_shapes().into_iter().collect();
        for (layer, c) in expected.norm_layers() {
            want.insert(format!("{layer}.running_mean"), vec![c]);
            want.insert(format!("{layer}.running_var"), vec![c]);
        }
        let have: BTreeSet<&String> = self.records.iter().map(|r| &r.0).collect();
        let missing: Vec<String> = want.keys().filter(|k| !have.contains(k)).cloned().collect();
        let unexpected: Vec<String> = have
            .iter()
            .filter(|k| !want.contains_key(k.as_str()))
            .map(|k| k.to_string())
            .collect();
        if !missing.is_empty() || !unexpected.is_empty() {
            return Err(CheckpointError::NameSetMismatch { missing, unexpected }.into());
        }
        if self.config != *expected {
            return Err(CheckpointError::ConfigMismatch {
                expected: *expected,
                found: self.config,
            }
            .into());
        }
        let mut params = BTreeMap::new();
        let mut moments: BTreeMap<String, RunningMoments<f32>> = BTreeMap::new();
        for (name, shape, values) in self.records {
            if want[&name] != shape {
                return Err(CheckpointError::ShapeMismatch {
                    expected: want[&name].clone(),
                    name,
                    found: shape,
                }
                .into());
            }
            if let Some(layer) = name.strip_suffix(".running_mean") {
                moments.entry(layer.to_string()).or_insert_with(|| RunningMoments::new(0)).mean = values;
            } else if let Some(layer) = name.strip_suffix(".running_var") {
                moments.entry(layer.to_string()).or_insert_with(|| RunningMoments::new(0)).var = values;
            } else {
                let t = Tensor::new(shape, values).expect("extents were validated while decoding");
                params.insert(name, t);
            }
        }
        Ok(ModelWeights::from_parts(*expected, params, moments))
    }
}

pub fn save_weights(weights: &ModelWeights<f32>, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(weights)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_weights(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<ModelWeights<f32>, ModelError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)?.into_weights(expected)
}
