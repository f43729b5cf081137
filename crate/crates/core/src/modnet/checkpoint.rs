//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes   "D2RCKPT\0"
//! version  u32
//! manifest u64 length + JSON
//! count    u64
//! tensor   u32 name length + UTF-8 name, u64 rows, u64 cols, rows·cols f64
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a round trip is bit-exact.

use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PolicyShape;
use crate::diffcore::{Matrix, ParamStore};

pub const MAGIC: &[u8; 8] = b"D2RCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (this build reads version {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("checkpoint has no tensor named {0:?}")]
    MissingTensor(String),
    #[error("tensor {name:?} is {found:?} in the checkpoint but {expected:?} in the network")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("checkpoint is corrupt: {0}")]
    Corrupt(String),
}

/// Describes the networks stored in a checkpoint and the run that made them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub crate_version: String,
    pub shape: PolicyShape,
    pub k: usize,
    /// Hex SHA-256 of the canonical config text.
    pub config_hash: String,
    /// The canonical config text itself.
    pub config: String,
    pub env_steps: u64,
    pub train_steps: u64,
}

impl Manifest {
    pub fn new(shape: PolicyShape, k: usize, config: String, config_hash: String) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            shape,
            k,
            config_hash,
            config,
            env_steps: 0,
            train_steps: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn new(manifest: Manifest) -> Self {
        Self {
            manifest,
            tensors: Vec::new(),
        }
    }

    /// Appends every tensor of `store` under `prefix/name`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.names().iter().zip(store.tensors()) {
            self.tensors.push((format!("{prefix}/{name}"), t.clone()));
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Matrix) {
        self.tensors.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Result<&Matrix, CheckpointError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))
    }

    /// Overwrites every tensor of `store` from `prefix/name`, checking shapes.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore) -> Result<(), CheckpointError> {
        let names: Vec<String> = store.names().to_vec();
        for (name, dst) in names.iter().zip(store.tensors_mut()) {
            let full = format!("{prefix}/{name}");
            let src = self.get(&full)?;
            if (src.rows(), src.cols()) != (dst.rows(), dst.cols()) {
                return Err(CheckpointError::ShapeMismatch {
                    name: full,
                    expected: (dst.rows(), dst.cols()),
                    found: (src.rows(), src.cols()),
                });
            }
            *dst = src.clone();
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let manifest = serde_json::to_vec(&self.manifest)?;
        w.write_all(&(manifest.len() as u64).to_le_bytes())?;
        w.write_all(&manifest)?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rows() as u64).to_le_bytes())?;
            w.write_all(&(t.cols() as u64).to_le_bytes())?;
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let len = read_len(&mut r, "manifest length")?;
        let mut manifest = vec![0u8; len];
        r.read_exact(&mut manifest)?;
        let manifest: Manifest = serde_json::from_slice(&manifest)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: manifest.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let count = read_len(&mut r, "tensor count")?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name =
                String::from_utf8(name).map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?;
            let rows = read_len(&mut r, "rows")?;
            let cols = read_len(&mut r, "cols")?;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| CheckpointError::Corrupt(format!("tensor {name:?} is too large")))?;
            let mut data = Vec::with_capacity(n.min(1 << 24));
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            tensors.push((name, Matrix::from_vec(rows, cols, data)));
        }
        Ok(Self { manifest, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        // write to a sibling file first so a crash never leaves a torn checkpoint
        let tmp = path.with_extension("tmp");
        self.write_to(BufWriter::new(fs::File::create(&tmp)?))?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::read_from(BufReader::new(fs::File::open(path)?))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_len<R: Read>(r: &mut R, what: &str) -> Result<usize, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    usize::try_from(u64::from_le_bytes(b))
        .map_err(|_| CheckpointError::Corrupt(format!("{what} does not fit in memory")))
}
