//! Checkpoint container shared by all model kinds.
//!
//! Layout (little-endian):
//!
//! ```text
//! "ELFK" | version u32 | kind (u32 len + UTF-8) | step u64
//! | config snapshot (u32 len + UTF-8 TOML) | n_tensors u32
//! | n_tensors x [ name (u32 len + UTF-8) | ndim u32 | dims u32 x ndim | f32 payload ]
//! | CRC-32 of all preceding bytes
//! ```
//!
//! Optimizer moments are stored as ordinary tensors under `optim.<group>.`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::binfmt::{read_file, unseal, write_atomic, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::nn::NamedTensor;

pub const MAGIC: &[u8; 4] = b"ELFK";
pub const VERSION: u32 = 1;
pub const OPTIM_PREFIX: &str = "optim.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Sfen,
    Tts,
    Fts,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Sfen => "sfen",
            ModelKind::Tts => "tts",
            ModelKind::Fts => "fts",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sfen" => Ok(ModelKind::Sfen),
            "tts" => Ok(ModelKind::Tts),
            "fts" => Ok(ModelKind::Fts),
            other => Err(Error::Format(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub step: u64,
    /// TOML snapshot of the configuration the tensors were built from.
    pub config: String,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.string(self.kind.as_str());
        w.u64(self.step);
        w.string(&self.config);
        w.u32(self.tensors.len() as u32);
        for t in &self.tensors {
            w.string(&t.name);
            w.u32(t.shape.len() as u32);
            for &d in &t.shape {
                w.u32(d as u32);
            }
            w.f32s(&t.data);
        }
        w.seal()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let body = unseal(bytes)?;
        let mut r = ByteReader::new(body);
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                expected: VERSION,
                found: version,
            });
        }
        let kind: ModelKind = r.string()?.parse()?;
        let step = r.u64()?;
        let config = r.string()?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let data = r.f32s(shape.iter().product())?;
            tensors.push(NamedTensor { name, shape, data });
        }
        r.finish()?;
        Ok(Self {
            kind,
            step,
            config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    /// Load and reject checkpoints of another model kind.
    pub fn load_kind(path: &Path, kind: ModelKind) -> Result<Self> {
        let ck = Self::load(path)?;
        ck.expect_kind(kind)?;
        Ok(ck)
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::ModelKind {
                expected: kind.to_string(),
                found: self.kind.to_string(),
            });
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Model parameters, excluding optimizer state.
    pub fn parameters(&self) -> Vec<NamedTensor> {
        self.tensors
            .iter()
            .filter(|t| !t.name.starts_with(OPTIM_PREFIX))
            .cloned()
            .collect()
    }

    pub fn optimizer_state(&self) -> Vec<NamedTensor> {
        self.tensors
            .iter()
            .filter(|t| t.name.starts_with(OPTIM_PREFIX))
            .cloned()
            .collect()
    }
}
