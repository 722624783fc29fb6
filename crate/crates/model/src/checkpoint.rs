//! Versioned binary checkpoints.
//!
//! Layout: `ALCHCKPT`, `u32` version, `u32`-prefixed config hash, `u32`-prefixed
//! JSON header, then parameters, Adam first and second moments as little-endian
//! `f32`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::optim::OptimizerConfig;
use crate::transformer::ModelConfig;
use crate::ModelError;

pub const MAGIC: &[u8; 8] = b"ALCHCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub seed: u64,
    pub adam_t: u64,
    pub n_params: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub header: CheckpointHeader,
    pub params: Vec<f32>,
    pub adam_m: Vec<f32>,
    pub adam_v: Vec<f32>,
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    out.reserve(xs.len() * 4);
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.buf.len() - self.at < n {
            return Err(ModelError::Checkpoint(format!("truncated at byte {}", self.at)));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, ModelError> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        let header = serde_json::to_vec(&self.header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_hash.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_hash.as_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        put_f32s(&mut out, &self.params);
        put_f32s(&mut out, &self.adam_m);
        put_f32s(&mut out, &self.adam_v);
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, ModelError> {
        let mut r = Reader { buf, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(ModelError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let config_hash = String::from_utf8(r.take(n)?.to_vec()).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let n = r.u32()? as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(n)?).map_err(|e| ModelError::Checkpoint(format!("header: {e}")))?;
        let np = header.n_params;
        let params = r.f32s(np)?;
        let adam_m = r.f32s(np)?;
        let adam_v = r.f32s(np)?;
        if r.at != buf.len() {
            return Err(ModelError::Checkpoint(format!("{} trailing bytes", buf.len() - r.at)));
        }
        Ok(Self {
            config_hash,
            header,
            params,
            adam_m,
            adam_v,
        })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let io = |e: std::io::Error| ModelError::Checkpoint(format!("{}: {e}", path.display()));
        {
            let mut f = fs::File::create(&tmp).map_err(io)?;
            f.write_all(&bytes).map_err(io)?;
            f.sync_all().map_err(io)?;
        }
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut buf = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&buf)
    }
}
