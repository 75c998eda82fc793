//! Single-file model archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"PHDCKPT1\n"
//! u64                  header length in bytes
//! header               UTF-8 TOML: kind, step, conditions, [schedule], [denoiser]
//! u32                  parameter count
//! per parameter:
//!   u32 + bytes        name
//!   u32 + u64 * ndim   shape
//!   f32 * numel        values, row-major
//! ```
//!
//! Loading and re-saving reproduces the input bytes exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{ConditionalDenoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::files;
use crate::nn::ParamStore;
use crate::schedule::{NoiseSchedule, ScheduleParams};

pub const MAGIC: &[u8; 9] = b"PHDCKPT1\n";

/// Which of the two weight sets a trainer keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightKind {
    Live,
    Ema,
}

impl WeightKind {
    pub fn suffix(self) -> &'static str {
        match self {
            WeightKind::Live => "live",
            WeightKind::Ema => "ema",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: WeightKind,
    /// Optimizer steps taken when the weights were saved.
    pub step: u64,
    /// Condition names, indexed by label.
    pub conditions: Vec<String>,
    pub schedule: ScheduleParams,
    pub denoiser: DenoiserConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: ConditionalDenoiser<f32>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated file"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| bad("length overflows"))
    }
}

impl Checkpoint {
    pub fn new(header: CheckpointHeader, model: ConditionalDenoiser<f32>) -> Result<Self> {
        if &header.denoiser != model.config() {
            return Err(bad("header config differs from the model's"));
        }
        if header.conditions.len() != header.denoiser.num_conditions {
            return Err(bad(format!(
                "{} condition names for {} conditions",
                header.conditions.len(),
                header.denoiser.num_conditions
            )));
        }
        Ok(Checkpoint { header, model })
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::from_params(&self.header.schedule)
    }

    /// Label of the condition called `name`.
    pub fn condition_index(&self, name: &str) -> Result<usize> {
        self.header
            .conditions
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Config(format!("unknown condition `{name}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = toml::to_string(&self.header).map_err(|e| bad(e.to_string()))?;
        let mut out = Vec::with_capacity(64 + header.len() + 4 * self.model.params().num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.model.params().len() as u32).to_le_bytes());
        for p in self.model.params().iter() {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let len = r.u64()?;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| bad("header is not UTF-8"))?;
        let header: CheckpointHeader = toml::from_str(text).map_err(|e| bad(format!("header: {e}")))?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let n = r.u32()?;
            let name = std::str::from_utf8(r.take(n)?).map_err(|_| bad("parameter name is not UTF-8"))?;
            let ndim = r.u32()?;
            let shape = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("shape overflows"))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| bad("shape overflows"))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            params.push(name, shape, data);
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes after the last parameter"));
        }
        let model = ConditionalDenoiser::from_params(header.denoiser.clone(), params)?;
        Checkpoint::new(header, model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        files::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = files::read(path)?;
        Checkpoint::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
