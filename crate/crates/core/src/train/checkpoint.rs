//! Binary checkpoint files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "CTNT" | u32 version | u32 header_len | header JSON (config, train state scalars, provenance)
//! u32 n_params  | n_params  x record
//! u32 n_moments | n_moments x record      (Adam moments, names "m:<param>" / "v:<param>")
//! u32 CRC32 of every preceding byte
//!
//! record := u32 name_len | name (UTF-8) | u32 rank | rank x u32 dim | f32 payload
//! ```

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::adam::AdamState;
use crate::arch::{ModelConfig, ModelParams, NameMismatch};
use crate::error::Result;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CTNT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x} (truncated or corrupted file)")]
    Crc { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("{0}")]
    NameMismatch(NameMismatch),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub build: String,
}

impl Provenance {
    pub fn new(seed: u64) -> Self {
        let build = match option_env!("CTNET_BUILD_ID") {
            Some(id) => format!("ctnet {} ({id})", env!("CARGO_PKG_VERSION")),
            None => format!("ctnet {}", env!("CARGO_PKG_VERSION")),
        };
        Provenance { seed, build }
    }
}

/// Optimizer and schedule position of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub adam: AdamState,
    /// 0-based epoch the next step belongs to.
    pub epoch: usize,
    /// Seed of the run's data and noise streams; with `adam.t` it fixes
    /// every random draw still to come.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub state: Option<TrainState>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    t: u64,
    epoch: usize,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    train: Option<StateHeader>,
    provenance: Provenance,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("checkpoint field fits in u32").to_le_bytes());
}

fn put_record(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank());
    for &d in t.shape() {
        put_u32(out, d);
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            train: self.state.as_ref().map(|s| StateHeader { t: s.adam.t, epoch: s.epoch, seed: s.seed }),
            provenance: self.provenance.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, json.len());
        out.extend_from_slice(&json);
        put_u32(&mut out, self.params.len());
        for (name, t) in self.params.iter() {
            put_record(&mut out, name, t);
        }
        let moments = self.state.as_ref().map_or(&[][..], |s| &s.adam.moments[..]);
        put_u32(&mut out, 2 * moments.len());
        for (name, m, v) in moments {
            put_record(&mut out, &format!("m:{name}"), m);
            put_record(&mut out, &format!("v:{name}"), v);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() >= 8 {
            let found = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
            if found != VERSION {
                return Err(CheckpointError::Version { found });
            }
        }
        if bytes.len() < 12 {
            return Err(CheckpointError::Crc { stored: 0, computed: crc32fast::hash(bytes) });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::Crc { stored, computed });
        }

        let mut r = Reader { buf: body, pos: 8 };
        let hlen = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| CheckpointError::Malformed(format!("header: {e}")))?;
        let n = r.u32()? as usize;
        let mut named = HashMap::with_capacity(n);
        for _ in 0..n {
            let (name, t) = r.record()?;
            if named.insert(name.clone(), t).is_some() {
                return Err(CheckpointError::Malformed(format!("duplicate parameter `{name}`")));
            }
        }
        let params = ModelParams::from_named(&header.config, named).map_err(CheckpointError::NameMismatch)?;

        let nm = r.u32()? as usize;
        let mut moments = HashMap::with_capacity(nm);
        for _ in 0..nm {
            let (name, t) = r.record()?;
            moments.insert(name, t);
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }

        let state = match header.train {
            None => None,
            Some(s) => {
                let mut adam = AdamState::new(&params);
                adam.t = s.t;
                for (name, m, v) in &mut adam.moments {
                    for (prefix, slot) in [("m", m), ("v", v)] {
                        let t = moments.remove(&format!("{prefix}:{name}")).ok_or_else(|| {
                            CheckpointError::Malformed(format!("missing optimizer moment {prefix}:{name}"))
                        })?;
                        if t.shape() != slot.shape() {
                            return Err(CheckpointError::Malformed(format!("moment {prefix}:{name} has wrong shape")));
                        }
                        *slot = t;
                    }
                }
                Some(TrainState { adam, epoch: s.epoch, seed: s.seed })
            }
        };
        if !moments.is_empty() {
            return Err(CheckpointError::Malformed("unexpected optimizer moments".into()));
        }
        Ok(Checkpoint { config: header.config, params, state, provenance: header.provenance })
    }

    /// Fails with a name-diff report when the stored parameters do not fit `expected`.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<(), CheckpointError> {
        let named: HashMap<String, Tensor> = self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        ModelParams::from_named(expected, named).map(|_| ()).map_err(CheckpointError::NameMismatch)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Malformed("record runs past the end of the file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn record(&mut self) -> Result<(String, Tensor), CheckpointError> {
        let len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| CheckpointError::Malformed("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = self.u32()? as usize;
        let dims: Vec<usize> = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<_, _>>()?;
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| CheckpointError::Malformed(format!("`{name}` is too large")))?;
        let raw = self.take(numel.checked_mul(4).ok_or_else(|| CheckpointError::Malformed("overflow".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap()))).collect();
        let t = Tensor::new(dims, data).map_err(|e| CheckpointError::Malformed(format!("`{name}`: {e}")))?;
        Ok((name, t))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    // write-then-rename so an interrupted save never clobbers the last good file
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, ckpt.to_bytes())?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Ok(Checkpoint::from_bytes(&std::fs::read(path)?)?)
}

/// Loads and checks the parameter names against `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    ckpt.check_config(expected)?;
    Ok(ckpt)
}

/// Rounds every value to 32-bit precision, the storage precision of checkpoints.
pub fn round_to_f32(params: &mut ModelParams) {
    for (_, t) in params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = f64::from(*v as f32));
    }
}
