//! Binary checkpoints for supervisor models and lower-agent policy tables.
//!
//! Both formats are little-endian and start with a 4-byte magic, a `u32`
//! version and a length-prefixed JSON header. See `docs/formats.md` for the
//! byte layout.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use imf_core::agents::{AgentPolicy, AgentSpec, LowerSystems, LowerTrainConfig};
use imf_core::nn::Tensor;
use imf_core::supervisor::{ModelMeta, SupervisorModel};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MODEL_MAGIC: [u8; 4] = *b"IMFC";
pub const POLICY_MAGIC: [u8; 4] = *b"IMFQ";
pub const FORMAT_VERSION: u32 = 1;

// Guards against allocating from a corrupt length field.
const MAX_HEADER: u32 = 16 << 20;
const MAX_RANK: u32 = 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a {expected} file (bad magic)")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("corrupt header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>, CheckpointError> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf)?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let mut b = [0u8; 4];
        self.inner.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        let mut b = [0u8; 8];
        self.inner.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.bytes(n.checked_mul(8).ok_or_else(|| CheckpointError::Corrupt("length overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn preamble(&mut self, magic: [u8; 4], name: &'static str) -> Result<Vec<u8>, CheckpointError> {
        if self.bytes(4)? != magic {
            return Err(CheckpointError::BadMagic { expected: name });
        }
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(CheckpointError::Version(v));
        }
        let n = self.u32()?;
        if n > MAX_HEADER {
            return Err(CheckpointError::Corrupt(format!("header length {n}")));
        }
        self.bytes(n as usize)
    }

    fn finish(mut self) -> Result<(), CheckpointError> {
        let mut rest = [0u8; 1];
        match self.inner.read(&mut rest)? {
            0 => Ok(()),
            _ => Err(CheckpointError::Corrupt("trailing bytes".into())),
        }
    }
}

fn write_preamble(out: &mut Vec<u8>, magic: [u8; 4], header: &[u8]) {
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
}

fn put_f64s(out: &mut Vec<u8>, data: &[f64]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_model(model: &SupervisorModel) -> Vec<u8> {
    let mut out = Vec::new();
    let header = serde_json::to_vec(&model.meta).expect("model meta serializes");
    write_preamble(&mut out, MODEL_MAGIC, &header);
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (name, t) in model.store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for d in &t.shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        put_f64s(&mut out, &t.data);
    }
    out
}

/// Rebuilds the architecture from the header, then checks that every stored
/// tensor matches it by name and shape before loading the values.
pub fn decode_model(bytes: &[u8]) -> Result<SupervisorModel, CheckpointError> {
    let mut r = Reader { inner: bytes };
    let meta: ModelMeta = serde_json::from_slice(&r.preamble(MODEL_MAGIC, "model checkpoint")?)?;
    let mut model = SupervisorModel::new(meta);
    let count = r.u32()? as usize;
    if count != model.store.len() {
        return Err(CheckpointError::Corrupt(format!("{count} tensors, architecture has {}", model.store.len())));
    }
    let expected: Vec<(String, Vec<usize>)> =
        model.store.iter().map(|(n, t)| (n.to_string(), t.shape.clone())).collect();
    let mut tensors = Vec::with_capacity(count);
    for (want_name, want_shape) in expected {
        let len = r.u32()?;
        if len > MAX_HEADER {
            return Err(CheckpointError::Corrupt("name length".into()));
        }
        let name = String::from_utf8(r.bytes(len as usize)?).map_err(|_| CheckpointError::Corrupt("name is not UTF-8".into()))?;
        if name != want_name {
            return Err(CheckpointError::Corrupt(format!("tensor `{name}` where `{want_name}` was expected")));
        }
        let rank = r.u32()?;
        if rank > MAX_RANK {
            return Err(CheckpointError::Corrupt(format!("rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        if shape != want_shape {
            return Err(CheckpointError::Corrupt(format!("tensor `{name}` has shape {shape:?}, expected {want_shape:?}")));
        }
        let n = shape.iter().product();
        let data = r.f64s(n)?;
        tensors.push(Tensor::from_vec(&shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?);
    }
    r.finish()?;
    model.store.load(tensors).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    Ok(model)
}

#[derive(Serialize, Deserialize)]
struct PolicyHeader {
    specs: Vec<AgentSpec>,
    train: LowerTrainConfig,
    seed: u64,
    tables: Vec<TableShape>,
}

#[derive(Serialize, Deserialize)]
struct TableShape {
    knobs: usize,
    actions: usize,
}

pub fn encode_policies(lower: &LowerSystems) -> Vec<u8> {
    let header = PolicyHeader {
        specs: lower.specs.clone(),
        train: lower.train,
        seed: lower.seed,
        tables: lower.policies.iter().map(|p| TableShape { knobs: p.knobs, actions: p.actions }).collect(),
    };
    let mut out = Vec::new();
    write_preamble(&mut out, POLICY_MAGIC, &serde_json::to_vec(&header).expect("policy header serializes"));
    for p in &lower.policies {
        put_f64s(&mut out, &p.q);
    }
    out
}

pub fn decode_policies(bytes: &[u8]) -> Result<LowerSystems, CheckpointError> {
    let mut r = Reader { inner: bytes };
    let header: PolicyHeader = serde_json::from_slice(&r.preamble(POLICY_MAGIC, "policy table")?)?;
    if header.specs.len() != header.tables.len() {
        return Err(CheckpointError::Corrupt("one table per agent expected".into()));
    }
    let mut policies = Vec::with_capacity(header.tables.len());
    for (spec, shape) in header.specs.iter().zip(&header.tables) {
        if shape.actions != spec.arity || shape.knobs == 0 {
            return Err(CheckpointError::Corrupt(format!("table shape of agent `{}`", spec.id)));
        }
        let mut p = AgentPolicy::new(shape.knobs, shape.actions);
        let n = p.q.len();
        p.q = r.f64s(n)?;
        policies.push(p);
    }
    r.finish()?;
    Ok(LowerSystems { specs: header.specs, policies, train: header.train, seed: header.seed })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn save_model(path: &Path, model: &SupervisorModel) -> Result<(), CheckpointError> {
    write_atomic(path, &encode_model(model))
}

pub fn load_model(path: &Path) -> Result<SupervisorModel, CheckpointError> {
    decode_model(&fs::read(path)?)
}

pub fn save_policies(path: &Path, lower: &LowerSystems) -> Result<(), CheckpointError> {
    write_atomic(path, &encode_policies(lower))
}

pub fn load_policies(path: &Path) -> Result<LowerSystems, CheckpointError> {
    decode_policies(&fs::read(path)?)
}
