//! Versioned little-endian binary containers.
//!
//! Codebook (`LIDC`): magic, `u16` version, `u32` K, `u32` d, `f64` tau,
//! then K*d row-major `f64` values.
//!
//! Checkpoint (`LIDP`): magic, `u16` version, `u32` metadata length, JSON
//! metadata, `u32` tensor count, then per tensor a `u32` name length, the
//! UTF-8 name, `u32` rows, `u32` cols and row-major `f64` values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tensor};
use crate::embedding::PrototypeCodebook;
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::planner::PlannerOptions;
use crate::reasoner::ReasonerParams;
use crate::trainer::Model;

pub const CODEBOOK_MAGIC: [u8; 4] = *b"LIDC";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"LIDP";
pub const FORMAT_VERSION: u16 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Artifact(format!(
                "{} is truncated at byte {} (needed {n} more)",
                self.path.display(),
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Artifact("tensor size overflows".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn header(&mut self, magic: [u8; 4]) -> Result<()> {
        let found = self.take(4).map_err(|_| {
            Error::Artifact(format!("{} is too short to hold a header", self.path.display()))
        })?;
        if found != magic {
            return Err(Error::Artifact(format!(
                "{} has magic {:?}, expected {:?}",
                self.path.display(),
                String::from_utf8_lossy(found),
                String::from_utf8_lossy(&magic)
            )));
        }
        let version = self.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                path: self.path.to_path_buf(),
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Artifact(format!(
                "{} has {} trailing bytes",
                self.path.display(),
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("length fits in u32").to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_codebook(codebook: &PrototypeCodebook) -> Vec<u8> {
    let mut out = Vec::with_capacity(22 + codebook.k() * codebook.dim() * 8);
    out.extend_from_slice(&CODEBOOK_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, codebook.k());
    put_u32(&mut out, codebook.dim());
    out.extend_from_slice(&codebook.temperature.to_le_bytes());
    for p in &codebook.prototypes {
        put_f64s(&mut out, p);
    }
    out
}

/// The seed is not stored; decoded codebooks carry seed 0.
pub fn decode_codebook(bytes: &[u8], path: &Path) -> Result<PrototypeCodebook> {
    let mut r = Reader { buf: bytes, pos: 0, path };
    r.header(CODEBOOK_MAGIC)?;
    let k = r.u32()?;
    let d = r.u32()?;
    let tau = r.f64()?;
    let prototypes = (0..k).map(|_| r.f64s(d)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    PrototypeCodebook::new(prototypes, tau, 0).map_err(|e| Error::Artifact(format!("{}: {e}", path.display())))
}

/// Shape metadata needed to rebuild a [`Model`] before loading values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub dim: usize,
    pub rounds: usize,
    pub static_graph: bool,
    pub services: usize,
    pub horizon: usize,
    pub planner: PlannerOptions,
    /// Hash of the run configuration that produced the checkpoint.
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let meta = serde_json::to_vec(&ck.meta).expect("metadata serializes");
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, meta.len());
    out.extend_from_slice(&meta);
    put_u32(&mut out, ck.tensors.len());
    for (name, t) in &ck.tensors {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rows());
        put_u32(&mut out, t.cols());
        put_f64s(&mut out, t.data());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0, path };
    r.header(CHECKPOINT_MAGIC)?;
    let meta_len = r.u32()?;
    let meta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| Error::Artifact(format!("{}: bad metadata: {e}", path.display())))?;
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let n = r.u32()?;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::Artifact(format!("{}: tensor name is not UTF-8", path.display())))?;
        let rows = r.u32()?;
        let cols = r.u32()?;
        let data = r.f64s(rows * cols)?;
        tensors.push((name, Tensor::new(rows, cols, data)));
    }
    r.finish()?;
    Ok(Checkpoint { meta, tensors })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_codebook(path: &Path, codebook: &PrototypeCodebook) -> Result<()> {
    write_bytes(path, &encode_codebook(codebook))
}

pub fn read_codebook(path: &Path) -> Result<PrototypeCodebook> {
    decode_codebook(&read_bytes(path)?, path)
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_bytes(path, &encode_checkpoint(ck))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_bytes(path)?, path)
}

impl Model {
    pub fn to_checkpoint(&self, env: &Environment, config_hash: &str) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                dim: self.params.value(self.reasoner.w_a).rows(),
                rounds: self.reasoner.rounds,
                static_graph: self.reasoner.static_graph,
                services: env.services,
                horizon: env.horizon,
                planner: self.policy.options,
                config_hash: config_hash.to_string(),
            },
            tensors: self.params.iter().map(|(_, name, t)| (name.to_string(), t.clone())).collect(),
        }
    }

    /// Rebuilds the model skeleton from metadata and loads every tensor by name.
    pub fn from_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(Model, Environment)> {
        let m = &ck.meta;
        let env = Environment::new(m.services, m.horizon);
        let mut reasoner = ReasonerParams::init(m.dim, m.rounds, 0);
        reasoner.static_graph = m.static_graph;
        let mut model = Model::new(&reasoner, &env, m.planner, 0)
            .map_err(|e| Error::Artifact(format!("{}: {e}", path.display())))?;
        load_values(&mut model.params, &ck.tensors, path)?;
        Ok((model, env))
    }
}

fn load_values(params: &mut ParamSet, tensors: &[(String, Tensor)], path: &Path) -> Result<()> {
    if tensors.len() != params.len() {
        return Err(Error::Artifact(format!(
            "{} holds {} tensors, the model has {}",
            path.display(),
            tensors.len(),
            params.len()
        )));
    }
    for (name, t) in tensors {
        let id = params
            .find(name)
            .ok_or_else(|| Error::Artifact(format!("{}: unknown tensor {name}", path.display())))?;
        if params.value(id).shape() != t.shape() {
            return Err(Error::Artifact(format!(
                "{}: tensor {name} has shape {:?}, expected {:?}",
                path.display(),
                t.shape(),
                params.value(id).shape()
            )));
        }
        if !t.all_finite() {
            return Err(Error::Artifact(format!("{}: tensor {name} has non-finite values", path.display())));
        }
        *params.value_mut(id) = t.clone();
    }
    Ok(())
}
