//! Binary checkpoints of a training run.
//!
//! Layout (all integers little-endian, strings as `u32` length + UTF-8):
//!
//! ```text
//! magic        8 bytes  "ADVNCKPT"
//! version      u32
//! config_hash  string
//! epoch        u64
//! architecture string
//! metadata     string
//! tensors      u32 count, then per tensor:
//!                name string, kind u8 (0 weight, 1 buffer),
//!                ndim u32, dims u64 × ndim, values f64 × numel
//! velocities   u32 count, then per entry: name string, ndim, dims, values
//! rng          seed 32 bytes, stream u64, word_pos u128
//! checksum     32 bytes, SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use advnas_tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Model, ParamRole};
use crate::optim::Sgd;

pub const MAGIC: &[u8; 8] = b"ADVNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor,
}

/// Position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub epoch: u64,
    /// Free text identifying the network, e.g. a genotype.
    pub architecture: String,
    /// Free text, e.g. JSON training curves.
    pub metadata: String,
    pub tensors: Vec<NamedTensor>,
    pub velocities: Vec<(String, Tensor)>,
    pub rng: RngState,
}

/// SHA-256 of a string, as hex.
pub fn hash_text(text: &str) -> String {
    crate::nn::params::hex(&Sha256::digest(text.as_bytes()))
}

impl Checkpoint {
    pub fn capture<M: Model + ?Sized>(
        model: &M,
        sgd: &Sgd,
        rng: &ChaCha8Rng,
        epoch: u64,
        config_hash: String,
        architecture: String,
        metadata: String,
    ) -> Self {
        let store = model.params();
        let tensors = store
            .ids()
            .map(|id| NamedTensor {
                name: store.name(id).to_string(),
                role: store.role(id),
                value: store.get(id).clone(),
            })
            .collect();
        let velocities = sgd
            .velocities()
            .map(|(id, v)| (store.name(id).to_string(), v.clone()))
            .collect();
        Self {
            config_hash,
            epoch,
            architecture,
            metadata,
            tensors,
            velocities,
            rng: RngState::capture(rng),
        }
    }

    /// Copies parameters and velocities into `model` and `sgd` after checking
    /// every name, role and shape; nothing is modified on mismatch.
    pub fn restore_into<M: Model + ?Sized>(&self, model: &mut M, sgd: &mut Sgd) -> Result<ChaCha8Rng> {
        let store = model.params();
        if store.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, network has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (id, t) in store.ids().zip(&self.tensors) {
            if store.name(id) != t.name || store.role(id) != t.role || store.get(id).shape() != t.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` {:?} does not match network tensor `{}` {:?}",
                    t.name,
                    t.value.shape(),
                    store.name(id),
                    store.get(id).shape()
                )));
            }
        }
        let mut vel = Vec::with_capacity(self.velocities.len());
        for (name, v) in &self.velocities {
            let id = store
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("velocity for unknown tensor `{name}`")))?;
            if store.get(id).shape() != v.shape() {
                return Err(Error::Checkpoint(format!("velocity `{name}` has shape {:?}", v.shape())));
            }
            vel.push((id, v.clone()));
        }
        let ids: Vec<_> = store.ids().collect();
        let store = model.params_mut();
        for (id, t) in ids.into_iter().zip(&self.tensors) {
            store.set(id, t.value.clone())?;
        }
        let mut fresh = Sgd::new(sgd.momentum, sgd.weight_decay);
        for (id, v) in vel {
            fresh.set_velocity(id, v);
        }
        *sgd = fresh;
        Ok(self.rng.restore())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut w, &self.config_hash);
        w.extend_from_slice(&self.epoch.to_le_bytes());
        put_str(&mut w, &self.architecture);
        put_str(&mut w, &self.metadata);
        w.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut w, &t.name);
            w.push(match t.role {
                ParamRole::Weight => 0,
                ParamRole::Buffer => 1,
            });
            put_tensor(&mut w, &t.value);
        }
        w.extend_from_slice(&(self.velocities.len() as u32).to_le_bytes());
        for (name, v) in &self.velocities {
            put_str(&mut w, name);
            put_tensor(&mut w, v);
        }
        w.extend_from_slice(&self.rng.seed);
        w.extend_from_slice(&self.rng.stream.to_le_bytes());
        w.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        let digest = Sha256::digest(&w);
        w.extend_from_slice(&digest);
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint format version {version} is not supported (this build reads version {FORMAT_VERSION})"
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch, file is corrupt".into()));
        }
        let mut r = Reader { buf: body, pos: 12 };
        let config_hash = r.string()?;
        let epoch = r.u64()?;
        let architecture = r.string()?;
        let metadata = r.string()?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.string()?;
            let role = match r.take(1)?[0] {
                0 => ParamRole::Weight,
                1 => ParamRole::Buffer,
                k => return Err(r.err(&format!("unknown tensor kind {k}"))),
            };
            let value = r.tensor()?;
            tensors.push(NamedTensor { name, role, value });
        }
        let n = r.u32()? as usize;
        let mut velocities = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.string()?;
            velocities.push((name, r.tensor()?));
        }
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        if r.pos != body.len() {
            return Err(r.err("trailing bytes"));
        }
        Ok(Self {
            config_hash,
            epoch,
            architecture,
            metadata,
            tensors,
            velocities,
            rng: RngState { seed, stream, word_pos },
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    w.extend_from_slice(&(s.len() as u32).to_le_bytes());
    w.extend_from_slice(s.as_bytes());
}

fn put_tensor(w: &mut Vec<u8>, t: &Tensor) {
    w.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        w.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        w.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn err(&self, what: &str) -> Error {
        Error::Checkpoint(format!("{what} at byte {}", self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err("unexpected end of data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        let bytes = self.take(n)?.to_vec();
        String::from_utf8(bytes).map_err(|_| Error::Checkpoint(format!("invalid UTF-8 at byte {at}")))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(self.err(&format!("implausible rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.filter(|n| n.checked_mul(8).is_some_and(|b| b <= self.buf.len() - self.pos));
        let numel = numel.ok_or_else(|| self.err(&format!("tensor shape {shape:?} exceeds the file")))?;
        let data = self
            .take(numel * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Tensor::new(&shape, data)?)
    }
}
