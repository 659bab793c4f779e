//! Named-tensor checkpoints with string metadata.
//!
//! Layout (integers little-endian `u32`, values `f64` LE):
//!
//! ```text
//! b"CSCK" | version
//! | n_meta  | (key_len key val_len val) × n_meta
//! | n_tensors | (name_len name ndim dims… values…) × n_tensors
//! | sha256 of everything above
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ssl::{EncoderSpec, EncoderWeights};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CSCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(tensors: Vec<(String, Tensor)>) -> Self {
        Checkpoint {
            metadata: BTreeMap::new(),
            tensors,
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks metadata `{key}`")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))
    }

    /// Tensors under `prefix.`, with the prefix stripped.
    pub fn scoped(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let lead = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(&lead).map(|rest| (rest.to_string(), t.clone())))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, self.metadata.len() as u32);
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            put_u32(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 + DIGEST_LEN {
            return Err(Error::Format(format!("checkpoint truncated at {} bytes", bytes.len())));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Format("checkpoint checksum mismatch (truncated or corrupt)".into()));
        }

        let mut r = Reader { bytes: body, pos: 8 };
        let mut metadata = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            metadata.insert(k, v);
        }
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let count = count.ok_or_else(|| Error::Format(format!("tensor `{name}` shape overflows")))?;
            let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != body.len() {
            return Err(Error::Format(format!("{} trailing bytes in checkpoint", body.len() - r.pos)));
        }
        Ok(Checkpoint { metadata, tensors })
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("checkpoint ends inside a record at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Format("non-UTF-8 string in checkpoint".into()))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

/// Encoder tensors (`0.weight`, `0.bias`, `1.weight`, …) with their layer
/// widths read back from the weight shapes.
pub fn encoder_from_named(tensors: Vec<(String, Tensor)>) -> Result<EncoderWeights> {
    let layers = tensors.len() / 2;
    if layers == 0 || tensors.len() % 2 != 0 {
        return Err(Error::Format(format!("{} tensors do not form weight/bias pairs", tensors.len())));
    }
    let mut dims = Vec::with_capacity(layers + 1);
    for i in 0..layers {
        let (wn, w) = &tensors[2 * i];
        let (bn, _) = &tensors[2 * i + 1];
        if *wn != format!("{i}.weight") || *bn != format!("{i}.bias") {
            return Err(Error::Format(format!("unexpected encoder tensors `{wn}`, `{bn}`")));
        }
        let (out, inp) = w.dims2().map_err(|e| Error::Format(e.to_string()))?;
        if i == 0 {
            dims.push(inp);
        }
        dims.push(out);
    }
    let spec = EncoderSpec {
        input_dim: dims[0],
        hidden_dims: dims[1..layers].to_vec(),
        feature_dim: dims[layers],
    };
    Ok(EncoderWeights { spec, tensors })
}
