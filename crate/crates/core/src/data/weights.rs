//! The LSNW weights/checkpoint file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "LSNW" | u32 version | u32 tensor_count
//! per tensor: u32 name_len | name (UTF-8) | u32 rank | u32 dims[rank]
//!             | f32 data[product(dims)]
//! optional:   "META" | u32 payload_len | payload
//! payload v1: u32 meta_version | u32 epoch | u32 phase | u64 seed
//!             | u32 spec_len | network spec JSON
//! ```
//!
//! Round trips are bit-exact; unknown versions, bad magic, truncation, and
//! duplicate tensor names are rejected.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::resnet::NetworkSpec;
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: [u8; 4] = *b"LSNW";
pub const WEIGHTS_VERSION: u32 = 1;
const META_MAGIC: [u8; 4] = *b"META";
const META_VERSION: u32 = 1;

/// Trailing checkpoint metadata: where training stood and how to rebuild
/// the network.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    /// Epochs completed within the current phase.
    pub epoch: u32,
    /// Training phase index (1-based; 0 for plain model files).
    pub phase: u32,
    /// Base seed all training streams derive from.
    pub seed: u64,
    pub spec: NetworkSpec,
}

#[derive(Debug, Clone)]
pub struct WeightsFile {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub meta: Option<CheckpointMeta>,
}

pub fn save_weights(path: impl AsRef<Path>, file: &WeightsFile) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    out.extend_from_slice(&WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    let count = u32::try_from(file.tensors.len())
        .map_err(|_| Error::Format("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());

    let mut names = HashSet::new();
    for (name, tensor) in &file.tensors {
        if !names.insert(name.as_str()) {
            return Err(Error::Format(format!("duplicate tensor name {name:?}")));
        }
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    if let Some(meta) = &file.meta {
        let spec_json = serde_json::to_vec(&meta.spec)
            .map_err(|e| Error::Format(format!("spec serialization: {e}")))?;
        let mut payload = Vec::new();
        payload.extend_from_slice(&META_VERSION.to_le_bytes());
        payload.extend_from_slice(&meta.epoch.to_le_bytes());
        payload.extend_from_slice(&meta.phase.to_le_bytes());
        payload.extend_from_slice(&meta.seed.to_le_bytes());
        payload.extend_from_slice(&(spec_json.len() as u32).to_le_bytes());
        payload.extend_from_slice(&spec_json);
        out.extend_from_slice(&META_MAGIC);
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&payload);
    }

    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn fail(&self, msg: &str) -> Error {
        Error::Format(format!("{}: {msg}", self.path.display()))
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.fail(&format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightsFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if c.take(4, "magic")? != WEIGHTS_MAGIC {
        return Err(c.fail("bad magic, not an LSNW weights file"));
    }
    let version = c.u32("version")?;
    if version != WEIGHTS_VERSION {
        return Err(c.fail(&format!(
            "unsupported format version {version} (supported: {WEIGHTS_VERSION})"
        )));
    }
    let count = c.u32("tensor count")?;
    let mut tensors = Vec::with_capacity(count as usize);
    let mut names = HashSet::new();
    for _ in 0..count {
        let name_len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "tensor name")?)
            .map_err(|_| c.fail("tensor name is not UTF-8"))?
            .to_string();
        if !names.insert(name.clone()) {
            return Err(c.fail(&format!("duplicate tensor name {name:?}")));
        }
        let rank = c.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u32("dimension")? as usize);
        }
        let len: usize = dims.iter().product();
        let raw = c.take(len * 4, &format!("data of {name:?}"))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push((
            name.clone(),
            Tensor::new(dims, data)
                .map_err(|e| c.fail(&format!("tensor {name:?}: {e}")))?,
        ));
    }

    let meta = if c.remaining() > 0 {
        if c.take(4, "metadata magic")? != META_MAGIC {
            return Err(c.fail("trailing bytes are not a metadata block"));
        }
        let payload_len = c.u32("metadata length")? as usize;
        if c.remaining() != payload_len {
            return Err(c.fail("metadata length does not match remaining bytes"));
        }
        let meta_version = c.u32("metadata version")?;
        if meta_version != META_VERSION {
            return Err(c.fail(&format!("unsupported metadata version {meta_version}")));
        }
        let epoch = c.u32("epoch")?;
        let phase = c.u32("phase")?;
        let seed = c.u64("seed")?;
        let spec_len = c.u32("spec length")? as usize;
        let spec_bytes = c.take(spec_len, "network spec")?;
        let spec: NetworkSpec = serde_json::from_slice(spec_bytes)
            .map_err(|e| c.fail(&format!("network spec: {e}")))?;
        if c.remaining() != 0 {
            return Err(c.fail("trailing bytes after metadata"));
        }
        Some(CheckpointMeta {
            epoch,
            phase,
            seed,
            spec,
        })
    } else {
        None
    };

    Ok(WeightsFile { tensors, meta })
}
