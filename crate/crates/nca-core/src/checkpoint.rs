//! Checkpoint serialization shared by both trainers.
//!
//! One JSON header line declares the format version, model kind,
//! dimensions and the name and shape of every tensor; a newline; then
//! all tensors concatenated as little-endian 32-bit floats in the
//! header-declared order. Writing is fully deterministic, so identical
//! training runs produce byte-identical files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Nca,
    Ganca,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: CheckpointKind,
    #[serde(rename = "D")]
    depth: usize,
    #[serde(rename = "F")]
    hidden: usize,
    shapes: Vec<(String, Vec<usize>)>,
    adam_step: u64,
}

/// An ordered bundle of named tensors plus model metadata.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub depth: usize,
    pub hidden: usize,
    pub adam_step: u64,
    tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: CheckpointKind, depth: usize, hidden: usize, adam_step: u64) -> Self {
        Checkpoint {
            kind,
            depth,
            hidden,
            adam_step,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::config(format!("checkpoint is missing tensor {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            version: CHECKPOINT_VERSION,
            kind: self.kind,
            depth: self.depth,
            hidden: self.hidden,
            shapes: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), t.shape.clone()))
                .collect(),
            adam_step: self.adam_step,
        };
        let mut bytes = serde_json::to_vec(&header).expect("header serializes");
        bytes.push(b'\n');
        for (_, t) in &self.tensors {
            for v in &t.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::config(format!("{}: not a checkpoint", path.display())))?;
        let header: Header = serde_json::from_slice(&bytes[..nl]).map_err(|e| {
            Error::config(format!("{}: invalid checkpoint header: {e}", path.display()))
        })?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::config(format!(
                "{}: unsupported checkpoint version {}",
                path.display(),
                header.version
            )));
        }
        let blob = &bytes[nl + 1..];
        let expected: usize = header
            .shapes
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        if blob.len() != expected * 4 {
            return Err(Error::config(format!(
                "{}: payload is {} bytes, header declares {}",
                path.display(),
                blob.len(),
                expected * 4
            )));
        }
        let mut tensors = Vec::with_capacity(header.shapes.len());
        let mut off = 0;
        for (name, shape) in header.shapes {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = blob[off..off + n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            off += n * 4;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint {
            kind: header.kind,
            depth: header.depth,
            hidden: header.hidden,
            adam_step: header.adam_step,
            tensors,
        })
    }
}
