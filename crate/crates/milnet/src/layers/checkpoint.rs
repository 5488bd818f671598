//! Checkpoint files: a JSON manifest (parameter name → shape → byte offset)
//! followed by one raw little-endian `f32` blob.
//!
//! Layout: 8-byte little-endian manifest length, the manifest JSON, then the
//! blob. Save → load → save reproduces the bytes exactly.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// One named tensor of checkpoint state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl StateEntry {
    pub fn from_tensor<E: Element>(name: String, t: &Tensor<E>) -> Self {
        StateEntry {
            name,
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.to_f32()).collect(),
        }
    }

    pub fn from_slice<E: Element>(name: String, values: &[E]) -> Self {
        StateEntry {
            name,
            shape: vec![values.len()],
            data: values.iter().map(|v| v.to_f32()).collect(),
        }
    }

    pub fn to_elements<E: Element>(&self) -> Vec<E> {
        self.data.iter().map(|&v| E::from_f32(v)).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: u64,
}

/// Write entries in the given order.
pub fn save(path: &Path, entries: &[StateEntry]) -> Result<()> {
    let mut manifest = Vec::with_capacity(entries.len());
    let mut offset = 0u64;
    for e in entries {
        manifest.push(ManifestEntry {
            name: e.name.clone(),
            shape: e.shape.clone(),
            offset,
        });
        offset += (e.data.len() * 4) as u64;
    }
    let manifest_bytes = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest encoding: {e}")))?;
    let mut out = Vec::with_capacity(8 + manifest_bytes.len() + offset as usize);
    out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    for e in entries {
        for v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(format!("writing checkpoint {}", path.display()), e))
}

pub fn load(path: &Path) -> Result<Vec<StateEntry>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
    if bytes.len() < 8 {
        return Err(Error::Checkpoint(format!(
            "{}: too short to be a checkpoint",
            path.display()
        )));
    }
    let manifest_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + manifest_len {
        return Err(Error::Checkpoint(format!(
            "{}: truncated manifest",
            path.display()
        )));
    }
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(&bytes[8..8 + manifest_len])
        .map_err(|e| Error::Checkpoint(format!("{}: bad manifest: {e}", path.display())))?;
    let blob = &bytes[8 + manifest_len..];
    let mut entries = Vec::with_capacity(manifest.len());
    for m in manifest {
        let numel: usize = m.shape.iter().product();
        let start = m.offset as usize;
        let end = start + numel * 4;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "{}: `{}` runs past the end of the blob",
                path.display(),
                m.name
            )));
        }
        let data: Vec<f32> = blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push(StateEntry {
            name: m.name,
            shape: m.shape,
            data,
        });
    }
    Ok(entries)
}
