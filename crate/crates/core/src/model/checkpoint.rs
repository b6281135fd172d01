//! Checkpoint container.
//!
//! ```text
//! "TCMKDCKP" | u32 LE manifest length | UTF-8 JSON manifest | f32 LE blocks
//! ```
//!
//! The manifest carries the architecture, training provenance and a tensor
//! directory (name, shape, byte offset into the block area, CRC32 of the
//! block). Tensors are written feature extractor first, in parameter order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchitectureSpec, Model, ModelError, Result, Variant};
use crate::autodiff::{Parameter, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"TCMKDCKP";

/// Where a set of weights came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset_tag: String,
    pub epochs: usize,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    crc32: u32,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    spec: ArchitectureSpec,
    rng_seed: u64,
    provenance: Provenance,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(path: &Path, model: &Model, provenance: &Provenance) -> Result<()> {
    let mut blocks = Vec::new();
    let mut tensors = Vec::new();
    for p in model.parameters() {
        let start = blocks.len();
        for v in p.tensor.values() {
            blocks.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.shape().to_vec(),
            offset: start as u64,
            crc32: crc32fast::hash(&blocks[start..]),
        });
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        spec: model.spec.clone(),
        rng_seed: model.rng_seed,
        provenance: provenance.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| ModelError::Manifest(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + json.len() + blocks.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blocks);
    fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Provenance)> {
    let bytes = fs::read(path)?;
    let actual = bytes.len() as u64;
    if bytes.len() < 12 {
        return Err(ModelError::Truncated { expected: 12, actual });
    }
    if &bytes[..8] != MAGIC {
        return Err(ModelError::Manifest(format!("{}: not a checkpoint (bad magic)", path.display())));
    }
    let json_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let data_start = 12 + json_len;
    if bytes.len() < data_start {
        return Err(ModelError::Truncated {
            expected: data_start as u64,
            actual,
        });
    }
    let manifest: Manifest =
        serde_json::from_slice(&bytes[12..data_start]).map_err(|e| ModelError::Manifest(e.to_string()))?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(ModelError::Version {
            found: manifest.format_version,
            expected: CHECKPOINT_FORMAT_VERSION,
        });
    }
    manifest.spec.validate()?;
    let (fe_shapes, clf_shapes) = manifest.spec.parameter_shapes();
    let expected: Vec<_> = fe_shapes.iter().chain(&clf_shapes).collect();
    if expected.len() != manifest.tensors.len() {
        return Err(ModelError::Manifest(format!(
            "{} tensors stored, architecture has {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    for ((name, shape), entry) in expected.iter().zip(&manifest.tensors) {
        if *name != entry.name {
            return Err(ModelError::Manifest(format!("expected tensor `{name}`, found `{}`", entry.name)));
        }
        if *shape != entry.shape {
            return Err(ModelError::TensorShape {
                name: name.clone(),
                expected: shape.clone(),
                found: entry.shape.clone(),
            });
        }
    }
    let data = &bytes[data_start..];
    let mut params = Vec::with_capacity(expected.len());
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let lo = entry.offset as usize;
        let hi = lo + n * 4;
        if hi > data.len() {
            return Err(ModelError::Truncated {
                expected: (data_start + hi) as u64,
                actual,
            });
        }
        let block = &data[lo..hi];
        let computed = crc32fast::hash(block);
        if computed != entry.crc32 {
            return Err(ModelError::Checksum {
                name: entry.name.clone(),
                stored: entry.crc32,
                computed,
            });
        }
        let values = block
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        params.push(Parameter::new(entry.name.clone(), Tensor::new(entry.shape.clone(), values)?));
    }
    let clf_params = params.split_off(fe_shapes.len());
    let model = Model {
        spec: manifest.spec,
        fe_params: params,
        clf_params,
        rng_seed: manifest.rng_seed,
    };
    Ok((model, manifest.provenance))
}

/// Loads and insists on a variant.
pub fn load_checkpoint_variant(path: &Path, expected: Variant) -> Result<(Model, Provenance)> {
    let (model, prov) = load_checkpoint(path)?;
    model.expect_variant(expected)?;
    Ok((model, prov))
}
