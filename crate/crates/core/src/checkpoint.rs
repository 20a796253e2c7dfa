//! Model checkpoints: `PRCK`, a little-endian u32 version, a u64 manifest
//! length, a JSON manifest (config, tensor names, shapes, offsets), then the
//! parameters as little-endian f32.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParameters};
use crate::nn::Parameters;

pub const MAGIC: &[u8; 4] = b"PRCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    /// Free-form provenance (skeleton name, training step, ...).
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl Manifest {
    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum()
    }
}

/// Serializes a checkpoint to bytes.
pub fn encode(model: &Model, metadata: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload = Vec::with_capacity(model.params.parameter_count() * 4);
    let mut offset = 0;
    model.params.visit("", &mut |name, shape, data| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset,
        });
        offset += data.len();
        for &v in data {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    });
    let manifest = Manifest {
        config: model.config.clone(),
        tensors,
        metadata: metadata.clone(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn read_header(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let rest = &bytes[16..];
    if rest.len() < len {
        return Err(Error::Format("truncated manifest".into()));
    }
    let manifest: Manifest =
        serde_json::from_slice(&rest[..len]).map_err(|e| Error::Format(format!("bad manifest: {e}")))?;
    Ok((manifest, &rest[len..]))
}

/// Parses a checkpoint from bytes.
pub fn decode(bytes: &[u8]) -> Result<(Model, Manifest)> {
    let (manifest, payload) = read_header(bytes)?;
    manifest
        .config
        .validate()
        .map_err(|e| Error::Format(format!("manifest config invalid: {e}")))?;
    let mut params = ModelParameters::zeros(&manifest.config)?;
    let layout = params.layout();
    if layout.len() != manifest.tensors.len() {
        return Err(Error::Format(format!(
            "manifest lists {} tensors, config implies {}",
            manifest.tensors.len(),
            layout.len()
        )));
    }
    let mut expected_offset = 0;
    for ((name, shape), entry) in layout.iter().zip(&manifest.tensors) {
        if name != &entry.name || shape != &entry.shape || entry.offset != expected_offset {
            return Err(Error::Format(format!(
                "tensor {} {:?} at {} does not match expected {name} {shape:?} at {expected_offset}",
                entry.name, entry.shape, entry.offset
            )));
        }
        expected_offset += shape.iter().product::<usize>();
    }
    let count = manifest.parameter_count();
    if payload.len() != count * 4 {
        return Err(Error::Format(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            count * 4
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    params.assign_flat(&values)?;
    if !params.is_finite() {
        return Err(Error::Format("checkpoint contains non-finite values".into()));
    }
    Ok((
        Model {
            config: manifest.config.clone(),
            params,
        },
        manifest,
    ))
}

/// Writes through a temporary file and a rename, so an interrupted save never
/// clobbers the previous checkpoint.
pub fn save_checkpoint(model: &Model, metadata: &BTreeMap<String, String>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode(model, metadata)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, Manifest)> {
    decode(&fs::read(path)?)
}

/// Reads only the manifest.
pub fn inspect_checkpoint(path: impl AsRef<Path>) -> Result<Manifest> {
    Ok(read_header(&fs::read(path)?)?.0)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
