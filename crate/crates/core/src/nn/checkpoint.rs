//! Parameter checkpoint file.
//!
//! ```json
//! {
//!   "format": "distillkit.params",
//!   "version": 1,
//!   "role": "teacher",
//!   "provenance": "9f2c...",
//!   "layers": {
//!     "block0.conv.b": { "shape": [8], "values": [0.0, ...] },
//!     ...
//!   }
//! }
//! ```
//!
//! `provenance` is optional free text, typically the hash of the run that
//! produced the file. `values` are row-major. Numbers are written in shortest round-trip form
//! and parsed with correct rounding, so save → load is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{NetworkParams, Role};
use super::NnError;
use crate::autograd::Tensor;

pub const FORMAT: &str = "distillkit.params";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<String>,
    layers: BTreeMap<String, LayerRecord>,
}

pub fn to_json(params: &NetworkParams) -> Result<String, NnError> {
    to_json_with_provenance(params, None)
}

pub fn to_json_with_provenance(params: &NetworkParams, provenance: Option<&str>) -> Result<String, NnError> {
    let mut layers = BTreeMap::new();
    for (id, t) in &params.tensors {
        if !t.is_finite() {
            return Err(NnError::Checkpoint(format!("{id} holds non-finite values")));
        }
        layers.insert(
            id.clone(),
            LayerRecord {
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            },
        );
    }
    let file = CheckpointFile {
        format: FORMAT.into(),
        version: VERSION,
        role: params.role,
        provenance: provenance.map(str::to_owned),
        layers,
    };
    serde_json::to_string(&file).map_err(|e| NnError::Checkpoint(e.to_string()))
}

pub fn from_json(text: &str) -> Result<NetworkParams, NnError> {
    let file: CheckpointFile =
        serde_json::from_str(text).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    if file.format != FORMAT {
        return Err(NnError::Checkpoint(format!("unknown format `{}`", file.format)));
    }
    if file.version != VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {}", file.version)));
    }
    let mut tensors = BTreeMap::new();
    for (id, rec) in file.layers {
        let t = Tensor::new(rec.shape, rec.values)
            .map_err(|e| NnError::Checkpoint(format!("{id}: {e}")))?;
        tensors.insert(id, t);
    }
    Ok(NetworkParams {
        role: file.role,
        tensors,
    })
}

pub fn save(params: &NetworkParams, path: &Path) -> Result<(), NnError> {
    save_with_provenance(params, path, None)
}

pub fn save_with_provenance(params: &NetworkParams, path: &Path, provenance: Option<&str>) -> Result<(), NnError> {
    std::fs::write(path, to_json_with_provenance(params, provenance)?).map_err(|e| NnError::Io(path.display().to_string(), e.to_string()))
}

pub fn load(path: &Path) -> Result<NetworkParams, NnError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| NnError::Io(path.display().to_string(), e.to_string()))?;
    from_json(&text)
}
