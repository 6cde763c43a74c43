//! Parameter checkpoints as versioned JSON.
//!
//! ```json
//! {
//!   "format": "epigraph-nn-checkpoint",
//!   "version": 1,
//!   "metadata": { "task": "target", ... },
//!   "tensors": [ { "name": "policy.gnn.layer0.w1", "shape": [7, 96], "data": [...] } ]
//! }
//! ```
//!
//! `data` is row-major. Floats are written in shortest round-trip form, so a
//! save/load cycle is bit-exact.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::NnError;

pub const FORMAT: &str = "epigraph-nn-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new(metadata: BTreeMap<String, serde_json::Value>) -> Self {
        Self { format: FORMAT.into(), version: VERSION, metadata, tensors: Vec::new() }
    }

    /// Appends every tensor of `params` with `prefix.` prepended to its name.
    pub fn push_params(&mut self, prefix: &str, params: &ParamSet) {
        for (name, t) in params.iter() {
            self.tensors.push(TensorEntry {
                name: format!("{prefix}.{name}"),
                shape: t.shape(),
                data: t.data().to_vec(),
            });
        }
    }

    /// Overwrites `params` from entries named `prefix.<name>`; every
    /// parameter must be present with a matching shape.
    pub fn load_params(&self, prefix: &str, params: &mut ParamSet) -> Result<(), NnError> {
        let index: BTreeMap<&str, &TensorEntry> =
            self.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
        let names: Vec<String> = params.iter().map(|(n, _)| format!("{prefix}.{n}")).collect();
        for (k, name) in names.iter().enumerate() {
            let entry = index
                .get(name.as_str())
                .ok_or_else(|| NnError::Checkpoint(format!("missing tensor {name}")))?;
            let slot = &mut params.tensors_mut()[k];
            if entry.shape != slot.shape() {
                return Err(NnError::Checkpoint(format!(
                    "tensor {name}: shape {:?} in file, {:?} expected",
                    entry.shape,
                    slot.shape()
                )));
            }
            *slot = Tensor::new(entry.shape[0], entry.shape[1], entry.data.clone())?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, NnError> {
        serde_json::to_string(self).map_err(|e| NnError::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, NnError> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        if ck.format != FORMAT {
            return Err(NnError::Checkpoint(format!("unknown format {:?}", ck.format)));
        }
        if ck.version != VERSION {
            return Err(NnError::Checkpoint(format!(
                "unsupported version {} (expected {VERSION})",
                ck.version
            )));
        }
        for e in &ck.tensors {
            if e.data.len() != e.shape[0] * e.shape[1] {
                return Err(NnError::Checkpoint(format!("tensor {} has wrong length", e.name)));
            }
        }
        Ok(ck)
    }
}
