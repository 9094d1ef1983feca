//! Versioned model checkpoints: spec, named tensors, optimizer and RNG state.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{io_err, write_json, DataError, FORMAT_VERSION};
use crate::model::{Model, ModelSpec};
use crate::params::ParamStore;
use crate::scheduler::LrSchedulerState;

pub const CHECKPOINT_FORMAT: &str = "tmn-checkpoint";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Number of completed epochs; the next epoch's streams derive from it.
    pub epoch: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub spec: ModelSpec,
    pub params: ParamStore,
    pub rng: RngState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheduler: Option<LrSchedulerState>,
}

impl Checkpoint {
    pub fn new(model: &Model, rng: RngState, scheduler: Option<LrSchedulerState>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: FORMAT_VERSION,
            spec: model.spec.clone(),
            params: model.store.clone(),
            rng,
            scheduler,
        }
    }

    pub fn model(&self) -> Model {
        Model {
            spec: self.spec.clone(),
            store: self.params.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mismatch = |found: String| DataError::SchemaVersionMismatch {
            path: path.display().to_string(),
            expected: CHECKPOINT_FORMAT,
            version: FORMAT_VERSION,
            found,
        };
        let mut ck: Checkpoint = serde_json::from_str(&text).map_err(|e| {
            if e.is_eof() {
                mismatch("truncated file".into())
            } else {
                DataError::Parse {
                    file: path.display().to_string(),
                    line: e.line(),
                    msg: e.to_string(),
                }
            }
        })?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != FORMAT_VERSION {
            return Err(mismatch(format!("{} version {}", ck.format, ck.version)));
        }
        ck.params.reindex();
        Ok(ck)
    }
}
