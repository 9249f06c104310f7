//! Self-describing training checkpoints (JSON), written atomically.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ConvNet;
use crate::training::{HyperParams, TrainState};

pub const FORMAT: &str = "erasing-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub step: usize,
    pub hyperparams: HyperParams,
    pub class_names: Vec<String>,
    pub localizer: ConvNet,
    pub adversarial: ConvNet,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState<ConvNet, ConvNet>, class_names: Vec<String>) -> Self {
        Self {
            format: FORMAT.to_string(),
            step: state.step,
            hyperparams: state.hp.clone(),
            class_names,
            localizer: state.localizer.clone(),
            adversarial: state.adversarial.clone(),
        }
    }

    /// Write to a sibling temp file, then rename over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("json.tmp");
        let body = serde_json::to_vec_pretty(self)?;
        fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_slice(&bytes)?;
        if ck.format != FORMAT {
            return Err(Error::invalid(format!("unsupported checkpoint format `{}`", ck.format)));
        }
        ck.localizer.config.validate()?;
        ck.adversarial.config.validate()?;
        Ok(ck)
    }
}
