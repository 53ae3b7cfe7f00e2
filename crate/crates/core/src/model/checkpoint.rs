//! JSON checkpoint container.
//!
//! ```json
//! {
//!   "format": "headlab-checkpoint",
//!   "version": 1,
//!   "config": { ...ModelConfig... },
//!   "gates": { "shape": [rows, heads], "data": [...] },
//!   "params": [ { "name": "tok_emb", "shape": [V, d], "data": [...] }, ... ]
//! }
//! ```
//!
//! Numbers are written in shortest round-trip form, so a save/load cycle is
//! bit-exact. Gate rows follow [`super::layer_keys`] order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::Tensor;

use super::{HeadGates, ModelConfig, Seq2SeqModel};

pub const CHECKPOINT_FORMAT: &str = "headlab-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub gates: HeadGates,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Seq2SeqModel) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: model.config().clone(),
            gates: model.gates().clone(),
            params: model
                .params()
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn into_model(self) -> Result<Seq2SeqModel> {
        ensure!(
            self.format == CHECKPOINT_FORMAT,
            Validation,
            "not a checkpoint: format {:?}",
            self.format
        );
        ensure!(
            self.version == CHECKPOINT_VERSION,
            Validation,
            "unsupported checkpoint version {}",
            self.version
        );
        let mut model = Seq2SeqModel::new(self.config, 0)?;
        let names: Vec<&str> = model.params().iter().map(|p| p.name.as_str()).collect();
        ensure!(
            names.len() == self.params.len()
                && names.iter().zip(&self.params).all(|(a, b)| *a == b.name),
            Validation,
            "checkpoint parameter names do not match the configured model"
        );
        let values = self
            .params
            .into_iter()
            .map(|p| Tensor::new(p.shape, p.data))
            .collect::<Result<Vec<_>>>()?;
        model.load_values(values)?;
        model.set_gates(self.gates)?;
        Ok(model)
    }
}

impl Seq2SeqModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&Checkpoint::from_model(self))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        ckpt.into_model()
    }
}
