use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::model::{Model, ModelSpec};
use super::optim::OptimizerKind;
use super::tokens::VocabInfo;
use crate::error::{Error, Result};

pub const CHECKPOINT_SCHEMA: &str = "blrhac.checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorData {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_eval_accuracy: f64,
    pub seed: u64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub eval_accuracy_history: Vec<f64>,
    pub train_loss_history: Vec<f64>,
}

impl TrainingMeta {
    pub fn untrained(seed: u64) -> Self {
        TrainingMeta {
            epochs: 0,
            best_epoch: 0,
            best_eval_accuracy: 0.0,
            seed,
            learning_rate: 0.0,
            optimizer: OptimizerKind::Sgd,
            batch_size: 0,
            eval_accuracy_history: Vec::new(),
            train_loss_history: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointFile {
    pub schema: String,
    pub model: ModelSpec,
    pub vocab: VocabInfo,
    pub params: BTreeMap<String, TensorData>,
    pub training: TrainingMeta,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub training: TrainingMeta,
}

impl Checkpoint {
    pub fn to_file(&self) -> CheckpointFile {
        let params = self
            .model
            .params()
            .iter()
            .map(|(_, name, t)| {
                (
                    name.to_string(),
                    TensorData {
                        shape: [t.nrows(), t.ncols()],
                        data: t.iter().copied().collect(),
                    },
                )
            })
            .collect();
        CheckpointFile {
            schema: CHECKPOINT_SCHEMA.to_string(),
            model: self.model.spec().clone(),
            vocab: VocabInfo::default(),
            params,
            training: self.training.clone(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_json(path, &self.to_file())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file: CheckpointFile = crate::io::read_json(path)?;
        Checkpoint::try_from(file)
    }
}

impl TryFrom<CheckpointFile> for Checkpoint {
    type Error = Error;

    fn try_from(file: CheckpointFile) -> Result<Self> {
        if file.schema != CHECKPOINT_SCHEMA {
            return Err(Error::Config(format!(
                "unsupported checkpoint schema `{}`",
                file.schema
            )));
        }
        if file.vocab != VocabInfo::default() {
            return Err(Error::Config("checkpoint vocabulary does not match".into()));
        }
        let mut named = Vec::with_capacity(file.params.len());
        for (name, t) in file.params {
            let [r, c] = t.shape;
            if r.checked_mul(c) != Some(t.data.len()) {
                return Err(Error::DimensionMismatch(format!(
                    "parameter `{name}` data/shape mismatch"
                )));
            }
            let arr = Array2::from_shape_vec((r, c), t.data)
                .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
            named.push((name, arr));
        }
        let model = Model::from_named(file.model, named)?;
        Ok(Checkpoint {
            model,
            training: file.training,
        })
    }
}
