//! Versioned JSON checkpoints. Floats are written in shortest round-trip
//! form and parsed exactly, so save/load reproduces every weight bit for
//! bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, Task, TrainConfig};
use crate::error::{Error, Result};

pub const FORMAT: &str = "kgc-forge-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub task: Task,
    pub config: TrainConfig,
    pub model: Model,
}

impl Checkpoint {
    pub fn new(task: Task, config: TrainConfig, model: Model) -> Self {
        Checkpoint {
            format: FORMAT.to_owned(),
            version: VERSION,
            task,
            config,
            model,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Checkpoint> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != FORMAT {
            return Err(Error::Checkpoint(format!(
                "unknown format {:?}",
                ckpt.format
            )));
        }
        if ckpt.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {}",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::Matrix;
    use crate::scorers::embedding::{EmbeddingModel, EmbeddingState, Norm};
    use crate::scorers::{EmbeddingLoss, ScorerKind};
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in prop::collection::vec(-1e6f64..1e6, 6)) {
            let tiny: Vec<f64> = values.iter().map(|v| v * 1e-300).collect();
            let state = EmbeddingState {
                model: EmbeddingModel::Transe,
                entity_vectors: Matrix { rows: 2, cols: 3, data: values },
                relation_vectors: Matrix { rows: 2, cols: 3, data: tiny },
                norm: Norm::L1,
                margin: 0.1 + 0.2,
                loss: EmbeddingLoss::Margin,
            };
            let ckpt = Checkpoint::new(Task::Lp, TrainConfig::embedding(ScorerKind::Transe), Model::Transe(state));
            let back = Checkpoint::from_json(&ckpt.to_json().unwrap()).unwrap();
            let (Model::Transe(a), Model::Transe(b)) = (&ckpt.model, &back.model) else { panic!() };
            let bits = |m: &Matrix| m.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a.entity_vectors), bits(&b.entity_vectors));
            prop_assert_eq!(bits(&a.relation_vectors), bits(&b.relation_vectors));
            prop_assert_eq!(ckpt, back);
        }
    }

    #[test]
    fn rejects_foreign_files() {
        assert!(Checkpoint::from_json(r#"{"format":"other"}"#).is_err());
    }
}
