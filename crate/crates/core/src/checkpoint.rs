//! Versioned JSON checkpoint: config echo, tokenizer, named tensors and
//! the frozen context table when one is used.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::context::PretrainedEmbeddings;
use crate::error::{config, Result};
use crate::model::CattModel;
use crate::tensor::Tensor;
use crate::tokenizer::Tokenizer;
use crate::train::ExperimentConfig;

pub const FORMAT: &str = "catt-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ExperimentConfig,
    pub tokenizer: Tokenizer,
    pub params: Vec<NamedTensor>,
    #[serde(default)]
    pub frozen_context: Option<PretrainedEmbeddings>,
}

impl Checkpoint {
    pub fn from_model(model: &CattModel, config: &ExperimentConfig, tokenizer: &Tokenizer) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            config: ExperimentConfig {
                model: model.cfg.clone(),
                ..config.clone()
            },
            tokenizer: tokenizer.clone(),
            params: model
                .store
                .iter()
                .map(|(name, t)| NamedTensor {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                })
                .collect(),
            frozen_context: model.frozen_embeddings().cloned(),
        }
    }

    pub fn to_model(&self) -> Result<CattModel> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(config(format!(
                "unsupported checkpoint {} v{} (expected {FORMAT} v{VERSION})",
                self.format, self.version
            )));
        }
        let mut model = CattModel::new(self.config.model.clone(), self.config.seed, self.frozen_context.clone())?;
        let named: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|p| Ok((p.name.clone(), Tensor::new(p.shape.clone(), p.values.clone())?)))
            .collect::<Result<_>>()?;
        model.store.load_from(&named)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, Variant};

    #[test]
    fn round_trip_is_exact() {
        let mut cfg = ModelConfig::default();
        cfg.variant = Variant::CattAudioLabel;
        cfg.vocab_size = 10;
        let model = CattModel::new(cfg.clone(), 3, None).unwrap();
        let exp = ExperimentConfig {
            model: cfg,
            ..ExperimentConfig::default()
        };
        let tok = Tokenizer::train(&["abc def"], 10).unwrap();
        let ck = Checkpoint::from_model(&model, &exp, &tok);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let m2 = back.to_model().unwrap();
        for ((n1, t1), (n2, t2)) in model.store.iter().zip(m2.store.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1, t2);
        }
    }

    #[test]
    fn wrong_format_rejected() {
        let model = CattModel::new(ModelConfig::default(), 0, None).unwrap();
        let tok = Tokenizer::train(&["ab"], 2).unwrap();
        let mut ck = Checkpoint::from_model(&model, &ExperimentConfig::default(), &tok);
        ck.version = 99;
        assert!(ck.to_model().is_err());
    }
}
