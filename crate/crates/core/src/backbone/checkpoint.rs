use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::data::PreprocessConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const METADATA_KEY: &str = "morphoclass";
const MODEL_PREFIX: &str = "model.";
const OPTIMIZER_PREFIX: &str = "optimizer.";

/// Bookkeeping needed to resume or audit a fit. Shuffles and augmentation
/// are pure functions of `(seed, epoch)`, so the seed is the whole RNG state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub epoch: usize,
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    pub epochs_since_improvement: usize,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model_config: ModelConfig,
    #[serde(default)]
    preprocess: Option<PreprocessConfig>,
    state: TrainingState,
}

/// A safetensors container: model tensors under `model.`, optimizer
/// buffers under `optimizer.`, and one JSON metadata entry holding the
/// format version, the model config and the training state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    /// Input pipeline the parameters were trained with.
    pub preprocess: Option<PreprocessConfig>,
    pub model: BTreeMap<String, Tensor>,
    pub optimizer: BTreeMap<String, Tensor>,
    pub state: TrainingState,
}

impl Checkpoint {
    pub fn capture(model: &Model, optimizer: BTreeMap<String, Tensor>, state: TrainingState) -> Result<Self> {
        Ok(Self {
            model_config: model.config().clone(),
            preprocess: None,
            model: model.state_tensors()?.into_iter().collect(),
            optimizer,
            state,
        })
    }

    pub fn with_preprocess(mut self, preprocess: PreprocessConfig) -> Self {
        self.preprocess = Some(preprocess);
        self
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model_config: self.model_config.clone(),
            preprocess: self.preprocess.clone(),
            state: self.state.clone(),
        };
        let meta = HashMap::from([(METADATA_KEY.to_string(), serde_json::to_string(&header)?)]);
        let tensors: Vec<(String, &Tensor)> = self
            .model
            .iter()
            .map(|(n, t)| (format!("{MODEL_PREFIX}{n}"), t))
            .chain(self.optimizer.iter().map(|(n, t)| (format!("{OPTIMIZER_PREFIX}{n}"), t)))
            .collect();
        safetensors::serialize(tensors, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, meta) = safetensors::SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let header_json = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get(METADATA_KEY))
            .ok_or_else(|| Error::Checkpoint("not a morphoclass checkpoint (metadata missing)".into()))?;
        let header: Header = serde_json::from_str(header_json)?;
        if header.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_FORMAT_VERSION})",
                header.format_version
            )));
        }
        let mut model = BTreeMap::new();
        let mut optimizer = BTreeMap::new();
        for (name, t) in candle_core::safetensors::load_buffer(bytes, &Device::Cpu)? {
            if let Some(n) = name.strip_prefix(MODEL_PREFIX) {
                model.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix(OPTIMIZER_PREFIX) {
                optimizer.insert(n.to_string(), t);
            } else {
                return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
            }
        }
        Ok(Self {
            model_config: header.model_config,
            preprocess: header.preprocess,
            model,
            optimizer,
            state: header.state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// A fresh model carrying this checkpoint's parameters.
    pub fn restore(&self) -> Result<Model> {
        let model = Model::init(&self.model_config, 0, DType::F32)?;
        self.restore_into(&model)?;
        Ok(model)
    }

    /// Load parameters into an existing model of the same architecture.
    pub fn restore_into(&self, model: &Model) -> Result<()> {
        if !self.model_config.same_architecture(model.config()) {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: checkpoint {:?} vs model {:?}",
                self.model_config.architecture(),
                model.config().architecture()
            )));
        }
        model.load_state(self.model.iter())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Mode;

    fn small_state() -> TrainingState {
        TrainingState {
            epoch: 3,
            best_epoch: 2,
            best_val_loss: Some(0.123_456_789_012_345_6),
            epochs_since_improvement: 1,
            seed: 42,
        }
    }

    #[test]
    fn round_trip_is_byte_exact_and_preserves_logits() {
        let cfg = ModelConfig { pretrained: false, ..Default::default() };
        let model = Model::init(&cfg, 5, DType::F32).unwrap();
        let opt = BTreeMap::from([("momentum.conv1.weight".to_string(), Tensor::ones((2, 3), DType::F32, &Device::Cpu).unwrap())]);
        let ck = Checkpoint::capture(&model, opt, small_state())
            .unwrap()
            .with_preprocess(PreprocessConfig { target_side: 32, ..Default::default() });
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.state, small_state());
        assert_eq!(back.model_config, cfg);
        assert_eq!(back.preprocess.as_ref().unwrap().target_side, 32);

        let restored = back.restore().unwrap();
        let x = Tensor::rand(-1f32, 1f32, (2, 3, 32, 32), &Device::Cpu).unwrap();
        let a: Vec<f32> = model.forward_logits(&x, Mode::Eval).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = restored.forward_logits(&x, Mode::Eval).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let with = Model::init(&ModelConfig { pretrained: false, ..Default::default() }, 0, DType::F32).unwrap();
        let without = Model::init(&ModelConfig { pretrained: false, use_cbam: false, ..Default::default() }, 0, DType::F32).unwrap();
        let ck = Checkpoint::capture(&with, BTreeMap::new(), small_state()).unwrap();
        assert!(matches!(ck.restore_into(&without), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn foreign_file_is_rejected() {
        let t = Tensor::zeros(3, DType::F32, &Device::Cpu).unwrap();
        let bytes = safetensors::serialize([("x", &t)], None).unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }
}
