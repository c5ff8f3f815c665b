//! ResNet-50 with optional block attention and a two-stage head.
//!
//! Topology and tensor names follow torchvision's `resnet50` (v1.5: the
//! stride sits on the 3x3 convolution), so ImageNet weights exported from
//! torchvision load by name. Pooled 2048-d features are projected by one
//! linear map to the embedding, and a second linear map turns the embedding
//! into class logits.
//!
//! With `per_block` placement an attention unit gates the output of each
//! bottleneck's third batch norm, before the shortcut is added. With
//! `per_stage` placement one unit gates the output of each stage.

mod checkpoint;

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::attention::{Cbam, CbamConfig};
use crate::data::{ClassLabel, ImageSet};
use crate::error::{Error, Result};
use crate::knn::EmbeddingSet;
use crate::nn::{max_pool2d, BatchNorm2d, Conv2d, Init, Linear, ParamStore};
use crate::seeding::{stream_rng, streams};

pub use checkpoint::{Checkpoint, TrainingState, CHECKPOINT_FORMAT_VERSION};

/// Bottleneck blocks per stage.
pub const STAGE_BLOCKS: [usize; 4] = [3, 4, 6, 3];
const STAGE_WIDTHS: [usize; 4] = [64, 128, 256, 512];
const EXPANSION: usize = 4;
pub const FEATURE_DIM: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CbamPlacement {
    PerBlock,
    PerStage,
}

/// Which output a variant is evaluated with. The classifier layer is built in
/// both cases because fine-tuning always runs through it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Fc,
    EmbeddingForKnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub use_cbam: bool,
    pub cbam_placement: CbamPlacement,
    pub cbam_reduction: usize,
    pub cbam_kernel: usize,
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub pretrained: bool,
    /// torchvision-named safetensors file; required when `pretrained`.
    pub pretrained_weights: Option<PathBuf>,
    pub head: HeadKind,
    /// L2-normalize embeddings at extraction time.
    pub normalize_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            use_cbam: true,
            cbam_placement: CbamPlacement::PerBlock,
            cbam_reduction: 16,
            cbam_kernel: 7,
            embedding_dim: 128,
            num_classes: ClassLabel::COUNT,
            pretrained: true,
            pretrained_weights: None,
            head: HeadKind::EmbeddingForKnn,
            normalize_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be >= 1".into()));
        }
        if self.num_classes != ClassLabel::COUNT {
            return Err(Error::Config(format!(
                "num_classes must be {}, got {}",
                ClassLabel::COUNT,
                self.num_classes
            )));
        }
        if self.use_cbam {
            CbamConfig {
                channels: 64,
                reduction_ratio: self.cbam_reduction,
                spatial_kernel: self.cbam_kernel,
                channel_bias: false,
            }
            .validate()?;
        }
        Ok(())
    }

    /// Fields that determine the parameter layout.
    fn architecture(&self) -> (bool, Option<CbamPlacement>, usize, usize, usize, usize) {
        (
            self.use_cbam,
            self.use_cbam.then_some(self.cbam_placement),
            if self.use_cbam { self.cbam_reduction } else { 0 },
            if self.use_cbam { self.cbam_kernel } else { 0 },
            self.embedding_dim,
            self.num_classes,
        )
    }

    pub fn same_architecture(&self, other: &ModelConfig) -> bool {
        self.architecture() == other.architecture()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
    cbam: Option<Cbam>,
}

fn conv(store: &mut ParamStore, init: &mut Init, name: String, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Conv2d> {
    Ok(Conv2d {
        weight: store.add_param(name, init.kaiming_fan_out(&[cout, cin, k, k])?)?,
        bias: None,
        stride,
        padding: k / 2,
    })
}

impl Bottleneck {
    fn new(store: &mut ParamStore, init: &mut Init, prefix: &str, cin: usize, width: usize, stride: usize, cbam: Option<CbamConfig>) -> Result<Self> {
        let cout = width * EXPANSION;
        let downsample = if stride != 1 || cin != cout {
            Some((
                conv(store, init, format!("{prefix}.downsample.0.weight"), cin, cout, 1, stride)?,
                BatchNorm2d::new(store, &format!("{prefix}.downsample.1"), cout)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: conv(store, init, format!("{prefix}.conv1.weight"), cin, width, 1, 1)?,
            bn1: BatchNorm2d::new(store, &format!("{prefix}.bn1"), width)?,
            conv2: conv(store, init, format!("{prefix}.conv2.weight"), width, width, 3, stride)?,
            bn2: BatchNorm2d::new(store, &format!("{prefix}.bn2"), width)?,
            conv3: conv(store, init, format!("{prefix}.conv3.weight"), width, cout, 1, 1)?,
            bn3: BatchNorm2d::new(store, &format!("{prefix}.bn3"), cout)?,
            downsample,
            cbam: cbam
                .map(|c| Cbam::new(store, init, &format!("{prefix}.cbam"), CbamConfig { channels: cout, ..c }))
                .transpose()?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, train)?.relu()?;
        let mut y = self.bn3.forward(&self.conv3.forward(&y)?, train)?;
        if let Some(cbam) = &self.cbam {
            y = cbam.forward(&y)?;
        }
        let shortcut = match &self.downsample {
            Some((c, bn)) => bn.forward(&c.forward(x)?, train)?,
            None => x.clone(),
        };
        Ok((y + shortcut)?.relu()?)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    blocks: Vec<Bottleneck>,
    cbam: Option<Cbam>,
}

/// Per-layer outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `(N, 2048)` globally pooled backbone features.
    pub features: Tensor,
    /// `(N, embedding_dim)`.
    pub embedding: Tensor,
    /// `(N, num_classes)`.
    pub logits: Tensor,
}

/// Parameters live in shared `Var`s, so a model is deliberately not `Clone`:
/// copies go through [`Checkpoint`].
#[derive(Debug)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    stages: Vec<Stage>,
    embedding: Linear,
    classifier: Linear,
    frozen: bool,
}

/// Build a model from `config`. Fresh parameters come from the `(seed, INIT)`
/// stream; when `config.pretrained` the backbone is then overwritten from
/// the weights file, while attention units and heads keep their fresh values.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    let mut model = Model::init(config, seed, DType::F32)?;
    if config.pretrained {
        let path = config.pretrained_weights.as_deref().ok_or_else(|| {
            Error::Weights("pretrained=true but no weights file was given (export torchvision resnet50 to safetensors, or disable pretraining)".into())
        })?;
        model.load_pretrained(path)?;
    }
    Ok(model)
}

impl Model {
    /// Random initialization only, in the given precision.
    pub fn init(config: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype, Device::Cpu);
        let mut init = Init::new(stream_rng(seed, streams::INIT));
        let cbam_cfg = |channels| CbamConfig {
            channels,
            reduction_ratio: config.cbam_reduction,
            spatial_kernel: config.cbam_kernel,
            channel_bias: false,
        };
        let stem_conv = Conv2d {
            weight: store.add_param("conv1.weight", init.kaiming_fan_out(&[64, 3, 7, 7])?)?,
            bias: None,
            stride: 2,
            padding: 3,
        };
        let stem_bn = BatchNorm2d::new(&mut store, "bn1", 64)?;
        let mut stages = Vec::with_capacity(4);
        let mut cin = 64;
        for (s, (&blocks, &width)) in STAGE_BLOCKS.iter().zip(&STAGE_WIDTHS).enumerate() {
            let per_block = (config.use_cbam && config.cbam_placement == CbamPlacement::PerBlock).then(|| cbam_cfg(0));
            let mut stage = Vec::with_capacity(blocks);
            for b in 0..blocks {
                let stride = if b == 0 && s > 0 { 2 } else { 1 };
                let prefix = format!("layer{}.{b}", s + 1);
                stage.push(Bottleneck::new(&mut store, &mut init, &prefix, cin, width, stride, per_block)?);
                cin = width * EXPANSION;
            }
            let cbam = if config.use_cbam && config.cbam_placement == CbamPlacement::PerStage {
                Some(Cbam::new(&mut store, &mut init, &format!("layer{}.cbam", s + 1), cbam_cfg(cin))?)
            } else {
                None
            };
            stages.push(Stage { blocks: stage, cbam });
        }
        let embedding = Linear::new(&mut store, &mut init, "embedding", FEATURE_DIM, config.embedding_dim, true)?;
        let classifier = Linear::new(&mut store, &mut init, "classifier", config.embedding_dim, config.num_classes, true)?;
        Ok(Self {
            config: config.clone(),
            store,
            stem_conv,
            stem_bn,
            stages,
            embedding,
            classifier,
            frozen: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    pub fn num_cbam_units(&self) -> usize {
        self.stages
            .iter()
            .map(|s| s.cbam.iter().count() + s.blocks.iter().filter(|b| b.cbam.is_some()).count())
            .sum()
    }

    /// Names that belong to the stock ResNet-50 trunk (no attention, no head).
    pub fn is_backbone_tensor(name: &str) -> bool {
        !(name.contains(".cbam.") || name.starts_with("embedding.") || name.starts_with("classifier."))
    }

    /// Copy the stock trunk from a torchvision-named safetensors file.
    /// `fc.*` and `*.num_batches_tracked` entries in the file are ignored.
    pub fn load_pretrained(&mut self, path: &Path) -> Result<()> {
        if !path.is_file() {
            return Err(Error::Weights(format!("weights file not found: {}", path.display())));
        }
        let tensors = candle_core::safetensors::load(path, &Device::Cpu)
            .map_err(|e| Error::Weights(format!("{}: {e}", path.display())))?;
        let wanted: Vec<String> = self
            .store
            .all()
            .map(|(n, _)| n.clone())
            .filter(|n| Self::is_backbone_tensor(n))
            .collect();
        for name in wanted {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::Weights(format!("{} lacks tensor {name}", path.display())))?;
            self.store.assign(&name, t).map_err(|e| Error::Weights(e.to_string()))?;
        }
        log::info!("loaded pretrained trunk from {}", path.display());
        Ok(())
    }

    /// Stop all learning: no parameter is handed to an optimizer any more and
    /// batch norm always uses its running statistics. Idempotent.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Parameters an optimizer may update; empty once frozen.
    pub fn trainable(&self) -> Vec<(&String, &Var)> {
        if self.frozen {
            Vec::new()
        } else {
            self.store.params().iter().collect()
        }
    }

    /// Pooled trunk features, `(N, 3, H, W)` → `(N, 2048)`.
    pub fn features(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {c}")));
        }
        let train = mode == Mode::Train && !self.frozen;
        let x = x.to_dtype(self.store.dtype())?;
        let mut y = self.stem_bn.forward(&self.stem_conv.forward(&x)?, train)?.relu()?;
        y = max_pool2d(&y, 3, 2, 1)?;
        for stage in &self.stages {
            for block in &stage.blocks {
                y = block.forward(&y, train)?;
            }
            if let Some(cbam) = &stage.cbam {
                y = cbam.forward(&y)?;
            }
        }
        Ok(y.mean((2, 3))?)
    }

    /// Intermediate output of every bottleneck block, in order.
    pub fn block_outputs(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let x = x.to_dtype(self.store.dtype())?;
        let mut y = self.stem_bn.forward(&self.stem_conv.forward(&x)?, false)?.relu()?;
        y = max_pool2d(&y, 3, 2, 1)?;
        let mut outs = Vec::new();
        for stage in &self.stages {
            for block in &stage.blocks {
                y = block.forward(&y, false)?;
                outs.push(y.clone());
            }
            if let Some(cbam) = &stage.cbam {
                y = cbam.forward(&y)?;
            }
        }
        Ok(outs)
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<ForwardOutput> {
        let features = self.features(x, mode)?;
        let embedding = self.embedding.forward(&features)?;
        let logits = self.classifier.forward(&embedding)?;
        Ok(ForwardOutput {
            features,
            embedding,
            logits,
        })
    }

    pub fn forward_logits(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.forward(x, mode)?.logits)
    }

    /// Named copies of every parameter and buffer.
    pub fn state_tensors(&self) -> Result<Vec<(String, Tensor)>> {
        self.store
            .all()
            .map(|(n, v)| Ok((n.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrite parameters and buffers; every model tensor must be present.
    pub fn load_state<'a>(&self, tensors: impl IntoIterator<Item = (&'a String, &'a Tensor)>) -> Result<()> {
        let given: std::collections::BTreeMap<&String, &Tensor> = tensors.into_iter().collect();
        for (name, _) in self.store.all() {
            let t = given
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            self.store.assign(name, t)?;
        }
        if given.len() != self.store.all().count() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                given.len(),
                self.store.all().count()
            )));
        }
        Ok(())
    }

    /// Embeddings of every image in `images`, in order, computed in eval mode.
    pub fn extract_embeddings(&self, images: &ImageSet, batch_size: usize) -> Result<EmbeddingSet> {
        if images.is_empty() {
            return Err(Error::Empty("split: no images to embed"));
        }
        let batch_size = batch_size.max(1);
        let dim = self.config.embedding_dim;
        let mut vectors = Vec::with_capacity(images.len() * dim);
        let indices: Vec<usize> = (0..images.len()).collect();
        for chunk in indices.chunks(batch_size) {
            let x = images.batch(chunk, None)?;
            let mut e = self.forward(&x, Mode::Eval)?.embedding.to_dtype(DType::F32)?;
            if self.config.normalize_embeddings {
                let norm = e.sqr()?.sum_keepdim(1)?.sqrt()?.clamp(1e-12, f32::MAX)?;
                e = e.broadcast_div(&norm)?;
            }
            vectors.extend(e.flatten_all()?.to_vec1::<f32>()?);
        }
        EmbeddingSet::new(vectors, dim, images.labels().to_vec(), images.ids().to_vec())
    }
}

/// Closed-form count of the stock ResNet-50 trunk parameters.
pub fn stock_trunk_param_count() -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k;
    let bn = |c: usize| 2 * c;
    let mut total = conv(3, 64, 7) + bn(64);
    let mut cin = 64;
    for (&blocks, &width) in STAGE_BLOCKS.iter().zip(&STAGE_WIDTHS) {
        for b in 0..blocks {
            let cout = width * EXPANSION;
            total += conv(cin, width, 1) + bn(width) + conv(width, width, 3) + bn(width) + conv(width, cout, 1) + bn(cout);
            if b == 0 {
                total += conv(cin, cout, 1) + bn(cout);
            }
            cin = cout;
        }
    }
    total
}
