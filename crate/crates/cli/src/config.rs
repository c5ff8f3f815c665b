use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use morphoclass::backbone::{CbamPlacement, ModelConfig};
use morphoclass::data::{ImageDims, PreprocessConfig, SplitSpec};
use morphoclass::knn::KnnConfig;
use morphoclass::training::TrainConfig;
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "MORPHOCLASS_SEED";
pub const WEIGHTS_ENV: &str = "MORPHOCLASS_PRETRAINED_WEIGHTS";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

/// Everything a command needs; one seed drives every random component.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data_root: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
    pub paper_mode: bool,
    pub split: SplitSettings,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub knn: KnnSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSettings {
    pub val_per_class: usize,
    pub test_per_class: usize,
    /// Reject images of any other resolution.
    pub expect_resolution: Option<ImageDims>,
}

impl Default for SplitSettings {
    fn default() -> Self {
        let spec = SplitSpec::default();
        Self {
            val_per_class: spec.val_per_class,
            test_per_class: spec.test_per_class,
            expect_resolution: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KnnSettings {
    #[serde(flatten)]
    pub config: KnnConfig,
    /// Index validation embeddings next to the training ones.
    pub include_val: bool,
}

impl RunConfig {
    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            val_per_class: self.split.val_per_class,
            test_per_class: self.split.test_per_class,
            seed: self.seed,
        }
    }

    pub fn data_root(&self) -> anyhow::Result<&Path> {
        let root = self.data_root.as_deref().context("--data-root is required")?;
        if !root.is_dir() {
            bail!("dataset root not found: {}", root.display());
        }
        Ok(root)
    }

    pub fn manifest(&self) -> anyhow::Result<&Path> {
        self.manifest.as_deref().context("--manifest is required")
    }

    pub fn out_dir(&self) -> &Path {
        self.out_dir.as_deref().unwrap_or(Path::new("."))
    }
}

fn load_file(path: &Path) -> anyhow::Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let parsed = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => serde_json::from_str(&text).map_err(anyhow::Error::from),
        _ => toml::from_str(&text).map_err(anyhow::Error::from),
    };
    parsed.with_context(|| format!("parsing config {}", path.display()))
}

#[derive(Debug, Clone, Args, Default)]
pub struct CommonArgs {
    /// TOML or JSON run configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Falls back to MORPHOCLASS_SEED, then the config file, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Pin the published training recipe and disable augmentation.
    #[arg(long)]
    pub paper_mode: bool,
}

#[derive(Debug, Clone, Args, Default)]
pub struct SplitArgs {
    #[arg(long)]
    pub val_per_class: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    /// Required image resolution, e.g. 1600x1200.
    #[arg(long, value_parser = parse_dims)]
    pub expect_resolution: Option<ImageDims>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlacementArg {
    Block,
    Stage,
}

#[derive(Debug, Clone, Args, Default)]
pub struct ModelArgs {
    /// Attention inside the backbone (`--use-cbam false` for the plain ResNet).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub use_cbam: Option<bool>,
    #[arg(long, value_enum)]
    pub cbam_placement: Option<PlacementArg>,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    /// torchvision resnet50 weights as safetensors (or MORPHOCLASS_PRETRAINED_WEIGHTS).
    #[arg(long, conflicts_with = "no_pretrained")]
    pub pretrained_weights: Option<PathBuf>,
    /// Train the backbone from random initialization.
    #[arg(long)]
    pub no_pretrained: bool,
    /// Side of the square network input.
    #[arg(long)]
    pub image_size: Option<u32>,
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Debug, Clone, Args, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Debug, Clone, Args, Default)]
pub struct KnnArgs {
    #[arg(long)]
    pub k: Option<usize>,
    /// Add validation embeddings to the k-NN index.
    #[arg(long)]
    pub knn_include_val: bool,
}

fn parse_dims(s: &str) -> Result<ImageDims, String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WIDTHxHEIGHT")?;
    Ok(ImageDims {
        width: w.trim().parse().map_err(|e| format!("width: {e}"))?,
        height: h.trim().parse().map_err(|e| format!("height: {e}"))?,
    })
}

/// Flag groups a command accepts; `None` groups are left untouched.
#[derive(Debug, Default)]
pub struct Overrides<'a> {
    pub common: Option<&'a CommonArgs>,
    pub split: Option<&'a SplitArgs>,
    pub model: Option<&'a ModelArgs>,
    pub train: Option<&'a TrainArgs>,
    pub knn: Option<&'a KnnArgs>,
}

/// Defaults, then the config file, then the environment, then flags.
pub fn resolve(o: &Overrides<'_>, env_seed: Option<String>, env_weights: Option<String>) -> anyhow::Result<RunConfig> {
    let default_common = CommonArgs::default();
    let common = o.common.unwrap_or(&default_common);
    let mut cfg = match &common.config {
        Some(path) => load_file(path)?,
        None => RunConfig::default(),
    };
    let set = |slot: &mut Option<PathBuf>, v: &Option<PathBuf>| {
        if v.is_some() {
            slot.clone_from(v);
        }
    };
    set(&mut cfg.data_root, &common.data_root);
    set(&mut cfg.manifest, &common.manifest);
    set(&mut cfg.out_dir, &common.out_dir);
    if let Some(s) = env_seed.filter(|s| !s.is_empty()) {
        cfg.seed = s.trim().parse().with_context(|| format!("{SEED_ENV}={s:?} is not an unsigned integer"))?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.paper_mode |= common.paper_mode;

    if let Some(a) = o.split {
        if let Some(v) = a.val_per_class {
            cfg.split.val_per_class = v;
        }
        if let Some(v) = a.test_per_class {
            cfg.split.test_per_class = v;
        }
        if a.expect_resolution.is_some() {
            cfg.split.expect_resolution = a.expect_resolution;
        }
    }

    if let Some(a) = o.model {
        if let Some(v) = a.use_cbam {
            cfg.model.use_cbam = v;
        }
        if let Some(p) = a.cbam_placement {
            cfg.model.cbam_placement = match p {
                PlacementArg::Block => CbamPlacement::PerBlock,
                PlacementArg::Stage => CbamPlacement::PerStage,
            };
        }
        if let Some(v) = a.embedding_dim {
            cfg.model.embedding_dim = v;
        }
        if cfg.model.pretrained_weights.is_none() {
            cfg.model.pretrained_weights = env_weights.filter(|s| !s.is_empty()).map(PathBuf::from);
        }
        if a.pretrained_weights.is_some() {
            cfg.model.pretrained_weights.clone_from(&a.pretrained_weights);
            cfg.model.pretrained = true;
        }
        if a.no_pretrained {
            cfg.model.pretrained = false;
            cfg.model.pretrained_weights = None;
        }
        if let Some(v) = a.image_size {
            cfg.preprocess.target_side = v;
        }
        if a.no_augment {
            cfg.preprocess.augmentation.enabled = false;
        }
    }

    let mut explicit_max_epochs = false;
    let mut explicit_patience = false;
    if let Some(a) = o.train {
        let t = &mut cfg.train;
        if let Some(v) = a.lr {
            t.learning_rate = v;
        }
        if let Some(v) = a.momentum {
            t.momentum = v;
        }
        if let Some(v) = a.weight_decay {
            t.weight_decay = v;
        }
        if let Some(v) = a.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = a.max_epochs {
            t.max_epochs = v;
            explicit_max_epochs = true;
        }
        if let Some(v) = a.patience {
            t.patience = v;
            explicit_patience = true;
        }
    }

    if let Some(a) = o.knn {
        if let Some(v) = a.k {
            cfg.knn.config.k = v;
        }
        cfg.knn.include_val |= a.knn_include_val;
    }

    if cfg.paper_mode {
        pin_paper_recipe(&mut cfg)?;
    }
    // A short budget implies a patience that fits inside it.
    if cfg.train.patience > cfg.train.max_epochs && !explicit_patience {
        if explicit_max_epochs || cfg.paper_mode {
            log::warn!("patience {} clamped to max_epochs {}", cfg.train.patience, cfg.train.max_epochs);
        }
        cfg.train.patience = cfg.train.max_epochs;
    }
    cfg.train.seed = cfg.seed;
    cfg.train.validate()?;
    cfg.model.validate()?;
    cfg.preprocess.validate()?;
    if cfg.knn.config.k == 0 {
        bail!("--k must be >= 1");
    }
    Ok(cfg)
}

/// Published recipe values. `max_epochs` may only be lowered, as a compute
/// budget; every other deviation is an error.
fn pin_paper_recipe(cfg: &mut RunConfig) -> anyhow::Result<()> {
    let recipe = TrainConfig::default();
    let t = &cfg.train;
    let mut conflicts = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            conflicts.push(name.to_string());
        }
    };
    check("lr", t.learning_rate == recipe.learning_rate);
    check("momentum", t.momentum == recipe.momentum);
    check("weight-decay", t.weight_decay == recipe.weight_decay);
    check("batch-size", t.batch_size == recipe.batch_size);
    check("patience", t.patience == recipe.patience);
    check("max-epochs (above 200)", t.max_epochs <= recipe.max_epochs);
    check("embedding-dim", cfg.model.embedding_dim == ModelConfig::default().embedding_dim);
    check("k", cfg.knn.config.k == KnnConfig::default().k);
    if !conflicts.is_empty() {
        bail!("--paper-mode pins the published recipe; conflicting settings: {}", conflicts.join(", "));
    }
    cfg.preprocess.augmentation.enabled = false;
    Ok(())
}

/// Write the resolved configuration next to a command's artifacts.
pub fn echo(cfg: &RunConfig, dir: &Path) -> anyhow::Result<PathBuf> {
    let path = dir.join(RESOLVED_CONFIG_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(cfg)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn common() -> CommonArgs {
        CommonArgs::default()
    }

    #[test]
    fn defaults_are_the_published_recipe() {
        let cfg = resolve(&Overrides::default(), None, None).unwrap();
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.knn.config.k, 5);
        assert_eq!(cfg.model.embedding_dim, 128);
        assert_eq!((cfg.split.val_per_class, cfg.split.test_per_class), (16, 16));
    }

    #[test]
    fn precedence_flag_env_file_default() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.toml");
        std::fs::write(&file, "seed = 3\n[train]\nlearning_rate = 0.01\nbatch_size = 4\n").unwrap();
        let c = CommonArgs { config: Some(file.clone()), ..common() };
        let t = TrainArgs { batch_size: Some(2), ..Default::default() };
        let o = Overrides { common: Some(&c), train: Some(&t), ..Default::default() };

        let cfg = resolve(&o, None, None).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.learning_rate, 0.01);
        assert_eq!(cfg.train.batch_size, 2);
        assert_eq!(cfg.train.momentum, 0.9);
        assert_eq!(cfg.train.seed, 3);

        assert_eq!(resolve(&o, Some("11".into()), None).unwrap().seed, 11);
        let c2 = CommonArgs { seed: Some(12), ..c };
        let o2 = Overrides { common: Some(&c2), ..Default::default() };
        assert_eq!(resolve(&o2, Some("11".into()), None).unwrap().seed, 12);
        assert!(resolve(&Overrides::default(), Some("x".into()), None).is_err());
    }

    #[test]
    fn paper_mode_pins_recipe() {
        let c = CommonArgs { paper_mode: true, ..common() };
        let o = Overrides { common: Some(&c), ..Default::default() };
        let cfg = resolve(&o, None, None).unwrap();
        assert!(!cfg.preprocess.augmentation.enabled);

        let t = TrainArgs { lr: Some(0.1), ..Default::default() };
        let o = Overrides { common: Some(&c), train: Some(&t), ..Default::default() };
        assert!(resolve(&o, None, None).unwrap_err().to_string().contains("lr"));

        let t = TrainArgs { max_epochs: Some(2), ..Default::default() };
        let o = Overrides { common: Some(&c), train: Some(&t), ..Default::default() };
        let cfg = resolve(&o, None, None).unwrap();
        assert_eq!((cfg.train.max_epochs, cfg.train.patience), (2, 2));
    }

    #[test]
    fn resolved_config_round_trips() {
        let m = ModelArgs { use_cbam: Some(false), no_pretrained: true, image_size: Some(64), ..Default::default() };
        let o = Overrides { model: Some(&m), ..Default::default() };
        let cfg = resolve(&o, Some("18446744073709551615".into()), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = echo(&cfg, dir.path()).unwrap();
        let c = CommonArgs { config: Some(path), ..common() };
        let back = resolve(&Overrides { common: Some(&c), ..Default::default() }, None, None).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn dims_parse() {
        assert_eq!(parse_dims("1600x1200").unwrap(), ImageDims { width: 1600, height: 1200 });
        assert!(parse_dims("1600").is_err());
    }
}
