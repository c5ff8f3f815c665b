use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use morphoclass::backbone::{build_model, Checkpoint, Model};
use morphoclass::data::synthetic::{generate, SyntheticSpec};
use morphoclass::data::{
    default_class_dirs, scan_dataset, sha256_hex, stratified_split, verify_no_leakage, ClassLabel, ImageSet, Manifest,
    PreprocessConfig, ScanOptions, Split,
};
use morphoclass::evaluation::{
    comparison_table, evaluate, render_confusion_plot, run_ablation, AblationData, AblationSettings, EvalStrategy,
    MetricsReport,
};
use morphoclass::training::fit;

use crate::config::{echo, resolve, Overrides, RunConfig, SEED_ENV, WEIGHTS_ENV};
use crate::{Command, StrategyArg};

/// Files a command promises to write. Unless [`Outputs::commit`] is
/// reached they are deleted again, together with a directory we created.
struct Outputs {
    dir: PathBuf,
    created_dir: bool,
    files: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    fn new(dir: &Path) -> anyhow::Result<Self> {
        let created_dir = !dir.exists();
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            created_dir,
            files: Vec::new(),
            committed: false,
        })
    }

    fn file(&mut self, name: &str) -> PathBuf {
        self.track(self.dir.join(name))
    }

    fn track(&mut self, path: PathBuf) -> PathBuf {
        self.files.push(path.clone());
        path
    }

    fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for f in &self.files {
            let _ = std::fs::remove_file(f);
        }
        if self.created_dir {
            let _ = std::fs::remove_dir(&self.dir);
        }
    }
}

fn env(name: &str) -> Option<String> {
    std::env::var(name).ok()
}

fn resolve_with_env(o: &Overrides<'_>) -> anyhow::Result<RunConfig> {
    resolve(o, env(SEED_ENV), env(WEIGHTS_ENV))
}

fn load_manifest(cfg: &RunConfig) -> anyhow::Result<Manifest> {
    let path = cfg.manifest()?;
    Manifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn load_split(root: &Path, manifest: &Manifest, split: Split, pre: &PreprocessConfig) -> anyhow::Result<ImageSet> {
    let records = manifest.split(split);
    if records.is_empty() {
        bail!("manifest has no {split} records");
    }
    Ok(ImageSet::load(root, &records, pre)?)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Model plus the input pipeline it was trained with.
fn restore(checkpoint: &Path, cfg: &RunConfig) -> anyhow::Result<(Model, PreprocessConfig, String)> {
    let bytes = std::fs::read(checkpoint).with_context(|| format!("reading checkpoint {}", checkpoint.display()))?;
    let ck = Checkpoint::from_bytes(&bytes).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let mut model = ck.restore()?;
    model.freeze();
    let pre = ck.preprocess.clone().unwrap_or_else(|| cfg.preprocess.clone());
    Ok((model, pre, sha256_hex(&bytes)))
}

fn slug(name: &str) -> String {
    name.to_ascii_lowercase().replace('+', "-")
}

fn class_names() -> Vec<&'static str> {
    ClassLabel::ALL.iter().map(|l| l.display_name()).collect()
}

pub fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Split { common, split } => cmd_split(&resolve_with_env(&Overrides {
            common: Some(&common),
            split: Some(&split),
            ..Default::default()
        })?),
        Command::Train { common, model, train } => cmd_train(&resolve_with_env(&Overrides {
            common: Some(&common),
            model: Some(&model),
            train: Some(&train),
            ..Default::default()
        })?),
        Command::Embed {
            common,
            checkpoint,
            splits,
            batch_size,
        } => {
            let cfg = resolve_with_env(&Overrides {
                common: Some(&common),
                ..Default::default()
            })?;
            cmd_embed(&cfg, &checkpoint, &splits, batch_size.unwrap_or(cfg.train.batch_size))
        }
        Command::Eval {
            common,
            checkpoint,
            strategy,
            knn,
            batch_size,
        } => {
            let cfg = resolve_with_env(&Overrides {
                common: Some(&common),
                knn: Some(&knn),
                ..Default::default()
            })?;
            let strategy = match strategy {
                StrategyArg::Fc => EvalStrategy::Fc,
                StrategyArg::Knn => EvalStrategy::Knn,
            };
            cmd_eval(&cfg, &checkpoint, strategy, batch_size.unwrap_or(cfg.train.batch_size))
        }
        Command::Ablate {
            common,
            model,
            train,
            knn,
        } => cmd_ablate(&resolve_with_env(&Overrides {
            common: Some(&common),
            model: Some(&model),
            train: Some(&train),
            knn: Some(&knn),
            ..Default::default()
        })?),
        Command::Plot { metrics, out_dir, output } => cmd_plot(&metrics, out_dir.as_deref(), output),
        Command::Synth {
            out_dir,
            per_class,
            image_size,
            noise,
            seed,
        } => cmd_synth(&out_dir, per_class, image_size, noise, seed),
    }
}

fn cmd_split(cfg: &RunConfig) -> anyhow::Result<()> {
    let root = cfg.data_root()?;
    let options = ScanOptions {
        expected_dims: cfg.split.expect_resolution,
    };
    let scanned = scan_dataset(root, &default_class_dirs(), &options)?;
    let manifest = stratified_split(&scanned, &cfg.split_spec())?;
    let report = verify_no_leakage(&manifest);
    if !report.passed() {
        bail!("leakage check failed:\n{report}");
    }
    let mut out = Outputs::new(cfg.out_dir())?;
    let manifest_path = match &cfg.manifest {
        Some(p) => out.track(p.clone()),
        None => out.file("manifest.csv"),
    };
    manifest.save(&manifest_path)?;
    let summary = manifest.summary_table();
    write(&out.file("split_summary.txt"), &summary)?;
    out.track(echo(cfg, &out.dir)?);
    print!("{summary}");
    println!("{report}");
    println!("manifest written to {}", manifest_path.display());
    out.commit();
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> anyhow::Result<()> {
    let root = cfg.data_root()?;
    let manifest = load_manifest(cfg)?;
    let model = build_model(&cfg.model, cfg.seed)?;
    let train = load_split(root, &manifest, Split::Train, &cfg.preprocess)?;
    let val = load_split(root, &manifest, Split::Val, &cfg.preprocess)?;
    let mut out = Outputs::new(cfg.out_dir())?;
    out.track(echo(cfg, &out.dir)?);
    let augment = cfg.preprocess.augmentation.enabled;
    log::info!("training on {} images, validating on {}", train.len(), val.len());
    let outcome = fit(&model, &train, &val, &cfg.train, augment)?;
    outcome.best.save(&out.file("checkpoint.safetensors"))?;
    outcome.log.save(&out.file("training_log.csv"))?;
    println!(
        "best epoch {} of {} (val loss {:.6})",
        outcome.early_stop.best_epoch,
        outcome.log.rows.len(),
        outcome.early_stop.best_val_loss.unwrap_or(f64::NAN)
    );
    out.commit();
    Ok(())
}

fn cmd_embed(cfg: &RunConfig, checkpoint: &Path, splits: &[String], batch_size: usize) -> anyhow::Result<()> {
    let root = cfg.data_root()?;
    let manifest = load_manifest(cfg)?;
    let splits: Vec<Split> = splits
        .iter()
        .map(|s| s.parse::<Split>().map_err(anyhow::Error::msg))
        .collect::<anyhow::Result<_>>()?;
    let (model, pre, _) = restore(checkpoint, cfg)?;
    let mut out = Outputs::new(cfg.out_dir())?;
    out.track(echo(cfg, &out.dir)?);
    for split in splits {
        let images = load_split(root, &manifest, split, &pre)?;
        let emb = model.extract_embeddings(&images, batch_size)?;
        emb.save(&out.file(&format!("embeddings_{split}.bin")))?;
        write(&out.file(&format!("embeddings_{split}.csv")), emb.to_csv()?)?;
        println!("{split}: {} x {}", emb.len(), emb.dim());
    }
    out.commit();
    Ok(())
}

fn knn_reference(root: &Path, manifest: &Manifest, cfg: &RunConfig, pre: &PreprocessConfig) -> anyhow::Result<ImageSet> {
    let train = load_split(root, manifest, Split::Train, pre)?;
    if cfg.knn.include_val {
        Ok(train.concat(&load_split(root, manifest, Split::Val, pre)?)?)
    } else {
        Ok(train)
    }
}

fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, strategy: EvalStrategy, batch_size: usize) -> anyhow::Result<()> {
    let root = cfg.data_root()?;
    let manifest = load_manifest(cfg)?;
    let (model, pre, hash) = restore(checkpoint, cfg)?;
    let test = load_split(root, &manifest, Split::Test, &pre)?;
    let reference = match strategy {
        EvalStrategy::Knn => knn_reference(root, &manifest, cfg, &pre)?,
        EvalStrategy::Fc => test.clone(),
    };
    let cm = evaluate(&model, strategy, &reference, &test, &cfg.knn.config, batch_size)?;
    let name = match (model.config().use_cbam, strategy) {
        (true, EvalStrategy::Knn) => "ResAttention-KNN",
        (true, EvalStrategy::Fc) => "ResNet+CBAM",
        (false, EvalStrategy::Fc) => "ResNet",
        (false, EvalStrategy::Knn) => "ResNet+KNN",
    };
    let report = MetricsReport::new(name, strategy, &cm, cfg.seed, hash)?;
    let tag = serde_json::to_value(strategy)?.as_str().unwrap_or("eval").to_string();
    let mut out = Outputs::new(cfg.out_dir())?;
    out.track(echo(cfg, &out.dir)?);
    write(&out.file(&format!("metrics_{tag}.json")), report.to_json()? + "\n")?;
    render_confusion_plot(&[(name, &cm)], &class_names(), &out.file(&format!("confusion_{tag}.png")))?;
    print!("{}", comparison_table(std::slice::from_ref(&report)));
    out.commit();
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig) -> anyhow::Result<()> {
    let root = cfg.data_root()?;
    let manifest = load_manifest(cfg)?;
    let pre = &cfg.preprocess;
    let train = load_split(root, &manifest, Split::Train, pre)?;
    let val = load_split(root, &manifest, Split::Val, pre)?;
    let test = load_split(root, &manifest, Split::Test, pre)?;
    // Fail on missing weights before any training starts.
    build_model(&cfg.model, cfg.seed)?;
    let mut out = Outputs::new(cfg.out_dir())?;
    out.track(echo(cfg, &out.dir)?);
    let data = AblationData {
        train: &train,
        val: &val,
        test: &test,
        knn_extra: cfg.knn.include_val.then_some(&val),
    };
    let settings = AblationSettings {
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        knn: cfg.knn.config,
        augment: pre.augmentation.enabled,
    };
    let result = run_ablation(&data, &settings)?;
    for run in &result.runs {
        let tag = if run.use_cbam { "cbam" } else { "plain" };
        run.fit.best.save(&out.file(&format!("checkpoint_{tag}.safetensors")))?;
        run.fit.log.save(&out.file(&format!("training_log_{tag}.csv")))?;
    }
    let mut panels = Vec::new();
    for report in &result.reports {
        write(&out.file(&format!("metrics_{}.json", slug(&report.model))), report.to_json()? + "\n")?;
        panels.push((report.model.as_str(), report.confusion_matrix()?));
    }
    let table = result.table();
    write(&out.file("ablation_table.txt"), &table)?;
    let refs: Vec<(&str, &_)> = panels.iter().map(|(n, cm)| (*n, cm)).collect();
    render_confusion_plot(&refs, &class_names(), &out.file("confusion_matrices.png"))?;
    print!("{table}");
    out.commit();
    Ok(())
}

fn cmd_plot(metrics: &[PathBuf], out_dir: Option<&Path>, output: Option<PathBuf>) -> anyhow::Result<()> {
    let mut reports = Vec::new();
    for path in metrics {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let report: MetricsReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let cm = report.confusion_matrix()?;
        reports.push((report.model, cm));
    }
    let dir = out_dir.unwrap_or(Path::new("."));
    let mut out = Outputs::new(output.as_deref().and_then(Path::parent).filter(|p| !p.as_os_str().is_empty()).unwrap_or(dir))?;
    let path = match output {
        Some(p) => out.track(p),
        None => out.file("confusion_matrices.png"),
    };
    let panels: Vec<(&str, &_)> = reports.iter().map(|(n, cm)| (n.as_str(), cm)).collect();
    render_confusion_plot(&panels, &class_names(), &path)?;
    println!("wrote {}", path.display());
    out.commit();
    Ok(())
}

fn cmd_synth(out_dir: &Path, per_class: usize, side: u32, noise: f32, seed: u64) -> anyhow::Result<()> {
    if per_class == 0 {
        bail!("--per-class must be >= 1");
    }
    let spec = SyntheticSpec {
        per_class: [per_class; ClassLabel::COUNT],
        width: side,
        height: side,
        noise,
        seed,
    };
    let out = Outputs::new(out_dir)?;
    generate(out_dir, &default_class_dirs(), &spec)?;
    println!("wrote {} images per class under {}", per_class, out_dir.display());
    out.commit();
    Ok(())
}
