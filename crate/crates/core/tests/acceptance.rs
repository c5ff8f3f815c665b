//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 1 and 6 need the released image set. Point `MORPHOCLASS_DATASET`
//! at its root (class folders as produced by the microscope export) to run
//! criterion 1 against it; without it a stand-in with the published class
//! sizes is checked and the criterion is reported as not verified.
//! Criterion 6 is a multi-hour ablation and is only reported here; run it via
//! `morphoclass ablate --paper-mode` on the released data.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor};
use morphoclass::attention::{cbam_forward, channel_attention, spatial_attention, Cbam, CbamConfig, FeatureMap};
use morphoclass::backbone::{build_model, ModelConfig};
use morphoclass::data::synthetic::{generate, SyntheticSpec};
use morphoclass::data::{
    default_class_dirs, scan_dataset, stratified_split, verify_no_leakage, ClassLabel, ImageSet, Manifest, PreprocessConfig, ScanOptions,
    Split, SplitSpec,
};
use morphoclass::evaluation::{compute_metrics, evaluate, ConfusionMatrix, EvalStrategy};
use morphoclass::knn::KnnConfig;
use morphoclass::nn::{to_vec, Init, ParamStore};
use morphoclass::seeding::stream_rng;
use morphoclass::training::{fit, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Verdict {
    Pass(String),
    Fail(String),
    /// Could not be evaluated in this environment; reported as a failure
    /// but does not fail the run.
    NotRun(String),
}

type Check = Result<String, String>;

fn ensure(ok: bool, what: impl Into<String>) -> Result<(), String> {
    if ok { Ok(()) } else { Err(what.into()) }
}

// ---- 1. split fidelity ----

fn split_fidelity(root: &Path) -> Check {
    let scanned = scan_dataset(root, &default_class_dirs(), &ScanOptions::default()).map_err(|e| e.to_string())?;
    for seed in 0..100 {
        let m = stratified_split(&scanned, &SplitSpec { val_per_class: 16, test_per_class: 16, seed }).map_err(|e| e.to_string())?;
        check_table(&m).map_err(|e| format!("seed {seed}: {e}"))?;
        ensure(verify_no_leakage(&m).passed(), format!("seed {seed}: leakage"))?;
    }
    Ok("per-class {77|78,16,16}, totals {310,64,64}, no leakage over 100 seeds".into())
}

fn check_table(m: &Manifest) -> Result<(), String> {
    let want_train = [77, 77, 78, 78];
    for (label, c) in m.split_counts() {
        let got = (c.train, c.val, c.test);
        ensure(got == (want_train[label.ordinal()], 16, 16), format!("{label}: {got:?}"))?;
    }
    let t = m.totals();
    ensure((t.train, t.val, t.test) == (310, 64, 64), format!("totals {:?}", (t.train, t.val, t.test)))
}

fn criterion_1() -> Verdict {
    if let Some(root) = std::env::var_os("MORPHOCLASS_DATASET") {
        return match split_fidelity(Path::new(&root)) {
            Ok(m) => Verdict::Pass(m),
            Err(e) => Verdict::Fail(e),
        };
    }
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec { per_class: [109, 109, 110, 110], width: 12, height: 12, noise: 40.0, seed: 1 };
    generate(dir.path(), &default_class_dirs(), &spec).unwrap();
    match split_fidelity(dir.path()) {
        Ok(m) => Verdict::NotRun(format!("released dataset absent (set MORPHOCLASS_DATASET); stand-in with 109/109/110/110 images: {m}")),
        Err(e) => Verdict::Fail(format!("stand-in corpus: {e}")),
    }
}

// ---- 2. attention ----

fn criterion_2() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..20 {
        let (c, h, w) = (rng.random_range(1..40), rng.random_range(1..12), rng.random_range(1..12));
        let mut store = ParamStore::new(DType::F64, Device::Cpu);
        let mut init = Init::new(stream_rng(trial, 0));
        let cbam = Cbam::new(&mut store, &mut init, "c", CbamConfig { reduction_ratio: 4, ..CbamConfig::new(c) }).unwrap();
        let x = init.normal(&[c, h, w], 2.0).unwrap().to_dtype(DType::F64).unwrap();
        let f = FeatureMap::new(x).unwrap();
        let out = cbam_forward(&f, &cbam).unwrap();
        ensure(out.tensor().dims() == [c, h, w], format!("shape changed for {c}x{h}x{w}"))?;
        let gates: Vec<f64> = [channel_attention(&f, &cbam.channel).unwrap(), spatial_attention(&f, &cbam.spatial).unwrap()]
            .iter()
            .flat_map(|t| to_vec::<f64>(t).unwrap())
            .collect();
        ensure(gates.iter().all(|&g| g > 0.0 && g < 1.0), "gate outside (0, 1)")?;
        for (name, v) in store.params() {
            store.assign(name, &v.as_tensor().zeros_like().unwrap()).unwrap();
        }
        let zeroed: Vec<f64> = to_vec(cbam_forward(&f, &cbam).unwrap().tensor()).unwrap();
        let input: Vec<f64> = to_vec(f.tensor()).unwrap();
        ensure(zeroed.iter().zip(&input).all(|(o, i)| *o == 0.25 * i), "zero parameters do not give 0.25 F")?;
    }

    let (_store, tiny) = common::tiny_module(&common::TINY);
    let raw = common::tiny_input();
    let map = FeatureMap::new(Tensor::from_vec(raw.clone(), (2, 4, 4), &Device::Cpu).unwrap()).unwrap();
    let (mc, _, out) = common::tiny_oracle(&raw, &common::TINY);
    let gateless = common::TinyCbam { w1: [0.0; 2], w2: [0.0; 2], ..common::TINY };
    let doubled: Vec<f64> = raw.iter().map(|v| 2.0 * v).collect();
    let (_, ms, _) = common::tiny_oracle(&doubled, &gateless);
    let d_mc = common::max_abs_diff(&to_vec::<f64>(&channel_attention(&map, &tiny.channel).unwrap()).unwrap(), &mc);
    let d_ms = common::max_abs_diff(&to_vec::<f64>(&spatial_attention(&map, &tiny.spatial).unwrap()).unwrap(), &ms);
    let d_out = common::max_abs_diff(&to_vec::<f64>(cbam_forward(&map, &tiny).unwrap().tensor()).unwrap(), &out);
    ensure(d_mc.max(d_ms).max(d_out) < 1e-12, format!("hand oracle deviation {:e}", d_mc.max(d_ms).max(d_out)))?;

    let mut store = ParamStore::new(DType::F64, Device::Cpu);
    let mut init = Init::new(stream_rng(21, 0));
    let cfg = CbamConfig { channels: 2, reduction_ratio: 1, spatial_kernel: 3, channel_bias: true };
    let cbam = Cbam::new(&mut store, &mut init, "cbam", cfg).unwrap();
    for (name, v) in store.params() {
        store.assign(name, &init.normal(v.dims(), 0.5).unwrap().to_dtype(DType::F64).unwrap()).unwrap();
    }
    let x = init.normal(&[1, 2, 3, 3], 1.0).unwrap().to_dtype(DType::F64).unwrap();
    let worst = common::gradient_check(&store, 1e-4, || cbam.forward(&x).unwrap().sum_all().unwrap());
    ensure(worst < 1e-3, format!("gradient relative error {worst:e}"))?;
    Ok(format!("20 random shapes, hand oracles within 1e-12, worst gradient error {worst:.1e}"))
}

// ---- 3. k-NN ----

fn criterion_3() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cfg = |k| KnnConfig { k, ..Default::default() };
    for i in 0..100 {
        let (n, d, k) = (rng.random_range(1..=50), rng.random_range(1..=8), rng.random_range(1..=7));
        let rows: Vec<Vec<i64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-3..=3)).collect()).collect();
        let labels: Vec<ClassLabel> = (0..n).map(|_| common::label(&mut rng)).collect();
        let q: Vec<i64> = (0..d).map(|_| rng.random_range(-3..=3)).collect();
        let index = morphoclass::knn::KnnIndex::from_rows(common::as_f64(&rows), labels.clone()).unwrap();
        let got = index.predict(&common::as_f64(std::slice::from_ref(&q)), &cfg(k)).unwrap()[0].label;
        ensure(got == common::brute_knn(&rows, &labels, &q, k), format!("instance {i} disagrees"))?;
    }
    use ClassLabel::*;
    let mut ties = 0;
    for (a, b, c) in [(Taxol20, Control, Taxol100), (Taxol100, Taxol40, Control), (Control, Taxol100, Taxol20), (Taxol40, Taxol20, Control)] {
        for shift in [0, 1] {
            let (rows, labels) = common::two_two_one(a, b, c, shift);
            let index = morphoclass::knn::KnnIndex::from_rows(common::as_f64(&rows), labels.clone()).unwrap();
            let got = index.predict(&[vec![0.0; 4]], &cfg(5)).unwrap()[0].label;
            let want = if shift == 0 { a.min(b) } else { a };
            ensure(got == want && got == common::brute_knn(&rows, &labels, &[0; 4], 5), format!("2-2-1 tie {a}/{b} shift {shift}"))?;
            ties += 1;
        }
    }
    Ok(format!("100 random instances and {ties} constructed 2-2-1 ties match brute force"))
}

// ---- 4. metrics ----

fn criterion_4() -> Check {
    let close = |a: f64, b: f64| (a - b).abs() < 1e-9;
    let m = compute_metrics(&ConfusionMatrix::from_rows(vec![vec![2, 1], vec![0, 3]]).unwrap()).unwrap();
    let checks = [
        (m.accuracy, 5.0 / 6.0),
        (m.macro_precision, 0.875),
        (m.macro_recall, 5.0 / 6.0),
        (m.macro_f1, (0.8 + 6.0 / 7.0) / 2.0),
        (m.per_class[0].f1, 0.8),
        (m.per_class[1].precision, 0.75),
    ];
    ensure(checks.iter().all(|&(a, b)| close(a, b)), format!("2x2 values off: {checks:?}"))?;
    let reference = ConfusionMatrix::from_rows(vec![vec![16, 0, 0, 0], vec![0, 11, 3, 2], vec![0, 2, 11, 3], vec![0, 1, 5, 10]]).unwrap();
    let acc = compute_metrics(&reference).unwrap().accuracy;
    ensure(close(acc, 0.75), format!("reference accuracy {acc}"))?;
    Ok("2x2 hand values and 4-class reference accuracy 0.7500 within 1e-9".into())
}

// ---- 5. end-to-end synthetic ----

fn load_sets(root: &Path, manifest: &Manifest, side: u32) -> [ImageSet; 3] {
    let pre = PreprocessConfig { target_side: side, ..Default::default() };
    [Split::Train, Split::Val, Split::Test].map(|s| ImageSet::load(root, &manifest.split(s), &pre).unwrap())
}

fn synthetic_manifest(root: &Path, per_class: usize, side: u32) -> Manifest {
    let spec = SyntheticSpec { per_class: [per_class; 4], width: side, height: side, ..Default::default() };
    generate(root, &default_class_dirs(), &spec).unwrap();
    let scanned = scan_dataset(root, &default_class_dirs(), &ScanOptions::default()).unwrap();
    stratified_split(&scanned, &SplitSpec { val_per_class: 2, test_per_class: 2, seed: 0 }).unwrap()
}

/// Budgeted schedule for the separable set: improvements below 0.01 in
/// validation loss do not reset patience.
fn synthetic_schedule() -> TrainConfig {
    TrainConfig { max_epochs: 60, patience: 5, min_delta: 1e-2, ..Default::default() }
}

fn criterion_5() -> Check {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let manifest = synthetic_manifest(dir.path(), 14, 64);
    let [train, val, test] = load_sets(dir.path(), &manifest, 64);
    ensure((train.len(), val.len(), test.len()) == (40, 8, 8), format!("split sizes {} / {} / {}", train.len(), val.len(), test.len()))?;
    let mut model = build_model(&ModelConfig { pretrained: false, ..Default::default() }, 0).map_err(|e| e.to_string())?;
    let cfg = synthetic_schedule();
    let outcome = fit(&model, &train, &val, &cfg, true).map_err(|e| e.to_string())?;
    model.freeze();
    let mut accs = Vec::new();
    for strategy in [EvalStrategy::Fc, EvalStrategy::Knn] {
        let cm = evaluate(&model, strategy, &train, &test, &KnnConfig::default(), 8).map_err(|e| e.to_string())?;
        accs.push(compute_metrics(&cm).unwrap().accuracy);
    }
    let elapsed = start.elapsed();
    let epochs = outcome.log.rows.len();
    let summary = format!(
        "FC acc {:.3}, k-NN acc {:.3}, stopped after {epochs}/{} epochs (best {}), {:.0?}",
        accs[0], accs[1], cfg.max_epochs, outcome.early_stop.best_epoch, elapsed
    );
    ensure(accs.iter().all(|&a| a >= 0.95), format!("accuracy below 0.95: {summary}"))?;
    ensure(outcome.stopped_early && epochs < cfg.max_epochs, format!("no early stop: {summary}"))?;
    ensure(elapsed < Duration::from_secs(600), format!("over 10 minutes: {summary}"))?;
    Ok(summary)
}

// ---- 7. determinism ----

fn criterion_7() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synthetic_manifest(dir.path(), 5, 32);
    let [train, val, _] = load_sets(dir.path(), &manifest, 32);
    // The published recipe, capped at three epochs.
    let cfg = TrainConfig { max_epochs: 3, patience: 3, seed: 99, ..Default::default() };
    let run = || {
        let model = build_model(&ModelConfig { pretrained: false, ..Default::default() }, cfg.seed).unwrap();
        let out = fit(&model, &train, &val, &cfg, false).unwrap();
        (out.log.to_csv(), out.best.to_bytes().unwrap())
    };
    let (log_a, ck_a) = run();
    let (log_b, ck_b) = run();
    ensure(log_a == log_b, "training logs differ")?;
    ensure(ck_a == ck_b, "checkpoints differ")?;
    Ok(format!("two runs: identical {}-row logs and {}-byte checkpoints", log_a.lines().count() - 1, ck_a.len()))
}

fn verdict(r: Check) -> Verdict {
    match r {
        Ok(m) => Verdict::Pass(m),
        Err(e) => Verdict::Fail(e),
    }
}

type Criterion = (&'static str, Box<dyn Fn() -> Verdict>);

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("1 split fidelity", Box::new(criterion_1)),
        ("2 attention correctness", Box::new(|| verdict(criterion_2()))),
        ("3 k-NN oracle equivalence", Box::new(|| verdict(criterion_3()))),
        ("4 metrics oracle", Box::new(|| verdict(criterion_4()))),
        ("5 end-to-end synthetic run", Box::new(|| verdict(criterion_5()))),
        (
            "6 published-number reproduction",
            Box::new(|| {
                Verdict::NotRun("needs the released dataset, pretrained weights and hours of CPU; informational only".into())
            }),
        ),
        ("7 determinism", Box::new(|| verdict(criterion_7()))),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let started = Instant::now();
        let line = match check() {
            Verdict::Pass(m) => format!("PASS  {name}: {m}"),
            Verdict::Fail(m) => {
                failed += 1;
                format!("FAIL  {name}: {m}")
            }
            Verdict::NotRun(m) => format!("FAIL  {name} (not run): {m}"),
        };
        println!("{line} [{:.1?}]", started.elapsed());
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
