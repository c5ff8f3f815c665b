//! Confusion matrices, macro-averaged metrics, the four-variant ablation and
//! its reports.

mod plot;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backbone::{build_model, Checkpoint, Mode, Model, ModelConfig};
use crate::data::{ClassLabel, ImageSet};
use crate::error::{Error, Result};
use crate::knn::{KnnConfig, KnnIndex};
use crate::training::{fit, FitOutcome, TrainConfig};

pub use plot::{render_confusion_image, render_confusion_plot};

/// Square count matrix; rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_rows(counts: Vec<Vec<u64>>) -> Result<Self> {
        let n = counts.len();
        if n == 0 || counts.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("confusion matrix must be square and non-empty".into()));
        }
        Ok(Self { counts })
    }

    pub fn from_labels(truth: &[ClassLabel], predicted: &[ClassLabel]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Shape(format!(
                "{} true labels vs {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut cm = Self::zeros(ClassLabel::COUNT);
        for (t, p) in truth.iter().zip(predicted) {
            cm.counts[t.ordinal()][p.ordinal()] += 1;
        }
        Ok(cm)
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.classes()).map(|j| self.counts.iter().map(|r| r[j]).sum()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub micro_precision: f64,
    pub micro_recall: f64,
}

fn ratio(num: u64, den: u64, what: &str, class: usize) -> f64 {
    if den == 0 {
        log::warn!("{what} of class {class} is undefined (zero denominator); reporting 0");
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class and macro precision, recall and F1 plus accuracy. A zero
/// denominator yields 0 with a warning.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Empty("confusion matrix"));
    }
    let rows = cm.row_sums();
    let cols = cm.col_sums();
    let per_class: Vec<ClassMetrics> = (0..cm.classes())
        .map(|c| {
            let tp = cm.get(c, c);
            let precision = ratio(tp, cols[c], "precision", c);
            let recall = ratio(tp, rows[c], "recall", c);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics { precision, recall, f1 }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / per_class.len() as f64;
    let tp: u64 = cm.trace();
    // Every sample adds exactly one predicted and one true count, so micro
    // precision and micro recall share the denominator.
    let predicted: u64 = cols.iter().sum();
    let actual: u64 = rows.iter().sum();
    Ok(Metrics {
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        accuracy: tp as f64 / total as f64,
        micro_precision: tp as f64 / predicted as f64,
        micro_recall: tp as f64 / actual as f64,
        per_class,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalStrategy {
    Fc,
    Knn,
}

impl EvalStrategy {
    pub fn display_name(self) -> &'static str {
        match self {
            EvalStrategy::Fc => "FC Layer",
            EvalStrategy::Knn => "k-NN",
        }
    }
}

/// One row of the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub name: &'static str,
    pub use_cbam: bool,
    pub strategy: EvalStrategy,
}

/// The compared variants, in report order.
pub const VARIANTS: [Variant; 4] = [
    Variant { name: "ResAttention-KNN", use_cbam: true, strategy: EvalStrategy::Knn },
    Variant { name: "ResNet+CBAM", use_cbam: true, strategy: EvalStrategy::Fc },
    Variant { name: "ResNet", use_cbam: false, strategy: EvalStrategy::Fc },
    Variant { name: "ResNet+KNN", use_cbam: false, strategy: EvalStrategy::Knn },
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassReport {
    pub labels: Vec<String>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Serializable evaluation result of one model on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub eval_strategy: EvalStrategy,
    pub per_class: PerClassReport,
    #[serde(rename = "macro")]
    pub macro_avg: MacroReport,
    pub accuracy: f64,
    pub confusion: Vec<Vec<u64>>,
    pub seed: u64,
    pub checkpoint_hash: String,
}

impl MetricsReport {
    pub fn new(model: &str, strategy: EvalStrategy, cm: &ConfusionMatrix, seed: u64, checkpoint_hash: String) -> Result<Self> {
        let m = compute_metrics(cm)?;
        let labels = (0..cm.classes())
            .map(|c| match ClassLabel::from_ordinal(c) {
                Some(l) if cm.classes() == ClassLabel::COUNT => l.as_str().to_string(),
                _ => format!("class{c}"),
            })
            .collect();
        Ok(Self {
            model: model.to_string(),
            eval_strategy: strategy,
            per_class: PerClassReport {
                labels,
                precision: m.per_class.iter().map(|c| c.precision).collect(),
                recall: m.per_class.iter().map(|c| c.recall).collect(),
                f1: m.per_class.iter().map(|c| c.f1).collect(),
            },
            macro_avg: MacroReport {
                precision: m.macro_precision,
                recall: m.macro_recall,
                f1: m.macro_f1,
            },
            accuracy: m.accuracy,
            confusion: cm.rows().to_vec(),
            seed,
            checkpoint_hash,
        })
    }

    pub fn confusion_matrix(&self) -> Result<ConfusionMatrix> {
        ConfusionMatrix::from_rows(self.confusion.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

type Column = (&'static str, fn(&MetricsReport) -> f64);

/// Aligned plain-text comparison; per column the best value is wrapped in
/// `**` and the second best in `_`.
pub fn comparison_table(reports: &[MetricsReport]) -> String {
    let columns: [Column; 4] = [
        ("Precision", |r| r.macro_avg.precision),
        ("Recall", |r| r.macro_avg.recall),
        ("F1 Score", |r| r.macro_avg.f1),
        ("Acc", |r| r.accuracy),
    ];
    let mut cells: Vec<Vec<String>> = vec![["Model", "Eval Strat"]
        .into_iter()
        .chain(columns.iter().map(|c| c.0))
        .map(String::from)
        .collect()];
    for r in reports {
        cells.push(vec![r.model.clone(), r.eval_strategy.display_name().to_string()]);
    }
    for (_, value) in &columns {
        let values: Vec<f64> = reports.iter().map(value).collect();
        let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let second = values.iter().copied().filter(|&v| v < best).fold(f64::NEG_INFINITY, f64::max);
        for (row, v) in values.iter().enumerate() {
            let text = format!("{v:.4}");
            cells[row + 1].push(if *v == best {
                format!("**{text}**")
            } else if *v == second {
                format!("_{text}_")
            } else {
                text
            });
        }
    }
    let widths: Vec<usize> = (0..cells[0].len())
        .map(|c| cells.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in cells.iter().enumerate() {
        let line: Vec<String> = row.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
        if i == 0 {
            let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        }
    }
    out
}

/// Argmax of the classification head over `images`.
pub fn predict_fc(model: &Model, images: &ImageSet, batch_size: usize) -> Result<Vec<ClassLabel>> {
    if images.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let indices: Vec<usize> = (0..images.len()).collect();
    let mut out = Vec::with_capacity(images.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let logits = model.forward_logits(&images.batch(chunk, None)?, Mode::Eval)?;
        for p in logits.argmax(1)?.to_vec1::<u32>()? {
            out.push(ClassLabel::from_ordinal(p as usize).expect("head has one logit per class"));
        }
    }
    Ok(out)
}

/// k-NN over embeddings: `reference` builds the index, `images` are queried.
pub fn predict_knn(model: &Model, reference: &ImageSet, images: &ImageSet, knn: &KnnConfig, batch_size: usize) -> Result<Vec<ClassLabel>> {
    let index = KnnIndex::fit(&model.extract_embeddings(reference, batch_size)?)?;
    let queries = model.extract_embeddings(images, batch_size)?;
    Ok(index.predict_set(&queries, knn)?.into_iter().map(|p| p.label).collect())
}

pub fn checkpoint_hash(checkpoint: &Checkpoint) -> Result<String> {
    Ok(crate::data::sha256_hex(&checkpoint.to_bytes()?))
}

/// Evaluate a trained, frozen model on `test` with one strategy.
pub fn evaluate(
    model: &Model,
    strategy: EvalStrategy,
    knn_reference: &ImageSet,
    test: &ImageSet,
    knn: &KnnConfig,
    batch_size: usize,
) -> Result<ConfusionMatrix> {
    let predicted = match strategy {
        EvalStrategy::Fc => predict_fc(model, test, batch_size)?,
        EvalStrategy::Knn => predict_knn(model, knn_reference, test, knn, batch_size)?,
    };
    ConfusionMatrix::from_labels(test.labels(), &predicted)
}

#[derive(Debug, Clone)]
pub struct AblationData<'a> {
    pub train: &'a ImageSet,
    pub val: &'a ImageSet,
    pub test: &'a ImageSet,
    /// Extra images added to the k-NN index next to `train`.
    pub knn_extra: Option<&'a ImageSet>,
}

#[derive(Debug, Clone)]
pub struct AblationSettings {
    /// Template; `use_cbam` is set per trained backbone.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub knn: KnnConfig,
    pub augment: bool,
}

#[derive(Debug)]
pub struct AblationRun {
    pub use_cbam: bool,
    pub fit: FitOutcome,
}

#[derive(Debug)]
pub struct AblationResult {
    /// In [`VARIANTS`] order.
    pub reports: Vec<MetricsReport>,
    pub runs: Vec<AblationRun>,
}

impl AblationResult {
    pub fn table(&self) -> String {
        comparison_table(&self.reports)
    }
}

/// Train one backbone per attention setting, freeze it and score it with
/// both heads on the test split.
pub fn run_ablation(data: &AblationData<'_>, settings: &AblationSettings) -> Result<AblationResult> {
    let mut reports: Vec<Option<MetricsReport>> = vec![None; VARIANTS.len()];
    let mut runs = Vec::new();
    let reference = match data.knn_extra {
        Some(extra) => data.train.concat(extra)?,
        None => data.train.clone(),
    };
    for use_cbam in [true, false] {
        log::info!("ablation: training backbone with use_cbam={use_cbam}");
        let config = ModelConfig {
            use_cbam,
            ..settings.model.clone()
        };
        let mut model = build_model(&config, settings.train.seed)?;
        let outcome = fit(&model, data.train, data.val, &settings.train, settings.augment)?;
        model.freeze();
        let hash = checkpoint_hash(&outcome.best)?;
        for (slot, variant) in VARIANTS.iter().enumerate().filter(|(_, v)| v.use_cbam == use_cbam) {
            let cm = evaluate(&model, variant.strategy, &reference, data.test, &settings.knn, settings.train.batch_size)?;
            reports[slot] = Some(MetricsReport::new(variant.name, variant.strategy, &cm, settings.train.seed, hash.clone())?);
        }
        runs.push(AblationRun { use_cbam, fit: outcome });
    }
    Ok(AblationResult {
        reports: reports.into_iter().map(|r| r.expect("every variant evaluated")).collect(),
        runs,
    })
}
