//! Dataset ingestion, manifests and leakage-free stratified splits.
//!
//! The manifest is the single source of truth for which image belongs to
//! which split. Records are keyed by the SHA-256 of the file bytes, so a file
//! copied under a second name is still recognised as the same image.

mod loader;
mod manifest;
mod preprocess;
pub mod synthetic;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seeding::stream_rng;

pub use loader::{AugmentKey, ImageSet};
pub use manifest::MANIFEST_HEADER;
pub use preprocess::{
    decode_gray, load_and_preprocess, preprocess_gray, Augmentation, ChannelPolicy, GrayF32, ImageTensor,
    PreprocessConfig, IMAGENET_MEAN, IMAGENET_STD,
};

/// Exposure class. The ordinal is fixed and indexes every confusion matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Control = 0,
    Taxol20 = 1,
    Taxol40 = 2,
    Taxol100 = 3,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 4] = [
        ClassLabel::Control,
        ClassLabel::Taxol20,
        ClassLabel::Taxol40,
        ClassLabel::Taxol100,
    ];
    pub const COUNT: usize = 4;

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn from_ordinal(ordinal: usize) -> Option<Self> {
        Self::ALL.get(ordinal).copied()
    }

    /// Token used in manifest and embedding files.
    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Control => "control",
            ClassLabel::Taxol20 => "taxol20",
            ClassLabel::Taxol40 => "taxol40",
            ClassLabel::Taxol100 => "taxol100",
        }
    }

    /// Human-readable name for reports and plots.
    pub fn display_name(self) -> &'static str {
        match self {
            ClassLabel::Control => "Control",
            ClassLabel::Taxol20 => "20uM",
            ClassLabel::Taxol40 => "40uM",
            ClassLabel::Taxol100 => "100uM",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| format!("unknown class label {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unassigned" => Ok(Split::Unassigned),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDims {
    pub width: u32,
    pub height: u32,
}

/// One labeled image. `image_path` is relative to the dataset root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_path: String,
    pub label: ClassLabel,
    pub split: Split,
    /// Known after a scan; the manifest file does not carry dimensions.
    pub dims: Option<ImageDims>,
    pub content_hash: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub unassigned: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test + self.unassigned
    }

    fn bump(&mut self, split: Split) {
        match split {
            Split::Train => self.train += 1,
            Split::Val => self.val += 1,
            Split::Test => self.test += 1,
            Split::Unassigned => self.unassigned += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<ImageRecord>,
    /// Seed of the split that produced the assignment, if any.
    pub seed: Option<u64>,
}

impl Manifest {
    pub fn split_counts(&self) -> BTreeMap<ClassLabel, SplitCounts> {
        let mut counts: BTreeMap<ClassLabel, SplitCounts> =
            ClassLabel::ALL.iter().map(|&l| (l, SplitCounts::default())).collect();
        for r in &self.records {
            counts.entry(r.label).or_default().bump(r.split);
        }
        counts
    }

    pub fn totals(&self) -> SplitCounts {
        let mut total = SplitCounts::default();
        for r in &self.records {
            total.bump(r.split);
        }
        total
    }

    /// Records of one split, in manifest order.
    pub fn split(&self, split: Split) -> Vec<&ImageRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// Table-I-style summary.
    pub fn summary_table(&self) -> String {
        let mut out = format!("{:<10} {:>6} {:>6} {:>6}\n", "class", "train", "val", "test");
        for (label, c) in self.split_counts() {
            out.push_str(&format!(
                "{:<10} {:>6} {:>6} {:>6}\n",
                label.display_name(),
                c.train,
                c.val,
                c.test
            ));
        }
        let t = self.totals();
        out.push_str(&format!(
            "{:<10} {:>6} {:>6} {:>6}\n",
            "total", t.train, t.val, t.test
        ));
        out
    }
}

/// Label → class subdirectory under the dataset root.
pub type ClassDirMap = BTreeMap<ClassLabel, String>;

pub fn default_class_dirs() -> ClassDirMap {
    ClassLabel::ALL
        .iter()
        .map(|&l| (l, l.as_str().to_string()))
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct ScanOptions {
    /// Reject images whose resolution differs (1600x1200 for the released data).
    pub expected_dims: Option<ImageDims>,
}

const IMAGE_EXTENSIONS: [&str; 6] = ["jpg", "jpeg", "png", "tif", "tiff", "bmp"];

fn is_candidate(path: &Path) -> bool {
    let hidden = path
        .file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.starts_with('.'));
    !hidden && path.is_file()
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Build an unassigned manifest from `<root>/<class_dir>/*`.
///
/// Every non-hidden file in a class directory must decode as an image; a
/// corrupt file aborts the scan with its path.
pub fn scan_dataset(root: &Path, class_dirs: &ClassDirMap, options: &ScanOptions) -> Result<Manifest> {
    if !root.is_dir() {
        return Err(Error::MissingDirectory(root.to_path_buf()));
    }
    let mut records = Vec::new();
    for label in ClassLabel::ALL {
        let sub = class_dirs
            .get(&label)
            .ok_or_else(|| Error::Config(format!("no directory mapped for class {label}")))?;
        let dir = root.join(sub);
        if !dir.is_dir() {
            return Err(Error::MissingDirectory(dir));
        }
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(&dir, e)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|p| is_candidate(p))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::EmptyClass { label, dir });
        }
        for path in files {
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let decoded = image::load_from_memory(&bytes).map_err(|e| Error::Decode {
                path: path.clone(),
                reason: if has_image_extension(&path) {
                    e.to_string()
                } else {
                    format!("not an image file ({e})")
                },
            })?;
            let dims = ImageDims {
                width: decoded.width(),
                height: decoded.height(),
            };
            if let Some(expected) = options.expected_dims {
                if dims != expected {
                    return Err(Error::UnexpectedResolution {
                        path,
                        width: dims.width,
                        height: dims.height,
                        expected_width: expected.width,
                        expected_height: expected.height,
                    });
                }
            }
            let rel = path
                .strip_prefix(root)
                .expect("file lies under root")
                .to_string_lossy()
                .replace('\\', "/");
            records.push(ImageRecord {
                image_path: rel,
                label,
                split: Split::Unassigned,
                dims: Some(dims),
                content_hash: sha256_hex(&bytes),
            });
        }
    }
    let manifest = Manifest {
        records,
        seed: None,
    };
    for (label, c) in manifest.split_counts() {
        log::info!("scanned {label}: {} images", c.total());
    }
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            val_per_class: 16,
            test_per_class: 16,
            seed: 0,
        }
    }
}

/// Assign every record to train/val/test, stratified by class.
///
/// Within a class the records are ordered by content hash and then shuffled
/// by a stream keyed to `(seed, class ordinal)`; the first `val_per_class`
/// go to validation, the next `test_per_class` to test, the rest to train.
/// Any previous assignment is overwritten.
pub fn stratified_split(manifest: &Manifest, spec: &SplitSpec) -> Result<Manifest> {
    let mut seen: HashMap<&str, &str> = HashMap::new();
    for r in &manifest.records {
        if let Some(first) = seen.insert(&r.content_hash, &r.image_path) {
            return Err(Error::DuplicateContent {
                hash: r.content_hash.clone(),
                first: first.to_string(),
                second: r.image_path.clone(),
            });
        }
    }

    let mut out = manifest.clone();
    let requested = spec.val_per_class + spec.test_per_class;
    for label in ClassLabel::ALL {
        let mut members: Vec<usize> = (0..out.records.len())
            .filter(|&i| out.records[i].label == label)
            .collect();
        if requested >= members.len() {
            return Err(Error::UnsatisfiableSplit {
                label,
                available: members.len(),
                requested,
            });
        }
        members.sort_by(|&a, &b| out.records[a].content_hash.cmp(&out.records[b].content_hash));
        let mut rng = stream_rng(spec.seed, label.ordinal() as u64);
        members.shuffle(&mut rng);
        for (rank, &i) in members.iter().enumerate() {
            out.records[i].split = if rank < spec.val_per_class {
                Split::Val
            } else if rank < requested {
                Split::Test
            } else {
                Split::Train
            };
        }
    }
    out.seed = Some(spec.seed);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LeakOffender {
    pub content_hash: String,
    pub splits: Vec<Split>,
    pub paths: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LeakageReport {
    pub offenders: Vec<LeakOffender>,
}

impl LeakageReport {
    pub fn passed(&self) -> bool {
        self.offenders.is_empty()
    }
}

impl fmt::Display for LeakageReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.passed() {
            return write!(f, "leakage check passed");
        }
        writeln!(f, "leakage check FAILED: {} image(s) in multiple splits", self.offenders.len())?;
        for o in &self.offenders {
            let splits: Vec<&str> = o.splits.iter().map(|s| s.as_str()).collect();
            writeln!(f, "  {} in [{}]: {}", o.content_hash, splits.join(","), o.paths.join(", "))?;
        }
        Ok(())
    }
}

/// Fails iff some content hash occurs in two or more assigned splits.
pub fn verify_no_leakage(manifest: &Manifest) -> LeakageReport {
    let mut by_hash: BTreeMap<&str, Vec<&ImageRecord>> = BTreeMap::new();
    for r in &manifest.records {
        by_hash.entry(&r.content_hash).or_default().push(r);
    }
    let offenders = by_hash
        .into_iter()
        .filter_map(|(hash, recs)| {
            let mut splits: Vec<Split> = recs
                .iter()
                .map(|r| r.split)
                .filter(|&s| s != Split::Unassigned)
                .collect();
            splits.sort();
            splits.dedup();
            (splits.len() >= 2).then(|| LeakOffender {
                content_hash: hash.to_string(),
                splits,
                paths: recs.iter().map(|r| r.image_path.clone()).collect(),
            })
        })
        .collect();
    LeakageReport { offenders }
}
