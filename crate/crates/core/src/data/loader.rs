use std::path::Path;

use candle_core::{Device, Tensor};

use super::preprocess::{decode_gray, preprocess_gray, GrayF32};
use super::{ClassLabel, ImageRecord, PreprocessConfig};
use crate::error::{Error, Result};
use crate::seeding::{mix, stream_rng, streams};

/// Decoded, resized grayscale frames of one split, kept in memory so each
/// epoch only pays for flips and normalization.
#[derive(Debug, Clone)]
pub struct ImageSet {
    frames: Vec<GrayF32>,
    labels: Vec<ClassLabel>,
    ids: Vec<String>,
    config: PreprocessConfig,
}

/// Where augmentation draws come from: one stream per (seed, epoch, item).
#[derive(Debug, Clone, Copy)]
pub struct AugmentKey {
    pub seed: u64,
    pub epoch: usize,
}

impl ImageSet {
    pub fn load(root: &Path, records: &[&ImageRecord], config: &PreprocessConfig) -> Result<Self> {
        config.validate()?;
        let frames = records
            .iter()
            .map(|r| decode_gray(&root.join(&r.image_path), config.target_side))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            frames,
            labels: records.iter().map(|r| r.label).collect(),
            ids: records.iter().map(|r| r.image_path.clone()).collect(),
            config: config.clone(),
        })
    }

    /// Frames must already be `target_side` square.
    pub fn from_frames(frames: Vec<GrayF32>, labels: Vec<ClassLabel>, ids: Vec<String>, config: &PreprocessConfig) -> Result<Self> {
        config.validate()?;
        if frames.len() != labels.len() || frames.len() != ids.len() {
            return Err(Error::Shape(format!(
                "{} frames, {} labels, {} ids",
                frames.len(),
                labels.len(),
                ids.len()
            )));
        }
        let side = config.target_side;
        if let Some(f) = frames.iter().find(|f| f.width() != side || f.height() != side) {
            return Err(Error::Shape(format!(
                "frame is {}x{}, expected {side}x{side}",
                f.width(),
                f.height()
            )));
        }
        Ok(Self {
            frames,
            labels,
            ids,
            config: config.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn labels(&self) -> &[ClassLabel] {
        &self.labels
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn config(&self) -> &PreprocessConfig {
        &self.config
    }

    /// Images of `self` followed by those of `other`.
    pub fn concat(&self, other: &ImageSet) -> Result<Self> {
        if self.config != other.config {
            return Err(Error::Config("cannot join image sets with different preprocessing".into()));
        }
        let mut out = self.clone();
        out.frames.extend_from_slice(&other.frames);
        out.labels.extend_from_slice(&other.labels);
        out.ids.extend_from_slice(&other.ids);
        Ok(out)
    }

    /// `(B, 3, S, S)` batch for `indices`; augmented only when `augment` is set.
    pub fn batch(&self, indices: &[usize], augment: Option<AugmentKey>) -> Result<Tensor> {
        let side = self.config.target_side as usize;
        let mut data = Vec::with_capacity(indices.len() * 3 * side * side);
        for &i in indices {
            let frame = self
                .frames
                .get(i)
                .ok_or_else(|| Error::Shape(format!("index {i} out of range for {} images", self.len())))?;
            let t = match augment {
                Some(key) => {
                    let stream = mix(streams::AUGMENT, mix(key.epoch as u64, i as u64));
                    preprocess_gray(frame, &self.config, Some(&mut stream_rng(key.seed, stream)))
                }
                None => preprocess_gray::<rand_chacha::ChaCha8Rng>(frame, &self.config, None),
            };
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor::from_vec(data, (indices.len(), 3, side, side), &Device::Cpu)?)
    }

    pub fn label_tensor(&self, indices: &[usize]) -> Result<Tensor> {
        let ids: Vec<u32> = indices.iter().map(|&i| self.labels[i].ordinal() as u32).collect();
        Ok(Tensor::from_vec(ids, indices.len(), &Device::Cpu)?)
    }
}
