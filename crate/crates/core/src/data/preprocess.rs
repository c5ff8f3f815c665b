use std::path::Path;

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

pub type GrayF32 = ImageBuffer<Luma<f32>, Vec<f32>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelPolicy {
    #[default]
    ReplicateGrayTo3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Augmentation {
    pub enabled: bool,
    pub hflip: bool,
    pub vflip: bool,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            enabled: true,
            hflip: true,
            vflip: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub target_side: u32,
    pub channel_policy: ChannelPolicy,
    pub mean: [f32; 3],
    pub std: [f32; 3],
    pub augmentation: Augmentation,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_side: 224,
            channel_policy: ChannelPolicy::ReplicateGrayTo3,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
            augmentation: Augmentation::default(),
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_side == 0 {
            return Err(Error::Config("target_side must be positive".into()));
        }
        if self.std.iter().any(|&s| !(s.is_finite() && s > 0.0)) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config(format!(
                "normalization needs finite means and positive stds, got mean={:?} std={:?}",
                self.mean, self.std
            )));
        }
        Ok(())
    }
}

/// A 3 x side x side image in channel-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub side: usize,
    pub data: Vec<f32>,
}

/// Decode an image as grayscale in [0, 1] and resize the full frame to
/// `side` x `side` (no cropping).
pub fn decode_gray(path: &Path, side: u32) -> Result<GrayF32> {
    let decoded = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let gray = decoded.to_luma32f();
    if gray.width() == side && gray.height() == side {
        return Ok(gray);
    }
    Ok(imageops::resize(&gray, side, side, FilterType::Triangle))
}

/// Flip (when training), replicate to three channels and normalize.
///
/// `training_rng` is `Some` only in training mode; augmentation draws come
/// exclusively from it, so a stream seeded per record keeps runs reproducible.
pub fn preprocess_gray<R: Rng + ?Sized>(
    gray: &GrayF32,
    config: &PreprocessConfig,
    training_rng: Option<&mut R>,
) -> ImageTensor {
    let mut gray = gray.clone();
    if let Some(rng) = training_rng {
        let aug = config.augmentation;
        if aug.enabled {
            // Both draws are taken unconditionally so the stream position does
            // not depend on which flips are switched on.
            let h = rng.random_bool(0.5);
            let v = rng.random_bool(0.5);
            if aug.hflip && h {
                imageops::flip_horizontal_in_place(&mut gray);
            }
            if aug.vflip && v {
                imageops::flip_vertical_in_place(&mut gray);
            }
        }
    }
    let side = gray.width() as usize;
    let plane = side * gray.height() as usize;
    let mut data = Vec::with_capacity(3 * plane);
    match config.channel_policy {
        ChannelPolicy::ReplicateGrayTo3 => {
            for c in 0..3 {
                let (m, s) = (config.mean[c], config.std[c]);
                data.extend(gray.as_raw().iter().map(|&v| (v - m) / s));
            }
        }
    }
    ImageTensor { side, data }
}

pub fn load_and_preprocess<R: Rng + ?Sized>(
    path: &Path,
    config: &PreprocessConfig,
    training_rng: Option<&mut R>,
) -> Result<ImageTensor> {
    let gray = decode_gray(path, config.target_side)?;
    Ok(preprocess_gray(&gray, config, training_rng))
}
