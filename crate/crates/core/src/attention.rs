//! Convolutional block attention: channel gating followed by spatial gating.
//!
//! Channel attention pools each channel to an average and a maximum, runs
//! both descriptors through one shared two-layer perceptron and squashes the
//! sum with a sigmoid. Spatial attention stacks the per-position channel mean
//! and maximum of the channel-refined map, convolves the 2-channel stack with
//! a single k x k filter and squashes it again. Both gates lie in (0, 1), so
//! the module can only attenuate its input.
//!
//! Layer methods work on batches `(N, C, H, W)`; [`FeatureMap`] and the free
//! functions are the single-map view of the same operators.

use candle_core::{Tensor, D};
use candle_nn::ops::sigmoid;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, Linear, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CbamConfig {
    pub channels: usize,
    pub reduction_ratio: usize,
    pub spatial_kernel: usize,
    /// Biases on the shared channel perceptron.
    pub channel_bias: bool,
}

impl CbamConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            reduction_ratio: 16,
            spatial_kernel: 7,
            channel_bias: false,
        }
    }

    pub fn hidden(&self) -> usize {
        (self.channels / self.reduction_ratio).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.reduction_ratio == 0 {
            return Err(Error::Config(format!(
                "CBAM needs channels >= 1 and reduction_ratio >= 1, got {} and {}",
                self.channels, self.reduction_ratio
            )));
        }
        if self.spatial_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "spatial kernel must be odd to preserve H x W, got {}",
                self.spatial_kernel
            )));
        }
        Ok(())
    }
}

/// Shared perceptron `W2 · relu(W1 · x)`.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ChannelAttention {
    fn mlp(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.relu()?)
    }

    fn channels(&self) -> usize {
        self.fc1.weight.dims()[1]
    }

    /// `(N, C, H, W)` → `(N, C)` gates.
    pub fn weights(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.channels() {
            return Err(Error::Shape(format!(
                "channel attention sized for {} channels, input has {c}",
                self.channels()
            )));
        }
        let flat = x.flatten_from(2)?;
        let avg = flat.mean(D::Minus1)?;
        let max = flat.max(D::Minus1)?;
        Ok(sigmoid(&(self.mlp(&avg)? + self.mlp(&max)?)?)?)
    }
}

/// One `1 x 2 x k x k` filter plus bias over the [mean; max] stack.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    pub conv: Conv2d,
}

impl SpatialAttention {
    /// `(N, C, H, W)` → `(N, H, W)` gates.
    pub fn weights(&self, x: &Tensor) -> Result<Tensor> {
        let k = self.conv.weight.dims();
        if k.len() != 4 || k[0] != 1 || k[1] != 2 || k[2] != k[3] || k[2] % 2 == 0 {
            return Err(Error::Shape(format!("spatial kernel must be 1x2xkxk with odd k, got {k:?}")));
        }
        x.dims4()?;
        let stack = Tensor::cat(&[x.mean_keepdim(1)?, x.max_keepdim(1)?], 1)?;
        Ok(sigmoid(&self.conv.forward(&stack)?)?.squeeze(1)?)
    }
}

#[derive(Debug, Clone)]
pub struct Cbam {
    pub config: CbamConfig,
    pub channel: ChannelAttention,
    pub spatial: SpatialAttention,
}

impl Cbam {
    /// Registers `{prefix}.channel.fc1.weight`, `{prefix}.channel.fc2.weight`
    /// (plus biases when enabled), `{prefix}.spatial.weight` and
    /// `{prefix}.spatial.bias`.
    ///
    /// Weights are fan-in-scaled uniform; the biases feeding the sigmoids start
    /// at zero so fresh modules gate close to 0.5.
    pub fn new(store: &mut ParamStore, init: &mut Init, prefix: &str, config: CbamConfig) -> Result<Self> {
        config.validate()?;
        let (c, hidden, k) = (config.channels, config.hidden(), config.spatial_kernel);
        let fc1 = Linear::new(store, init, &format!("{prefix}.channel.fc1"), c, hidden, config.channel_bias)?;
        let fc2_weight = store.add_param(format!("{prefix}.channel.fc2.weight"), init.fan_in_uniform(&[c, hidden])?)?;
        let fc2_bias = if config.channel_bias {
            Some(store.add_param(format!("{prefix}.channel.fc2.bias"), Init::constant(&[c], 0.0)?)?)
        } else {
            None
        };
        let weight = store.add_param(format!("{prefix}.spatial.weight"), init.fan_in_uniform(&[1, 2, k, k])?)?;
        let bias = store.add_param(format!("{prefix}.spatial.bias"), Init::constant(&[1], 0.0)?)?;
        Ok(Self {
            config,
            channel: ChannelAttention {
                fc1,
                fc2: Linear {
                    weight: fc2_weight,
                    bias: fc2_bias,
                },
            },
            spatial: SpatialAttention {
                conv: Conv2d {
                    weight,
                    bias: Some(bias),
                    stride: 1,
                    padding: (k - 1) / 2,
                },
            },
        })
    }

    /// Channel gating, then spatial gating computed on the channel-refined map.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let mc = self.channel.weights(x)?.reshape((n, c, 1, 1))?;
        let refined = x.broadcast_mul(&mc)?;
        let ms = self.spatial.weights(&refined)?.reshape((n, 1, h, w))?;
        Ok(refined.broadcast_mul(&ms)?)
    }
}

/// A single `C x H x W` feature map with finite entries.
#[derive(Debug, Clone)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(t: Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("feature map dims must be >= 1, got {c}x{h}x{w}")));
        }
        let finite = t
            .to_dtype(candle_core::DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Shape("feature map has non-finite entries".into()));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    fn batched(&self) -> Result<Tensor> {
        Ok(self.0.unsqueeze(0)?)
    }
}

/// Length-C gates in (0, 1).
pub fn channel_attention(f: &FeatureMap, params: &ChannelAttention) -> Result<Tensor> {
    Ok(params.weights(&f.batched()?)?.squeeze(0)?)
}

/// H x W gates in (0, 1).
pub fn spatial_attention(f: &FeatureMap, params: &SpatialAttention) -> Result<Tensor> {
    Ok(params.weights(&f.batched()?)?.squeeze(0)?)
}

pub fn cbam_forward(f: &FeatureMap, cbam: &Cbam) -> Result<FeatureMap> {
    Ok(FeatureMap(cbam.forward(&f.batched()?)?.squeeze(0)?))
}
