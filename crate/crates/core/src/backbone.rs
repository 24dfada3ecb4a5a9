//! Weight-shared feature extractor.
//!
//! A small stack of 3x3 convolution blocks with ReLU, configurable per-block
//! channel width, stride and frozen flag. The same instance serves the query
//! branch and every support branch, which is what makes the matching
//! relationship learnable. Lower blocks can be frozen (excluded from
//! gradient updates) to mirror fixing early stages of a pretrained network.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::feature::FeatureMap;
use crate::nn::{relu, relu_backward, Conv2d};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum BackboneError {
    ImageTooSmall { h: usize, w: usize, stride: usize },
    ChannelMismatch { image: usize, expected: usize },
}

impl core::fmt::Display for BackboneError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            BackboneError::ImageTooSmall { h, w, stride } => {
                write!(f, "image {h}x{w} smaller than one stride cell ({stride})")
            }
            BackboneError::ChannelMismatch { image, expected } => {
                write!(f, "image has {image} channels, extractor expects {expected}")
            }
        }
    }
}

impl core::error::Error for BackboneError {}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConvBlockConfig {
    pub out_channels: usize,
    pub stride: usize,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub blocks: Vec<ConvBlockConfig>,
}

impl BackboneConfig {
    /// Reference extractor: four 3x3 blocks, total stride 8, 64 output
    /// channels, first block frozen.
    pub fn reference() -> Self {
        Self {
            in_channels: 3,
            blocks: alloc::vec![
                ConvBlockConfig { out_channels: 16, stride: 2, frozen: true },
                ConvBlockConfig { out_channels: 32, stride: 2, frozen: false },
                ConvBlockConfig { out_channels: 64, stride: 2, frozen: false },
                ConvBlockConfig { out_channels: 64, stride: 1, frozen: false },
            ],
        }
    }

    /// Narrow variant for fast desk-scale training runs.
    pub fn toy() -> Self {
        Self {
            in_channels: 3,
            blocks: alloc::vec![
                ConvBlockConfig { out_channels: 8, stride: 2, frozen: false },
                ConvBlockConfig { out_channels: 16, stride: 2, frozen: false },
                ConvBlockConfig { out_channels: 24, stride: 2, frozen: false },
                ConvBlockConfig { out_channels: 24, stride: 1, frozen: false },
            ],
        }
    }

    pub fn total_stride(&self) -> usize {
        self.blocks.iter().map(|b| b.stride).product()
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map_or(self.in_channels, |b| b.out_channels)
    }
}

/// Per-block cached activations for the backward pass: the block input and
/// the pre-activation convolution output.
#[derive(Debug)]
pub struct BackboneCache {
    inputs: Vec<Tensor>,
    preacts: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub blocks: Vec<Conv2d>,
    pub frozen: Vec<bool>,
    in_channels: usize,
    stride: usize,
}

impl Backbone {
    pub fn new<R: Rng>(config: &BackboneConfig, rng: &mut R) -> Self {
        let mut blocks = Vec::with_capacity(config.blocks.len());
        let mut frozen = Vec::with_capacity(config.blocks.len());
        let mut c_in = config.in_channels;
        for b in &config.blocks {
            blocks.push(Conv2d::new(3, 3, c_in, b.out_channels, b.stride, 1, rng));
            frozen.push(b.frozen);
            c_in = b.out_channels;
        }
        Self {
            blocks,
            frozen,
            in_channels: config.in_channels,
            stride: config.blocks.iter().map(|b| b.stride).product(),
        }
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map_or(self.in_channels, |b| b.w.value.dim(3))
    }

    fn check_input(&self, image: &Tensor) -> Result<(), BackboneError> {
        let (h, w, c) = (image.dim(0), image.dim(1), image.dim(2));
        if c != self.in_channels {
            return Err(BackboneError::ChannelMismatch { image: c, expected: self.in_channels });
        }
        if h < self.stride || w < self.stride {
            return Err(BackboneError::ImageTooSmall { h, w, stride: self.stride });
        }
        Ok(())
    }

    /// Deterministic feature extraction; identical weights give identical
    /// features regardless of which branch calls it.
    pub fn extract(&self, image: &Tensor, source: impl Into<String>) -> Result<FeatureMap, BackboneError> {
        self.check_input(image)?;
        let mut x = image.clone();
        for conv in &self.blocks {
            x = relu(&conv.forward(&x));
        }
        Ok(FeatureMap::new(x, self.stride, source))
    }

    /// Forward keeping the activations needed by [`Backbone::backward`].
    pub fn extract_cached(
        &self,
        image: &Tensor,
        source: impl Into<String>,
    ) -> Result<(FeatureMap, BackboneCache), BackboneError> {
        self.check_input(image)?;
        let mut inputs = Vec::with_capacity(self.blocks.len());
        let mut preacts = Vec::with_capacity(self.blocks.len());
        let mut x = image.clone();
        for conv in &self.blocks {
            let z = conv.forward(&x);
            inputs.push(x);
            x = relu(&z);
            preacts.push(z);
        }
        Ok((FeatureMap::new(x, self.stride, source), BackboneCache { inputs, preacts }))
    }

    /// Accumulate parameter gradients from the gradient w.r.t. the output
    /// feature map. The leading frozen prefix is skipped entirely; interior
    /// frozen blocks still propagate the input gradient.
    pub fn backward(&mut self, cache: &BackboneCache, d_features: &Tensor) {
        let mut dy = d_features.clone();
        for i in (0..self.blocks.len()).rev() {
            let dz = relu_backward(&cache.preacts[i], &dy);
            if self.frozen[i] && self.frozen[..i].iter().all(|&f| f) {
                break;
            }
            dy = self.blocks[i].backward(&cache.inputs[i], &dz);
        }
    }

    pub fn zero_grad(&mut self) {
        for conv in &mut self.blocks {
            conv.w.zero_grad();
            conv.b.zero_grad();
        }
    }
}
