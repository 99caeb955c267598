//! Encoder producing the five-level feature pyramid.
//!
//! Built-in encoders are plain stacks of 3x3 convolutions with 2x2 max
//! pooling between levels, so level `i` sits at stride `2^i` and the deepest
//! level at stride 16 (there is no pooling after the last block).
//!
//! Parameters are named `backbone.level{i}.{j}.conv.weight` (plus
//! `.conv.bias` without normalization, or `.bn.{weight,bias,running_mean,running_var}`
//! with it), where `j` counts convolutions within level `i`.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array4, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autograd::{self, Array, Var};
use crate::nn::{Builder, ConvBlock, ParamStore, Session};
use crate::{Error, Result};

pub const LEVELS: usize = 5;
pub const STRIDES: [usize; LEVELS] = [1, 2, 4, 8, 16];

/// Images in `[0, 1]`, laid out `N x H x W x 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    data: Array4<f64>,
}

impl ImageBatch {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        if data.shape()[3] != 3 {
            return Err(Error::Shape(format!(
                "images need 3 channels, got shape {:?}",
                data.shape()
            )));
        }
        if let Some(&v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Shape(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(ImageBatch { data })
    }

    /// Stacks single images (`H x W x 3`) into a batch.
    pub fn stack(images: &[ndarray::Array3<f64>]) -> Result<Self> {
        let views: Vec<_> = images.iter().map(|i| i.view().insert_axis(Axis(0))).collect();
        let data = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::Shape(format!("cannot stack images: {e}")))?;
        Self::new(data)
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// Checks that both spatial axes are multiples of `divisor`.
    pub fn check_divisible(&self, divisor: usize) -> Result<()> {
        for (axis, size) in [("height", self.height()), ("width", self.width())] {
            if size % divisor != 0 {
                return Err(Error::NotDivisible { axis, size, divisor });
            }
        }
        Ok(())
    }

    /// Standardized NCHW copy.
    pub fn to_nchw(&self, mean: &[f64; 3], std: &[f64; 3]) -> Array {
        let (n, h, w, _) = self.data.dim();
        Array::from_shape_fn(IxDyn(&[n, 3, h, w]), |ix| {
            let c = ix[1];
            (self.data[[ix[0], ix[2], ix[3], c]] - mean[c]) / std[c]
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneKind {
    #[serde(rename = "toy")]
    Toy,
    #[serde(rename = "vgg16-style")]
    Vgg16Style,
    /// Supplied by the caller through [`FeatureExtractor`].
    #[serde(rename = "external")]
    External,
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(BackboneKind::Toy),
            "vgg16-style" | "vgg16" => Ok(BackboneKind::Vgg16Style),
            "external" => Ok(BackboneKind::External),
            other => Err(Error::UnknownBackbone(other.to_string())),
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneKind::Toy => "toy",
            BackboneKind::Vgg16Style => "vgg16-style",
            BackboneKind::External => "external",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub channels: [usize; LEVELS],
    pub depths: [usize; LEVELS],
    pub batch_norm: bool,
    /// Per-channel mean subtracted from `[0, 1]` inputs.
    pub pixel_mean: [f64; 3],
    pub pixel_std: [f64; 3],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl BackboneConfig {
    pub fn toy() -> Self {
        BackboneConfig {
            kind: BackboneKind::Toy,
            channels: [16, 32, 64, 64, 64],
            depths: [2; LEVELS],
            batch_norm: true,
            pixel_mean: [0.485, 0.456, 0.406],
            pixel_std: [0.229, 0.224, 0.225],
        }
    }

    /// VGG-16 feature blocks without the final pooling layer.
    pub fn vgg16() -> Self {
        BackboneConfig {
            kind: BackboneKind::Vgg16Style,
            channels: [64, 128, 256, 512, 512],
            depths: [2, 2, 3, 3, 3],
            batch_norm: false,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) || self.depths.contains(&0) {
            return Err(Error::Config(
                "backbone channels and depths must be positive".into(),
            ));
        }
        if self.pixel_std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("pixel_std must be positive".into()));
        }
        Ok(())
    }
}

/// The five encoder outputs, finest first.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

impl FeaturePyramid {
    pub fn spatial_sizes(&self) -> Vec<(usize, usize)> {
        self.levels.iter().map(|l| (l.shape()[2], l.shape()[3])).collect()
    }

    pub fn channels(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.shape()[1]).collect()
    }
}

/// Pluggable encoder contract: standardized NCHW input in, five levels out at
/// strides 1, 2, 4, 8, 16 with [`FeatureExtractor::channels`] channels.
pub trait FeatureExtractor: Send + Sync {
    fn channels(&self) -> [usize; LEVELS];
    fn forward(&self, s: &Session, x: &Var) -> Result<Vec<Var>>;
}

/// Conv blocks per level, max pooling between levels.
#[derive(Debug, Clone)]
pub struct ConvBackbone {
    levels: Vec<Vec<ConvBlock>>,
    channels: [usize; LEVELS],
}

impl ConvBackbone {
    pub fn new(b: &mut Builder, cfg: &BackboneConfig, momentum: f64) -> Self {
        let mut in_c = 3;
        let levels = (0..LEVELS)
            .map(|i| {
                b.scoped(format!("level{i}"), |b| {
                    (0..cfg.depths[i])
                        .map(|j| {
                            let block = b.scoped(j.to_string(), |b| {
                                ConvBlock::build(b, in_c, cfg.channels[i], 3, cfg.batch_norm, true, momentum)
                            });
                            in_c = cfg.channels[i];
                            block
                        })
                        .collect()
                })
            })
            .collect();
        ConvBackbone {
            levels,
            channels: cfg.channels,
        }
    }
}

impl FeatureExtractor for ConvBackbone {
    fn channels(&self) -> [usize; LEVELS] {
        self.channels
    }

    fn forward(&self, s: &Session, x: &Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(LEVELS);
        let mut h = x.clone();
        for (i, blocks) in self.levels.iter().enumerate() {
            if i > 0 {
                h = autograd::max_pool2(&h);
            }
            for block in blocks {
                h = block.forward(s, &h)?;
            }
            out.push(h.clone());
        }
        Ok(out)
    }
}

/// Encoder plus input standardization.
pub struct Backbone {
    pub config: BackboneConfig,
    extractor: Box<dyn FeatureExtractor>,
}

impl fmt::Debug for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Backbone").field("config", &self.config).finish()
    }
}

impl Backbone {
    /// Builds a built-in encoder under the `backbone` parameter scope.
    pub fn build(b: &mut Builder, cfg: &BackboneConfig, momentum: f64) -> Result<Self> {
        cfg.validate()?;
        match cfg.kind {
            BackboneKind::Toy | BackboneKind::Vgg16Style => {
                let conv = b.scoped("backbone", |b| ConvBackbone::new(b, cfg, momentum));
                Ok(Backbone {
                    config: cfg.clone(),
                    extractor: Box::new(conv),
                })
            }
            BackboneKind::External => Err(Error::Config(
                "external backbones are supplied with Backbone::external".into(),
            )),
        }
    }

    /// Wraps a caller-provided encoder. Its declared channels replace the config's.
    pub fn external(cfg: &BackboneConfig, extractor: Box<dyn FeatureExtractor>) -> Self {
        let mut config = cfg.clone();
        config.kind = BackboneKind::External;
        config.channels = extractor.channels();
        Backbone { config, extractor }
    }

    pub fn channels(&self) -> [usize; LEVELS] {
        self.extractor.channels()
    }

    /// Runs the encoder on a batch, checking the stride contract on the way out.
    pub fn extract(&self, s: &Session, images: &ImageBatch) -> Result<FeaturePyramid> {
        images.check_divisible(STRIDES[LEVELS - 1])?;
        let x = Var::constant(images.to_nchw(&self.config.pixel_mean, &self.config.pixel_std));
        let levels = self.extractor.forward(s, &x)?;
        if levels.len() != LEVELS {
            return Err(Error::Shape(format!(
                "encoder returned {} levels, expected {LEVELS}",
                levels.len()
            )));
        }
        let channels = self.channels();
        for (i, level) in levels.iter().enumerate() {
            let expected = [
                images.len(),
                channels[i],
                images.height() / STRIDES[i],
                images.width() / STRIDES[i],
            ];
            if level.shape() != expected {
                return Err(Error::Shape(format!(
                    "level {i} has shape {:?}, expected {expected:?}",
                    level.shape()
                )));
            }
        }
        Ok(FeaturePyramid { levels })
    }
}

/// Loads encoder weights (e.g. converted from a pretrained checkpoint) by
/// name. Keys without the `backbone.` prefix are ignored; the unmatched keys
/// are returned.
pub fn load_backbone_weights(store: &mut ParamStore, weights: &HashMap<String, Array>) -> Result<Vec<String>> {
    let filtered: HashMap<String, Array> = weights
        .iter()
        .filter(|(k, _)| k.starts_with("backbone."))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    store.load_named(&filtered, false)
}
