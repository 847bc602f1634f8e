//! Siamese dense feature extraction and the four-level feature pyramid.
//!
//! Tensors are laid out NCHW. Pyramid level 0 is the coarsest (stride 32) and
//! level 3 the finest (stride 4).

use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, ConvTranspose2d};
use serde::{Deserialize, Serialize};

use crate::data_model::check_divisible;
use crate::error::{Error, Result};
use crate::nn::{gelu, max_pool_2x2, ParamStore};

/// Strides of the pyramid levels, coarsest first.
pub const PYRAMID_STRIDES: [usize; 4] = [32, 16, 8, 4];

/// Total stride of the base features.
pub const BASE_STRIDE: usize = 16;

/// A dense feature extractor with total stride [`BASE_STRIDE`].
pub trait DenseBackbone: Send + Sync + std::fmt::Debug {
    /// (B, C, H, W) images to (B, d, H/16, W/16) features.
    fn forward(&self, images: &Tensor) -> Result<Tensor>;
    fn out_channels(&self) -> usize;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Widths of the first three stages; the fourth emits `out_channels`.
    pub stage_channels: [usize; 3],
    pub out_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stage_channels: [16, 32, 64],
            out_channels: 64,
        }
    }
}

/// Four 3×3 stride-2 convolutions, each followed by GELU.
#[derive(Clone, Debug)]
pub struct ConvBackbone {
    stages: Vec<Conv2d>,
    out_channels: usize,
}

impl ConvBackbone {
    pub fn new(p: &mut ParamStore, cfg: &BackboneConfig) -> Result<Self> {
        let widths = [
            cfg.in_channels,
            cfg.stage_channels[0],
            cfg.stage_channels[1],
            cfg.stage_channels[2],
            cfg.out_channels,
        ];
        let stages = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| p.conv2d(&format!("backbone.stage{i}"), w[0], w[1], 3, 2, 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            stages,
            out_channels: cfg.out_channels,
        })
    }
}

impl DenseBackbone for ConvBackbone {
    fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let mut x = images.clone();
        for s in &self.stages {
            x = gelu(&s.forward(&x)?)?;
        }
        Ok(x)
    }

    fn out_channels(&self) -> usize {
        self.out_channels
    }
}

/// Four feature maps per image, coarsest first, each (B, d, H/s, W/s).
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn level_sizes(&self) -> Result<Vec<(usize, usize)>> {
        self.levels
            .iter()
            .map(|l| {
                let (_, _, h, w) = l.dims4()?;
                Ok((h, w))
            })
            .collect()
    }
}

/// Max-pool downward and transposed convolutions upward from the base.
#[derive(Clone, Debug)]
pub struct PyramidNeck {
    up8: ConvTranspose2d,
    up4a: ConvTranspose2d,
    up4b: ConvTranspose2d,
}

impl PyramidNeck {
    pub fn new(p: &mut ParamStore, d: usize) -> Result<Self> {
        Ok(Self {
            up8: p.conv_transpose2d("neck.up8", d, d, 2)?,
            up4a: p.conv_transpose2d("neck.up4a", d, d, 2)?,
            up4b: p.conv_transpose2d("neck.up4b", d, d, 2)?,
        })
    }

    /// Stride 32 = 2×2 max-pool of the base, stride 16 = base, stride 8 = one
    /// transposed convolution, stride 4 = two with a GELU between them.
    pub fn build_pyramid(&self, base: &Tensor) -> Result<FeaturePyramid> {
        let (_, _, h, w) = base.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("base features {h}x{w} must have even size")));
        }
        let s32 = max_pool_2x2(base)?;
        let s8 = self.up8.forward(base)?;
        let s4 = self.up4b.forward(&gelu(&self.up4a.forward(base)?)?)?;
        Ok(FeaturePyramid {
            levels: vec![s32, base.clone(), s8, s4],
        })
    }
}

#[derive(Debug)]
pub struct VisionEncoder {
    backbone: Box<dyn DenseBackbone>,
    neck: PyramidNeck,
}

impl VisionEncoder {
    pub fn new(p: &mut ParamStore, cfg: &BackboneConfig) -> Result<Self> {
        let backbone = ConvBackbone::new(p, cfg)?;
        Self::with_backbone(p, Box::new(backbone))
    }

    /// Uses a caller-provided backbone.
    pub fn with_backbone(p: &mut ParamStore, backbone: Box<dyn DenseBackbone>) -> Result<Self> {
        let neck = PyramidNeck::new(p, backbone.out_channels())?;
        Ok(Self { backbone, neck })
    }

    pub fn width(&self) -> usize {
        self.backbone.out_channels()
    }

    /// Base features at stride 16.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = images.dims4()?;
        check_divisible(h, w)?;
        self.backbone.forward(images)
    }

    pub fn build_pyramid(&self, base: &Tensor) -> Result<FeaturePyramid> {
        self.neck.build_pyramid(base)
    }

    /// Encodes both temporal batches with the same weights.
    pub fn encode_pair(&self, img1: &Tensor, img2: &Tensor) -> Result<(FeaturePyramid, FeaturePyramid)> {
        if img1.dims() != img2.dims() {
            return Err(Error::Shape(format!(
                "temporal batches differ: {:?} vs {:?}",
                img1.dims(),
                img2.dims()
            )));
        }
        let b = img1.dim(0)?;
        let both = Tensor::cat(&[img1, img2], 0)?;
        let pyr = self.build_pyramid(&self.encode(&both)?)?;
        let mut first = Vec::with_capacity(4);
        let mut second = Vec::with_capacity(4);
        for l in pyr.levels {
            first.push(l.narrow(0, 0, b)?);
            second.push(l.narrow(0, b, b)?);
        }
        Ok((FeaturePyramid { levels: first }, FeaturePyramid { levels: second }))
    }
}
