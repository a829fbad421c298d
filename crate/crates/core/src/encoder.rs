//! EfficientNet contracting path: the B0 block table, compound scaling to
//! B1..B5, MBConv blocks and the five-level feature pyramid.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{load_pointwise, pointwise_specs, ConvBn, ConvBnGeometry, ParamSpec};
use crate::tensor::{activate, global_avg_pool, scale_channels, Activation, ConvWeights, Tensor, WeightStore};

/// Batch-norm epsilon used throughout the encoder.
pub const ENCODER_BN_EPS: f32 = 1e-3;

/// Input extents must be multiples of the deepest feature stride.
pub const ENCODER_STRIDE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    B0,
    B1,
    B2,
    B3,
    B4,
    B5,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::B0,
        Variant::B1,
        Variant::B2,
        Variant::B3,
        Variant::B4,
        Variant::B5,
    ];

    pub fn coefficients(self) -> ScalingCoefficients {
        let (width_mult, depth_mult, resolution) = match self {
            Variant::B0 => (1.0, 1.0, 224),
            Variant::B1 => (1.0, 1.1, 240),
            Variant::B2 => (1.1, 1.2, 260),
            Variant::B3 => (1.2, 1.4, 300),
            Variant::B4 => (1.4, 1.8, 380),
            Variant::B5 => (1.6, 2.2, 456),
        };
        ScalingCoefficients {
            width_mult,
            depth_mult,
            resolution,
        }
    }

    pub fn config(self) -> EncoderConfig {
        scale_config(&baseline_b0_config(), self.coefficients())
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = Variant::ALL.iter().position(|v| v == self).unwrap();
        write!(f, "b{i}")
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Validation(format!("unknown variant `{s}` (expected b0..b5)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingCoefficients {
    pub width_mult: f64,
    pub depth_mult: f64,
    pub resolution: usize,
}

/// One MBConv stage: `repeats` blocks sharing expansion, kernel and output width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub expansion_ratio: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub repeats: usize,
    pub se_ratio: Option<f64>,
}

impl BlockSpec {
    /// The individual blocks of the stage. Only the first one downsamples
    /// or changes width.
    pub fn instances(&self) -> impl Iterator<Item = BlockSpec> + '_ {
        (0..self.repeats).map(move |i| BlockSpec {
            stride: if i == 0 { self.stride } else { 1 },
            in_channels: if i == 0 { self.in_channels } else { self.out_channels },
            repeats: 1,
            ..*self
        })
    }

    pub fn expanded_channels(&self) -> usize {
        self.in_channels * self.expansion_ratio
    }

    /// Width of the squeeze-excitation bottleneck, relative to the block input.
    pub fn se_channels(&self) -> Option<usize> {
        self.se_ratio
            .map(|r| ((self.in_channels as f64 * r).floor() as usize).max(1))
    }

    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StemSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// `None` for coefficient sets that match no named variant.
    pub variant: Option<Variant>,
    pub stem: StemSpec,
    pub blocks: Vec<BlockSpec>,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let mut prev = self.stem.out_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.in_channels != prev {
                return Err(Error::Validation(format!(
                    "stage {i} takes {} channels but the previous stage produces {prev}",
                    b.in_channels
                )));
            }
            if b.kernel_size % 2 == 0 || !(1..=2).contains(&b.stride) || b.repeats == 0 {
                return Err(Error::Validation(format!("stage {i} has invalid geometry {b:?}")));
            }
            prev = b.out_channels;
        }
        let strides: Vec<usize> = self.tap_stages().into_iter().map(|(_, s)| s).collect();
        if strides != [2, 4, 8, 16, 32] {
            return Err(Error::Validation(format!(
                "feature taps sit at strides {strides:?}, expected [2, 4, 8, 16, 32]"
            )));
        }
        Ok(())
    }

    /// `(stage index, cumulative stride)` of each feature tap: the last stage
    /// before every downsampling step, plus the final stage.
    pub fn tap_stages(&self) -> Vec<(usize, usize)> {
        let mut stride = self.stem.stride;
        let mut taps = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            stride *= b.stride;
            let next_downsamples = self.blocks.get(i + 1).is_none_or(|n| n.stride == 2);
            if next_downsamples {
                taps.push((i, stride));
            }
        }
        taps
    }

    pub fn tap_channels(&self) -> Vec<usize> {
        self.tap_stages()
            .into_iter()
            .map(|(i, _)| self.blocks[i].out_channels)
            .collect()
    }

    pub fn total_blocks(&self) -> usize {
        self.blocks.iter().map(|b| b.repeats).sum()
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        stem_geometry(&self.stem).specs("encoder.stem", &mut out);
        for (i, block) in self.blocks.iter().flat_map(|s| s.instances()).enumerate() {
            let prefix = format!("encoder.blocks.{i}");
            let g = MbConvGeometry::of(&block);
            if let Some(e) = g.expand {
                e.specs(&format!("{prefix}.expand"), &mut out);
            }
            g.depthwise.specs(&format!("{prefix}.depthwise"), &mut out);
            if let Some(se) = block.se_channels() {
                pointwise_specs(&format!("{prefix}.se.reduce"), block.expanded_channels(), se, &mut out);
                pointwise_specs(&format!("{prefix}.se.expand"), se, block.expanded_channels(), &mut out);
            }
            g.project.specs(&format!("{prefix}.project"), &mut out);
        }
        out
    }
}

/// EfficientNet-B0: a 32-channel 3×3/2 stem followed by seven MBConv stages.
pub fn baseline_b0_config() -> EncoderConfig {
    // (expansion, kernel, stride, out_channels, repeats)
    const TABLE: [(usize, usize, usize, usize, usize); 7] = [
        (1, 3, 1, 16, 1),
        (6, 3, 2, 24, 2),
        (6, 5, 2, 40, 2),
        (6, 3, 2, 80, 3),
        (6, 5, 1, 112, 3),
        (6, 5, 2, 192, 4),
        (6, 3, 1, 320, 1),
    ];
    let stem = StemSpec {
        in_channels: 3,
        out_channels: 32,
        kernel_size: 3,
        stride: 2,
    };
    let mut in_channels = stem.out_channels;
    let blocks = TABLE
        .iter()
        .map(|&(expansion_ratio, kernel_size, stride, out_channels, repeats)| {
            let b = BlockSpec {
                expansion_ratio,
                kernel_size,
                stride,
                in_channels,
                out_channels,
                repeats,
                se_ratio: Some(0.25),
            };
            in_channels = out_channels;
            b
        })
        .collect();
    EncoderConfig {
        variant: Some(Variant::B0),
        stem,
        blocks,
    }
}

/// Scales a channel count and snaps it to a multiple of 8, never dropping
/// more than 10% below the exact product.
pub fn round_channels(channels: usize, width_mult: f64) -> usize {
    const DIVISOR: usize = 8;
    let scaled = channels as f64 * width_mult;
    let mut rounded = ((scaled + DIVISOR as f64 / 2.0) as usize / DIVISOR * DIVISOR).max(DIVISOR);
    if (rounded as f64) < 0.9 * scaled {
        rounded += DIVISOR;
    }
    rounded
}

pub fn round_repeats(repeats: usize, depth_mult: f64) -> usize {
    (repeats as f64 * depth_mult).ceil() as usize
}

pub fn scale_config(base: &EncoderConfig, coeffs: ScalingCoefficients) -> EncoderConfig {
    let w = coeffs.width_mult;
    let stem = StemSpec {
        out_channels: round_channels(base.stem.out_channels, w),
        ..base.stem
    };
    let blocks = base
        .blocks
        .iter()
        .map(|b| BlockSpec {
            in_channels: round_channels(b.in_channels, w),
            out_channels: round_channels(b.out_channels, w),
            repeats: round_repeats(b.repeats, coeffs.depth_mult),
            ..*b
        })
        .collect();
    let variant = Variant::ALL.iter().copied().find(|v| v.coefficients() == coeffs);
    EncoderConfig { variant, stem, blocks }
}

/// Exact number of trainable values: conv kernels, biases, BN scale/shift
/// and SE layers. Running BN statistics are excluded.
pub fn parameter_count(config: &EncoderConfig) -> usize {
    crate::params::count_trainable(&config.param_specs())
}

fn stem_geometry(stem: &StemSpec) -> ConvBnGeometry {
    ConvBnGeometry {
        in_channels: stem.in_channels,
        out_channels: stem.out_channels,
        kernel: stem.kernel_size,
        stride: stem.stride,
        groups: 1,
    }
}

struct MbConvGeometry {
    expand: Option<ConvBnGeometry>,
    depthwise: ConvBnGeometry,
    project: ConvBnGeometry,
}

impl MbConvGeometry {
    fn of(b: &BlockSpec) -> Self {
        let mid = b.expanded_channels();
        MbConvGeometry {
            expand: (b.expansion_ratio != 1).then_some(ConvBnGeometry {
                in_channels: b.in_channels,
                out_channels: mid,
                kernel: 1,
                stride: 1,
                groups: 1,
            }),
            depthwise: ConvBnGeometry {
                in_channels: mid,
                out_channels: mid,
                kernel: b.kernel_size,
                stride: b.stride,
                groups: mid,
            },
            project: ConvBnGeometry {
                in_channels: mid,
                out_channels: b.out_channels,
                kernel: 1,
                stride: 1,
                groups: 1,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SqueezeExcite {
    pub reduce: ConvWeights,
    pub expand: ConvWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MbConvWeights {
    pub expand: Option<ConvBn>,
    pub depthwise: ConvBn,
    pub se: Option<SqueezeExcite>,
    pub project: ConvBn,
}

impl MbConvWeights {
    pub fn load(store: &WeightStore, prefix: &str, spec: &BlockSpec) -> Result<Self> {
        let g = MbConvGeometry::of(spec);
        let expand = g
            .expand
            .map(|e| e.load(store, &format!("{prefix}.expand"), Activation::Swish, ENCODER_BN_EPS))
            .transpose()?;
        let depthwise = g
            .depthwise
            .load(store, &format!("{prefix}.depthwise"), Activation::Swish, ENCODER_BN_EPS)?;
        let se = spec
            .se_channels()
            .map(|se| -> Result<SqueezeExcite> {
                let mid = spec.expanded_channels();
                Ok(SqueezeExcite {
                    reduce: load_pointwise(store, &format!("{prefix}.se.reduce"), mid, se)?,
                    expand: load_pointwise(store, &format!("{prefix}.se.expand"), se, mid)?,
                })
            })
            .transpose()?;
        let project = g
            .project
            .load(store, &format!("{prefix}.project"), Activation::Linear, ENCODER_BN_EPS)?;
        Ok(MbConvWeights {
            expand,
            depthwise,
            se,
            project,
        })
    }
}

/// The block body: expand → depthwise → squeeze-excitation → linear projection.
pub fn mbconv_body(input: &Tensor, spec: &BlockSpec, weights: &MbConvWeights) -> Result<Tensor> {
    if input.dims().c != spec.in_channels {
        return Err(Error::shape(format!(
            "MBConv expects {} input channels, got {}",
            spec.in_channels,
            input.dims().c
        )));
    }
    let expanded = match &weights.expand {
        Some(e) => e.forward(input)?,
        None => input.clone(),
    };
    let mut x = weights.depthwise.forward(&expanded)?;
    if let Some(se) = &weights.se {
        let s = global_avg_pool(&x);
        let s = activate(&crate::tensor::conv2d(&s, &se.reduce)?, Activation::Swish);
        let s = activate(&crate::tensor::conv2d(&s, &se.expand)?, Activation::Sigmoid);
        x = scale_channels(&x, &s)?;
    }
    weights.project.forward(&x)
}

/// One MBConv block, adding the input back when the block keeps shape.
pub fn mbconv_forward(input: &Tensor, spec: &BlockSpec, weights: &MbConvWeights) -> Result<Tensor> {
    let body = mbconv_body(input, spec, weights)?;
    if spec.has_residual() {
        body.add(input)
    } else {
        Ok(body)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub stem: ConvBn,
    pub blocks: Vec<MbConvWeights>,
}

impl EncoderWeights {
    pub fn load(store: &WeightStore, config: &EncoderConfig) -> Result<Self> {
        let stem = stem_geometry(&config.stem).load(store, "encoder.stem", Activation::Swish, ENCODER_BN_EPS)?;
        let blocks = config
            .blocks
            .iter()
            .flat_map(|s| s.instances())
            .enumerate()
            .map(|(i, b)| MbConvWeights::load(store, &format!("encoder.blocks.{i}"), &b))
            .collect::<Result<_>>()?;
        Ok(EncoderWeights { stem, blocks })
    }
}

pub fn check_divisible(h: usize, w: usize) -> Result<()> {
    if !h.is_multiple_of(ENCODER_STRIDE) || !w.is_multiple_of(ENCODER_STRIDE) {
        return Err(Error::precondition(format!(
            "input spatial dims {h}x{w} must both be multiples of {ENCODER_STRIDE}"
        )));
    }
    Ok(())
}

/// Runs the encoder and returns the five feature maps at strides 2..32,
/// shallowest first.
pub fn encoder_forward(input: &Tensor, config: &EncoderConfig, weights: &EncoderWeights) -> Result<Vec<Tensor>> {
    let d = input.dims();
    check_divisible(d.h, d.w)?;
    let taps: Vec<usize> = config.tap_stages().into_iter().map(|(i, _)| i).collect();
    let mut x = weights.stem.forward(input)?;
    let mut features = Vec::with_capacity(taps.len());
    let mut block_weights = weights.blocks.iter();
    for (stage_idx, stage) in config.blocks.iter().enumerate() {
        for spec in stage.instances() {
            let w = block_weights
                .next()
                .ok_or_else(|| Error::WeightStore("fewer block weights than blocks".into()))?;
            x = mbconv_forward(&x, &spec, w)?;
        }
        if taps.contains(&stage_idx) {
            features.push(x.clone());
        }
    }
    Ok(features)
}
