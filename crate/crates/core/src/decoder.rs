//! UNet expansion path on top of the EfficientNet encoder, and the full
//! EfficientUNet segmentation model.

use serde::{Deserialize, Serialize};

use crate::encoder::{check_divisible, encoder_forward, EncoderConfig, EncoderWeights, Variant};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::mask::NUM_CLASSES;
use crate::params::{
    count_trainable, load_pointwise, materialize, pointwise_specs, ConvBn, ConvBnGeometry, Init, ParamSpec,
};
use crate::tensor::{
    bilinear_upsample2x, concat_channels, conv2d, resize_bilinear, Activation, ConvWeights, Tensor, WeightStore,
};

pub const DECODER_BN_EPS: f32 = 1e-5;

/// Model input size used for native 1400×2100 scenes.
pub const DEFAULT_INPUT_SIZE: (usize, usize) = (1312, 2080);

pub const DECODER_LEVELS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Output width of each decoder block, deepest first.
    pub channels: [usize; DECODER_LEVELS],
    pub convs_per_block: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            channels: [256, 128, 64, 32, 16],
            convs_per_block: 2,
        }
    }
}

impl DecoderConfig {
    /// `(in_channels, skip_channels, out_channels)` for each block given the
    /// encoder tap widths (shallowest first).
    pub fn block_widths(&self, taps: &[usize]) -> Result<Vec<(usize, usize, usize)>> {
        if taps.len() != DECODER_LEVELS {
            return Err(Error::Validation(format!(
                "decoder needs {DECODER_LEVELS} encoder taps, got {}",
                taps.len()
            )));
        }
        if self.convs_per_block == 0 || self.channels.contains(&0) {
            return Err(Error::Validation(
                "decoder widths and conv count must be positive".into(),
            ));
        }
        let mut deep = taps[DECODER_LEVELS - 1];
        Ok((0..DECODER_LEVELS)
            .map(|level| {
                // Block `level` fuses the tap one resolution above; the last block has none.
                let skip = if level + 1 < DECODER_LEVELS {
                    taps[DECODER_LEVELS - 2 - level]
                } else {
                    0
                };
                let out = self.channels[level];
                let widths = (deep, skip, out);
                deep = out;
                widths
            })
            .collect())
    }

    pub fn param_specs(&self, taps: &[usize]) -> Result<Vec<ParamSpec>> {
        let mut out = Vec::new();
        for (level, (deep, skip, width)) in self.block_widths(taps)?.into_iter().enumerate() {
            for j in 0..self.convs_per_block {
                conv_geometry(if j == 0 { deep + skip } else { width }, width)
                    .specs(&format!("decoder.blocks.{level}.convs.{j}"), &mut out);
            }
        }
        pointwise_specs("head", self.channels[DECODER_LEVELS - 1], NUM_CLASSES, &mut out);
        Ok(out)
    }
}

fn conv_geometry(in_channels: usize, out_channels: usize) -> ConvBnGeometry {
    ConvBnGeometry {
        in_channels,
        out_channels,
        kernel: 3,
        stride: 1,
        groups: 1,
    }
}

/// Trainable parameters of the decoder blocks plus the segmentation head.
pub fn decoder_parameter_count(encoder: &EncoderConfig, decoder: &DecoderConfig) -> Result<usize> {
    Ok(count_trainable(&decoder.param_specs(&encoder.tap_channels())?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlockWeights {
    pub convs: Vec<ConvBn>,
}

impl DecoderBlockWeights {
    pub fn out_channels(&self) -> usize {
        self.convs.last().map_or(0, |c| c.conv.out_channels)
    }

    fn in_channels(&self) -> usize {
        self.convs.first().map_or(0, |c| c.conv.in_channels())
    }
}

/// Upsample ×2 → concatenate the skip → 3×3 conv + BN + ReLU, repeated.
pub fn decoder_block(
    deep: &Tensor,
    skip: Option<&Tensor>,
    weights: &DecoderBlockWeights,
    out_channels: usize,
) -> Result<Tensor> {
    if weights.out_channels() != out_channels {
        return Err(Error::shape(format!(
            "decoder block weights produce {} channels, {out_channels} requested",
            weights.out_channels()
        )));
    }
    let up = bilinear_upsample2x(deep);
    let mut x = match skip {
        Some(s) => {
            let (u, sd) = (up.dims(), s.dims());
            if (u.h, u.w) != (sd.h, sd.w) {
                return Err(Error::shape(format!(
                    "skip connection is {}x{} but the upsampled map is {}x{}",
                    sd.h, sd.w, u.h, u.w
                )));
            }
            concat_channels(&up, s)?
        }
        None => up,
    };
    if x.dims().c != weights.in_channels() {
        return Err(Error::shape(format!(
            "decoder block expects {} input channels, got {}",
            weights.in_channels(),
            x.dims().c
        )));
    }
    for conv in &weights.convs {
        x = conv.forward(&x)?;
    }
    Ok(x)
}

/// EfficientUNet: EfficientNet encoder, five-level UNet decoder and a
/// 4-class pointwise head (Fish, Flower, Gravel, Sugar).
#[derive(Debug, Clone)]
pub struct SegmentationModel {
    encoder_config: EncoderConfig,
    decoder_config: DecoderConfig,
    encoder: EncoderWeights,
    decoder: Vec<DecoderBlockWeights>,
    head: ConvWeights,
    store: WeightStore,
}

impl SegmentationModel {
    pub fn encoder_config(&self) -> &EncoderConfig {
        &self.encoder_config
    }

    pub fn decoder_config(&self) -> &DecoderConfig {
        &self.decoder_config
    }

    pub fn encoder_weights(&self) -> &EncoderWeights {
        &self.encoder
    }

    pub fn decoder_blocks(&self) -> &[DecoderBlockWeights] {
        &self.decoder
    }

    pub fn head(&self) -> &ConvWeights {
        &self.head
    }

    /// Width of the decoder output that feeds the head.
    pub fn trunk_channels(&self) -> usize {
        self.decoder_config.channels[DECODER_LEVELS - 1]
    }

    /// All parameters, in declaration order.
    pub fn weights(&self) -> &WeightStore {
        &self.store
    }

    /// Replaces the head with `weight` laid out `(4, trunk_channels)` and `bias` of length 4.
    pub fn set_head(&mut self, weight: Vec<f32>, bias: Vec<f32>) -> Result<()> {
        let f = self.trunk_channels();
        let head = ConvWeights::dense(weight.clone(), NUM_CLASSES, f, 1, Some(bias.clone()), 1, 0)?;
        let mut store = WeightStore::new();
        for (name, shape, values) in self.store.iter() {
            let values = match name {
                "head.weight" => weight.clone(),
                "head.bias" => bias.clone(),
                _ => values.to_vec(),
            };
            store.insert(name, shape.to_vec(), values)?;
        }
        self.head = head;
        self.store = store;
        Ok(())
    }

    pub fn encoder_parameter_count(&self) -> usize {
        crate::encoder::parameter_count(&self.encoder_config)
    }

    pub fn decoder_parameter_count(&self) -> usize {
        decoder_parameter_count(&self.encoder_config, &self.decoder_config).expect("validated at build time")
    }

    /// Decoder output before the head: `(n, trunk_channels, h, w)`.
    pub fn trunk(&self, input: &Tensor) -> Result<Tensor> {
        let d = input.dims();
        if d.c != 3 {
            return Err(Error::shape(format!("model input must have 3 channels, got {d}")));
        }
        check_divisible(d.h, d.w)?;
        let mut features = encoder_forward(input, &self.encoder_config, &self.encoder)?;
        let mut x = features.pop().expect("five encoder taps");
        for (level, block) in self.decoder.iter().enumerate() {
            let skip = features.pop();
            x = decoder_block(&x, skip.as_ref(), block, self.decoder_config.channels[level])?;
        }
        Ok(x)
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        conv2d(&self.trunk(input)?, &self.head)
    }
}

pub fn build_efficientunet(variant: Variant, dec: DecoderConfig, init: Init) -> Result<SegmentationModel> {
    let encoder_config = variant.config();
    encoder_config.validate()?;
    let taps = encoder_config.tap_channels();
    let mut specs = encoder_config.param_specs();
    specs.extend(dec.param_specs(&taps)?);
    let store = materialize(&specs, init)?;

    let encoder = EncoderWeights::load(&store, &encoder_config)?;
    let decoder = dec
        .block_widths(&taps)?
        .into_iter()
        .enumerate()
        .map(|(level, (deep, skip, width))| {
            let convs = (0..dec.convs_per_block)
                .map(|j| {
                    conv_geometry(if j == 0 { deep + skip } else { width }, width).load(
                        &store,
                        &format!("decoder.blocks.{level}.convs.{j}"),
                        Activation::Relu,
                        DECODER_BN_EPS,
                    )
                })
                .collect::<Result<_>>()?;
            Ok(DecoderBlockWeights { convs })
        })
        .collect::<Result<_>>()?;
    let head = load_pointwise(&store, "head", dec.channels[DECODER_LEVELS - 1], NUM_CLASSES)?;
    Ok(SegmentationModel {
        encoder_config,
        decoder_config: dec,
        encoder,
        decoder,
        head,
        store,
    })
}

/// Segmentation logits `(n, 4, h, w)`; apply `softmax_channels` for probabilities.
pub fn model_forward(model: &SegmentationModel, input: &Tensor) -> Result<Tensor> {
    model.forward(input)
}

/// Resizes an image bilinearly to `target` and scales pixels to `[0, 1]`.
pub fn prepare_input(image: &RgbImage, target: (usize, usize)) -> Result<Tensor> {
    if image.height == 0 || image.width == 0 {
        return Err(Error::precondition("cannot prepare an empty image"));
    }
    check_divisible(target.0, target.1)?;
    let raw = image.to_raw_tensor();
    let resized = if (image.height, image.width) == target {
        raw
    } else {
        resize_bilinear(&raw, target.0, target.1)?
    };
    Ok(resized.map(|v| v / 255.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    #[test]
    fn b0_block_widths() {
        let taps = Variant::B0.config().tap_channels();
        let widths = DecoderConfig::default().block_widths(&taps).unwrap();
        assert_eq!(
            widths,
            vec![
                (320, 112, 256),
                (256, 40, 128),
                (128, 24, 64),
                (64, 16, 32),
                (32, 0, 16)
            ]
        );
    }

    #[test]
    fn decoder_block_shapes() {
        let model = build_efficientunet(Variant::B0, DecoderConfig::default(), Init::Zeros).unwrap();
        let deep = Tensor::full(Dims::new(1, 320, 4, 5), 0.3);
        let skip = Tensor::full(Dims::new(1, 112, 8, 10), -0.1);
        let y = decoder_block(&deep, Some(&skip), &model.decoder_blocks()[0], 256).unwrap();
        assert_eq!(y.dims(), Dims::new(1, 256, 8, 10));
        // zero conv weights, beta = 0
        assert!(y.data().iter().all(|&v| v == 0.0));

        let deep = Tensor::full(Dims::new(1, 32, 64, 80), 1.0);
        let y = decoder_block(&deep, None, &model.decoder_blocks()[4], 16).unwrap();
        assert_eq!(y.dims(), Dims::new(1, 16, 128, 160));
    }

    #[test]
    fn decoder_block_rejects_bad_skip() {
        let model = build_efficientunet(Variant::B0, DecoderConfig::default(), Init::Zeros).unwrap();
        let deep = Tensor::zeros(Dims::new(1, 320, 4, 5));
        let skip = Tensor::zeros(Dims::new(1, 112, 8, 12));
        let err = decoder_block(&deep, Some(&skip), &model.decoder_blocks()[0], 256);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn prepare_input_identity_and_black() {
        let pixels: Vec<u8> = (0..32 * 64 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let img = RgbImage::new(32, 64, pixels.clone()).unwrap();
        let t = prepare_input(&img, (32, 64)).unwrap();
        assert_eq!(t.dims(), Dims::new(1, 3, 32, 64));
        for c in 0..3 {
            for (i, &v) in t.plane(0, c).iter().enumerate() {
                assert_eq!(v, pixels[i * 3 + c] as f32 / 255.0);
            }
        }
        let black = RgbImage::new(40, 50, vec![0; 40 * 50 * 3]).unwrap();
        let t = prepare_input(&black, (64, 32)).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prepare_input_rejects_bad_target() {
        let img = RgbImage::new(4, 4, vec![0; 48]).unwrap();
        assert!(prepare_input(&img, (100, 64)).is_err());
    }

    #[test]
    fn set_head_updates_store() {
        let mut model = build_efficientunet(Variant::B0, DecoderConfig::default(), Init::Zeros).unwrap();
        model.set_head(vec![0.5; 64], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(model.weights().get("head.bias").unwrap().1, &[1.0, 2.0, 3.0, 4.0]);
        assert!(model.set_head(vec![0.5; 3], vec![0.0; 4]).is_err());
    }
}
