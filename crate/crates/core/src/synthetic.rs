//! Desk-scale stand-ins for the satellite scenes: procedurally textured
//! images with exact class masks, and a fixed texture filter bank whose
//! responses make the four textures linearly separable per pixel.

use rand::Rng;

use crate::augment::{record_rng, TrainingRecord};
use crate::error::Result;
use crate::mask::{BinaryMask, ClassMaskSet, CloudClass, NUM_CLASSES};
use crate::tensor::{conv2d, ConvWeights, Dims, Tensor};

/// Fish: horizontal stripes. Flower: vertical stripes. Gravel: 2×2
/// checkerboard. Sugar: flat.
fn texture(class: CloudClass, y: usize, x: usize, phase: usize) -> f32 {
    let on = match class {
        CloudClass::Fish => ((y + phase) / 2).is_multiple_of(2),
        CloudClass::Flower => ((x + phase) / 2).is_multiple_of(2),
        CloudClass::Gravel => ((y + phase) / 2 + (x + phase) / 2).is_multiple_of(2),
        CloudClass::Sugar => return 0.5,
    };
    if on {
        0.8
    } else {
        0.2
    }
}

/// `count` images of `h × w` split into four rectangles at random cut
/// points; each rectangle gets a uniformly drawn class texture plus noise.
pub fn generate_dataset(count: usize, h: usize, w: usize, seed: u64) -> Result<Vec<TrainingRecord>> {
    (0..count)
        .map(|i| {
            let mut rng = record_rng(seed, i);
            let cut_y = rng.gen_range(h / 4..=3 * h / 4);
            let cut_x = rng.gen_range(w / 4..=3 * w / 4);
            let classes: [CloudClass; 4] = std::array::from_fn(|_| CloudClass::ALL[rng.gen_range(0..NUM_CLASSES)]);
            let phase = rng.gen_range(0..4);
            let tint: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.85..1.0));
            let region = |y: usize, x: usize| (y >= cut_y) as usize * 2 + (x >= cut_x) as usize;

            let mut noise = vec![0.0f32; h * w];
            noise.iter_mut().for_each(|v| *v = rng.gen_range(-0.05..0.05));
            let image = Tensor::from_fn(Dims::new(1, 3, h, w), |_, c, y, x| {
                let base = texture(classes[region(y, x)], y, x, phase);
                ((base + noise[y * w + x]) * tint[c]).clamp(0.0, 1.0)
            });
            let mut masks = ClassMaskSet::empty(h, w);
            for class in CloudClass::ALL {
                *masks.get_mut(class) = BinaryMask::from_fn(h, w, |y, x| classes[region(y, x)] == class);
            }
            TrainingRecord::new(format!("synthetic_{i:04}.png"), image, masks)
        })
        .collect()
}

pub const TEXTURE_FEATURES: usize = 4;

fn box_filter(channels: usize, k: usize) -> ConvWeights {
    let v = 1.0 / (k * k) as f32;
    ConvWeights::depthwise(vec![v; channels * k * k], channels, k, None, 1, k / 2).expect("valid box filter")
}

/// Fixed filter bank: locally averaged |∂x|, |∂y|, diagonal energy and
/// intensity of the gray image. Output `(n, 4, h, w)`.
pub fn texture_features(image: &Tensor) -> Result<Tensor> {
    let c = image.dims().c;
    let gray = conv2d(
        image,
        &ConvWeights::dense(vec![1.0 / c as f32; c], 1, c, 1, None, 1, 0)?,
    )?;
    #[rustfmt::skip]
    let kernels: [f32; 27] = [
        0.0, 0.0, 0.0,  -1.0, 1.0, 0.0,  0.0, 0.0, 0.0, // ∂x
        0.0, -1.0, 0.0,  0.0, 1.0, 0.0,  0.0, 0.0, 0.0, // ∂y
        -1.0, 0.0, 0.0,  0.0, 1.0, 0.0,  0.0, 0.0, 0.0, // diagonal
    ];
    let grads = conv2d(&gray, &ConvWeights::dense(kernels.to_vec(), 3, 1, 3, None, 1, 1)?)?;
    let magnitude = grads.map(f32::abs);
    let energy = conv2d(&magnitude, &box_filter(3, 7))?;
    let mean = conv2d(&gray, &box_filter(1, 7))?;
    let d = energy.dims();
    let features = Tensor::from_fn(Dims::new(d.n, TEXTURE_FEATURES, d.h, d.w), |n, f, y, x| {
        if f < 3 {
            3.0 * energy.at(n, f, y, x)
        } else {
            mean.at(n, 0, y, x)
        }
    });
    Ok(features)
}

/// One-hot class targets `(n, 4, h, w)` from mask sets of equal size.
pub fn one_hot_targets(masks: &[&ClassMaskSet]) -> Result<Tensor> {
    let (h, w) = masks
        .first()
        .map(|m| m.dims())
        .ok_or_else(|| crate::error::Error::precondition("no masks given"))?;
    if masks.iter().any(|m| m.dims() != (h, w)) {
        return Err(crate::error::Error::shape("mask sets differ in size"));
    }
    Ok(Tensor::from_fn(
        Dims::new(masks.len(), NUM_CLASSES, h, w),
        |n, c, y, x| masks[n].get(CloudClass::ALL[c]).get(y, x) as u8 as f32,
    ))
}
