//! Joint image/mask geometric augmentation: flips, small rotations and
//! grid distortion. Images are resampled bilinearly, masks by nearest
//! neighbor; anything sampled from outside the frame is black / false.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, ClassMaskSet};
use crate::tensor::{Dims, Tensor};

pub const MAX_ROTATION_DEGREES: f64 = 20.0;
pub const DEFAULT_GRID_CELLS: usize = 5;
pub const DEFAULT_DISTORT_LIMIT: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDistortParams {
    pub cells: usize,
    /// One multiplier per grid step along x (width).
    pub x_scales: Vec<f64>,
    /// One multiplier per grid step along y (height).
    pub y_scales: Vec<f64>,
}

impl GridDistortParams {
    pub fn identity(cells: usize) -> Self {
        GridDistortParams {
            cells,
            x_scales: vec![1.0; cells],
            y_scales: vec![1.0; cells],
        }
    }

    /// Step multipliers drawn uniformly from `[1 − limit, 1 + limit]`.
    pub fn sample(rng: &mut impl Rng, cells: usize, limit: f64) -> Self {
        let mut draw = || (0..cells).map(|_| rng.gen_range(1.0 - limit..=1.0 + limit)).collect();
        let x_scales = draw();
        let y_scales = draw();
        GridDistortParams {
            cells,
            x_scales,
            y_scales,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells < 2 {
            return Err(Error::Validation(format!(
                "grid needs at least 2 cells, got {}",
                self.cells
            )));
        }
        if self.x_scales.len() != self.cells || self.y_scales.len() != self.cells {
            return Err(Error::Validation("one step scale per cell and axis is required".into()));
        }
        if self
            .x_scales
            .iter()
            .chain(&self.y_scales)
            .any(|&s| !(s > 0.0 && s.is_finite()))
        {
            return Err(Error::Validation("grid step scales must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentationKind {
    Hflip,
    Vflip,
    Rotate { degrees: f64 },
    GridDistort(GridDistortParams),
}

impl AugmentationKind {
    pub fn label(&self) -> &'static str {
        match self {
            AugmentationKind::Hflip => "hflip",
            AugmentationKind::Vflip => "vflip",
            AugmentationKind::Rotate { .. } => "rotate",
            AugmentationKind::GridDistort(_) => "grid_distort",
        }
    }

    /// Index in `hflip, vflip, rotate, grid_distort` order.
    pub fn ordinal(&self) -> usize {
        match self {
            AugmentationKind::Hflip => 0,
            AugmentationKind::Vflip => 1,
            AugmentationKind::Rotate { .. } => 2,
            AugmentationKind::GridDistort(_) => 3,
        }
    }
}

/// Knots `(output position, source position)` of one axis of the grid
/// distortion: uniform output knots, source knots at the cumulative scaled
/// steps renormalized to span `[0, len − 1]`.
pub fn axis_knots(len: usize, scales: &[f64]) -> Vec<(f64, f64)> {
    let span = (len - 1) as f64;
    let cells = scales.len() as f64;
    let total: f64 = scales.iter().sum();
    let mut cum = 0.0;
    let mut knots = vec![(0.0, 0.0)];
    for (i, s) in scales.iter().enumerate() {
        cum += s;
        knots.push((span * (i + 1) as f64 / cells, span * cum / total));
    }
    knots
}

fn axis_map(len: usize, scales: &[f64]) -> Vec<f64> {
    let knots = axis_knots(len, scales);
    let last = (len - 1) as f64;
    let mut seg = 0;
    (0..len)
        .map(|i| {
            let x = i as f64;
            if i == len - 1 {
                return last;
            }
            while seg + 2 < knots.len() && x > knots[seg + 1].0 {
                seg += 1;
            }
            let (k0, t0) = knots[seg];
            let (k1, t1) = knots[seg + 1];
            let slope = (t1 - t0) / (k1 - k0);
            // offset form keeps unit slopes and zero offsets exact
            (x + (t0 - k0) + (x - k0) * (slope - 1.0)).clamp(0.0, last)
        })
        .collect()
}

/// Separable source-coordinate field: output `(y, x)` samples source
/// `(rows[y], cols[x])`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub rows: Vec<f64>,
    pub cols: Vec<f64>,
}

pub fn grid_distort_field(params: &GridDistortParams, h: usize, w: usize) -> Result<GridField> {
    params.validate()?;
    if h < params.cells || w < params.cells {
        return Err(Error::precondition(format!(
            "{h}x{w} image is smaller than the {}-cell grid",
            params.cells
        )));
    }
    Ok(GridField {
        rows: axis_map(h, &params.y_scales),
        cols: axis_map(w, &params.x_scales),
    })
}

fn bilinear_zero_fill(plane: &[f32], h: usize, w: usize, sy: f64, sx: f64) -> f32 {
    let y0 = sy.floor();
    let x0 = sx.floor();
    let (fy, fx) = (sy - y0, sx - x0);
    let px = |y: f64, x: f64| -> f64 {
        if y < 0.0 || x < 0.0 || y >= h as f64 || x >= w as f64 {
            0.0
        } else {
            plane[y as usize * w + x as usize] as f64
        }
    };
    let (a, b) = (px(y0, x0), px(y0, x0 + 1.0));
    let (c, d) = (px(y0 + 1.0, x0), px(y0 + 1.0, x0 + 1.0));
    let top = a + (b - a) * fx;
    let bottom = c + (d - c) * fx;
    (top + (bottom - top) * fy) as f32
}

fn nearest(mask: &BinaryMask, sy: f64, sx: f64) -> bool {
    let (y, x) = (sy.round(), sx.round());
    if y < 0.0 || x < 0.0 || y >= mask.height() as f64 || x >= mask.width() as f64 {
        return false;
    }
    mask.get(y as usize, x as usize)
}

fn warp(
    image: &Tensor,
    masks: &ClassMaskSet,
    source: impl Fn(usize, usize) -> (f64, f64),
) -> Result<(Tensor, ClassMaskSet)> {
    let d = image.dims();
    let mut data = Vec::with_capacity(d.len());
    for n in 0..d.n {
        for c in 0..d.c {
            let plane = image.plane(n, c);
            for y in 0..d.h {
                for x in 0..d.w {
                    let (sy, sx) = source(y, x);
                    data.push(bilinear_zero_fill(plane, d.h, d.w, sy, sx));
                }
            }
        }
    }
    let out_masks = masks.map(|m| {
        BinaryMask::from_fn(d.h, d.w, |y, x| {
            let (sy, sx) = source(y, x);
            nearest(m, sy, sx)
        })
    })?;
    Ok((Tensor::new(d, data)?, out_masks))
}

fn flip(image: &Tensor, masks: &ClassMaskSet, horizontal: bool) -> Result<(Tensor, ClassMaskSet)> {
    let d = image.dims();
    let src = |y: usize, x: usize| {
        if horizontal {
            (y, d.w - 1 - x)
        } else {
            (d.h - 1 - y, x)
        }
    };
    let img = Tensor::from_fn(d, |n, c, y, x| {
        let (sy, sx) = src(y, x);
        image.at(n, c, sy, sx)
    });
    let masks = masks.map(|m| {
        BinaryMask::from_fn(d.h, d.w, |y, x| {
            let (sy, sx) = src(y, x);
            m.get(sy, sx)
        })
    })?;
    Ok((img, masks))
}

/// Applies one geometric transform identically to an image `(n, c, h, w)`
/// and its class masks `(h, w)`.
pub fn apply(kind: &AugmentationKind, image: &Tensor, masks: &ClassMaskSet) -> Result<(Tensor, ClassMaskSet)> {
    let d = image.dims();
    if masks.dims() != (d.h, d.w) {
        return Err(Error::shape(format!(
            "image is {}x{} but masks are {:?}",
            d.h,
            d.w,
            masks.dims()
        )));
    }
    match kind {
        AugmentationKind::Hflip => flip(image, masks, true),
        AugmentationKind::Vflip => flip(image, masks, false),
        AugmentationKind::Rotate { degrees } => {
            // negated so that NaN is rejected too
            if !(degrees.abs() <= MAX_ROTATION_DEGREES) {
                return Err(Error::Validation(format!(
                    "rotation {degrees}° exceeds ±{MAX_ROTATION_DEGREES}°"
                )));
            }
            let (sin, cos) = degrees.to_radians().sin_cos();
            let cy = (d.h - 1) as f64 / 2.0;
            let cx = (d.w - 1) as f64 / 2.0;
            warp(image, masks, |y, x| {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                (cy - dx * sin + dy * cos, cx + dx * cos + dy * sin)
            })
        }
        AugmentationKind::GridDistort(params) => {
            let field = grid_distort_field(params, d.h, d.w)?;
            warp(image, masks, |y, x| (field.rows[y], field.cols[x]))
        }
    }
}

/// One training sample: an image `(1, 3, h, w)` in `[0, 1]` and its masks.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRecord {
    pub name: String,
    pub image: Tensor,
    pub masks: ClassMaskSet,
}

impl TrainingRecord {
    pub fn new(name: impl Into<String>, image: Tensor, masks: ClassMaskSet) -> Result<Self> {
        let d: Dims = image.dims();
        if masks.dims() != (d.h, d.w) {
            return Err(Error::shape("record image and masks differ in size"));
        }
        Ok(TrainingRecord {
            name: name.into(),
            image,
            masks,
        })
    }
}

/// Deterministic per-record generator: the dataset seed selects the key,
/// the record index selects the stream.
pub fn record_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Draws one of the four transforms uniformly, with its random parameters.
pub fn draw_kind(rng: &mut impl Rng) -> AugmentationKind {
    match rng.gen_range(0..4) {
        0 => AugmentationKind::Hflip,
        1 => AugmentationKind::Vflip,
        2 => AugmentationKind::Rotate {
            degrees: rng.gen_range(-MAX_ROTATION_DEGREES..=MAX_ROTATION_DEGREES),
        },
        _ => AugmentationKind::GridDistort(GridDistortParams::sample(
            rng,
            DEFAULT_GRID_CELLS,
            DEFAULT_DISTORT_LIMIT,
        )),
    }
}

/// `abc.jpg` → `abc_aug.jpg`.
pub fn augmented_name(name: &str) -> String {
    match name.rfind('.') {
        Some(dot) if dot > 0 => format!("{}_aug{}", &name[..dot], &name[dot..]),
        _ => format!("{name}_aug"),
    }
}

/// All originals followed by one transformed copy of each, in input order.
pub fn augment_dataset(
    records: &[TrainingRecord],
    seed: u64,
) -> Result<Vec<(TrainingRecord, Option<AugmentationKind>)>> {
    let mut out: Vec<_> = records.iter().map(|r| (r.clone(), None)).collect();
    for (i, r) in records.iter().enumerate() {
        let kind = draw_kind(&mut record_rng(seed, i));
        let (image, masks) = apply(&kind, &r.image, &r.masks)?;
        out.push((
            TrainingRecord {
                name: augmented_name(&r.name),
                image,
                masks,
            },
            Some(kind),
        ));
    }
    Ok(out)
}
