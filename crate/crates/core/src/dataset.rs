//! Annotation/submission CSV handling, train/validation splitting,
//! prediction-to-submission encoding and end-to-end scoring.
//!
//! Files follow the competition layout: a `Image_Label,EncodedPixels`
//! header and one row per `(image, class)` pair, where `Image_Label` is
//! `<filename>_<Class>`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{prepare_input, SegmentationModel};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::mask::{BinaryMask, CloudClass, NUM_CLASSES};
use crate::metrics::{pair_dice, PairKey};
use crate::rle::{parse_rle, rle_decode, rle_encode, scale_mask, Rle};
use crate::tensor::{resize_bilinear, softmax_channels};

pub const HEADER: [&str; 2] = ["Image_Label", "EncodedPixels"];
/// Size of the source scenes.
pub const NATIVE_DIMS: (usize, usize) = (1400, 2100);
/// Submission coordinates after quarter scaling.
pub const QUARTER_DIMS: (usize, usize) = (350, 525);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubmissionRecord {
    pub image: String,
    pub class: CloudClass,
    pub encoded_pixels: Rle,
}

impl SubmissionRecord {
    pub fn image_label(&self) -> String {
        format!("{}_{}", self.image, self.class)
    }

    pub fn key(&self) -> PairKey {
        (self.image.clone(), self.class)
    }
}

/// Splits `<filename>_<Class>` at the last underscore.
pub fn parse_image_label(label: &str) -> Result<(String, CloudClass)> {
    let (image, class) = label
        .rsplit_once('_')
        .ok_or_else(|| Error::Validation(format!("`{label}` is not of the form <filename>_<Class>")))?;
    if image.is_empty() {
        return Err(Error::Validation(format!("`{label}` has an empty filename")));
    }
    Ok((image.to_string(), class.parse()?))
}

/// Reads every row of a submission-format CSV, rejecting duplicate pairs.
pub fn read_records(reader: impl Read) -> Result<Vec<SubmissionRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(Error::parse(
            "line 1",
            format!(
                "expected header `{}`, found `{}`",
                HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }
    let mut seen = BTreeSet::new();
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let at = |e: Error| Error::parse(format!("line {line}"), e.to_string());
        if row.len() != 2 {
            return Err(Error::parse(
                format!("line {line}"),
                format!("expected 2 fields, found {}", row.len()),
            ));
        }
        let (image, class) = parse_image_label(&row[0]).map_err(at)?;
        let encoded_pixels = parse_rle(&row[1]).map_err(at)?;
        if !seen.insert((image.clone(), class)) {
            return Err(Error::parse(
                format!("line {line}"),
                format!("duplicate entry for ({image}, {class})"),
            ));
        }
        records.push(SubmissionRecord {
            image,
            class,
            encoded_pixels,
        });
    }
    Ok(records)
}

pub fn read_records_file(path: &Path) -> Result<Vec<SubmissionRecord>> {
    read_records(File::open(path)?)
}

pub fn write_records(writer: impl Write, records: &[SubmissionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(HEADER)?;
    for r in records {
        w.write_record([r.image_label(), r.encoded_pixels.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_records_file(path: &Path, records: &[SubmissionRecord]) -> Result<()> {
    write_records(File::create(path)?, records)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub filename: String,
    pub height: usize,
    pub width: usize,
}

/// Images and their four class annotations each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetIndex {
    pub images: Vec<ImageEntry>,
    pub annotations: BTreeMap<PairKey, Rle>,
}

impl DatasetIndex {
    /// Groups records per image (first-appearance order); every image must
    /// carry all four classes.
    pub fn from_records(records: &[SubmissionRecord], dims: (usize, usize)) -> Result<Self> {
        let mut images: Vec<ImageEntry> = Vec::new();
        let mut annotations = BTreeMap::new();
        for r in records {
            if !images.iter().any(|e| e.filename == r.image) {
                images.push(ImageEntry {
                    filename: r.image.clone(),
                    height: dims.0,
                    width: dims.1,
                });
            }
            if annotations.insert(r.key(), r.encoded_pixels.clone()).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate entry for ({}, {})",
                    r.image, r.class
                )));
            }
        }
        for e in &images {
            for class in CloudClass::ALL {
                if !annotations.contains_key(&(e.filename.clone(), class)) {
                    return Err(Error::Validation(format!(
                        "image {} has no row for class {class}",
                        e.filename
                    )));
                }
            }
        }
        Ok(DatasetIndex { images, annotations })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn records(&self) -> Vec<SubmissionRecord> {
        self.images
            .iter()
            .flat_map(|e| {
                CloudClass::ALL.into_iter().map(move |class| SubmissionRecord {
                    image: e.filename.clone(),
                    class,
                    encoded_pixels: self.annotations[&(e.filename.clone(), class)].clone(),
                })
            })
            .collect()
    }

    pub fn masks(&self) -> Result<BTreeMap<PairKey, BinaryMask>> {
        let dims: BTreeMap<&str, (usize, usize)> = self
            .images
            .iter()
            .map(|e| (e.filename.as_str(), (e.height, e.width)))
            .collect();
        self.annotations
            .iter()
            .map(|(key, rle)| {
                let (h, w) = dims[key.0.as_str()];
                let m = rle_decode(rle, h, w).map_err(|e| Error::Validation(format!("({}, {}): {e}", key.0, key.1)))?;
                Ok((key.clone(), m))
            })
            .collect()
    }

    fn subset(&self, names: &[String]) -> DatasetIndex {
        let keep: BTreeSet<&String> = names.iter().collect();
        DatasetIndex {
            images: self
                .images
                .iter()
                .filter(|e| keep.contains(&e.filename))
                .cloned()
                .collect(),
            annotations: self
                .annotations
                .iter()
                .filter(|(k, _)| keep.contains(&k.0))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}

/// Reads an annotation CSV whose masks are at native scene size.
pub fn load_annotations(path: &Path) -> Result<DatasetIndex> {
    DatasetIndex::from_records(&read_records_file(path)?, NATIVE_DIMS)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

/// Seeded shuffle of `0..count`, cut after `round(fraction · count)`.
pub fn shuffled_split(count: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Validation(format!(
            "train fraction {train_fraction} must lie in (0, 1)"
        )));
    }
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (train_fraction * count as f64).round() as usize;
    let val = order.split_off(n_train);
    Ok((order, val))
}

/// Image-level shuffled split of the name-sorted images; `round(fraction · N)`
/// images go to train.
pub fn split_train_val(index: &DatasetIndex, spec: SplitSpec) -> Result<(DatasetIndex, DatasetIndex)> {
    let mut names: Vec<String> = index.images.iter().map(|e| e.filename.clone()).collect();
    names.sort();
    let (train, val) = shuffled_split(names.len(), spec.train_fraction, spec.seed)?;
    let pick = |idx: Vec<usize>| -> Vec<String> { idx.into_iter().map(|i| names[i].clone()).collect() };
    Ok((index.subset(&pick(train)), index.subset(&pick(val))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub mean_dice: f64,
    pub per_class: BTreeMap<String, f64>,
    pub n_pairs: usize,
}

/// Mean Dice of `predictions` over every pair of `truth`; predictions for
/// unknown pairs are an error, missing ones count as empty.
pub fn score_records(predictions: &[SubmissionRecord], truth: &DatasetIndex) -> Result<ScoreReport> {
    let dims: BTreeMap<&str, (usize, usize)> = truth
        .images
        .iter()
        .map(|e| (e.filename.as_str(), (e.height, e.width)))
        .collect();
    let mut pred_masks = BTreeMap::new();
    for r in predictions {
        let &(h, w) = dims.get(r.image.as_str()).ok_or_else(|| {
            Error::Validation(format!("prediction for ({}, {}) has no ground truth", r.image, r.class))
        })?;
        let m = rle_decode(&r.encoded_pixels, h, w)
            .map_err(|e| Error::Validation(format!("prediction ({}, {}): {e}", r.image, r.class)))?;
        pred_masks.insert(r.key(), m);
    }
    let scores = pair_dice(&pred_masks, &truth.masks()?)?;
    if scores.is_empty() {
        return Err(Error::precondition("truth file has no (image, class) pairs"));
    }
    let mut per_class = BTreeMap::new();
    for class in CloudClass::ALL {
        let vals: Vec<f64> = scores.iter().filter(|(k, _)| k.1 == class).map(|(_, &v)| v).collect();
        if !vals.is_empty() {
            per_class.insert(class.to_string(), vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }
    Ok(ScoreReport {
        mean_dice: scores.values().sum::<f64>() / scores.len() as f64,
        per_class,
        n_pairs: scores.len(),
    })
}

/// Scores a prediction CSV against a truth CSV, both in `dims` coordinates.
pub fn score_submission(pred_csv: &Path, truth_csv: &Path, dims: (usize, usize)) -> Result<ScoreReport> {
    let truth = DatasetIndex::from_records(&read_records_file(truth_csv)?, dims)?;
    let pred = read_records_file(pred_csv)?;
    score_records(&pred, &truth)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubmissionScale {
    Native,
    /// Threshold at native size, then subsample the binary masks.
    Quarter,
    /// Resample the probabilities to quarter size, then threshold.
    QuarterResampled,
}

/// Pixels strictly above `threshold`.
pub fn binarize(probs: &[f32], height: usize, width: usize, threshold: f32) -> Result<BinaryMask> {
    BinaryMask::new(height, width, probs.iter().map(|&p| p > threshold).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictOptions {
    pub threshold: f32,
    pub scale: SubmissionScale,
    /// Model input size; must be divisible by 32.
    pub input_size: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRun {
    pub records: Vec<SubmissionRecord>,
    /// `(image, reason)` for images that could not be processed.
    pub failures: Vec<(String, String)>,
}

fn predict_one(model: &SegmentationModel, image: &RgbImage, opts: &PredictOptions) -> Result<Vec<(CloudClass, Rle)>> {
    let input = prepare_input(image, opts.input_size)?;
    let probs = softmax_channels(&model.forward(&input)?);
    let (h, w) = match opts.scale {
        SubmissionScale::QuarterResampled => {
            if !image.height.is_multiple_of(4) || !image.width.is_multiple_of(4) {
                return Err(Error::precondition(format!(
                    "{}x{} image cannot be scaled by 0.25",
                    image.height, image.width
                )));
            }
            (image.height / 4, image.width / 4)
        }
        _ => (image.height, image.width),
    };
    let probs = if (h, w) == opts.input_size {
        probs
    } else {
        resize_bilinear(&probs, h, w)?
    };
    CloudClass::ALL
        .into_iter()
        .map(|class| {
            let mut mask = binarize(probs.plane(0, class.index()), h, w, opts.threshold)?;
            if opts.scale == SubmissionScale::Quarter {
                mask = scale_mask(&mask, 0.25)?;
            }
            Ok((class, rle_encode(&mask)))
        })
        .collect()
}

/// Runs the model on each image and emits four records per successful
/// image. Failing images are collected rather than aborting the run.
pub fn predict_and_encode<I>(model: &SegmentationModel, images: I, opts: &PredictOptions) -> Result<PredictionRun>
where
    I: IntoIterator<Item = (String, Result<RgbImage>)>,
{
    if !(opts.threshold > 0.0 && opts.threshold < 1.0) {
        return Err(Error::Validation(format!(
            "threshold {} must lie in (0, 1)",
            opts.threshold
        )));
    }
    let mut run = PredictionRun {
        records: Vec::new(),
        failures: Vec::new(),
    };
    for (name, image) in images {
        match image.and_then(|img| predict_one(model, &img, opts)) {
            Ok(encoded) => {
                debug_assert_eq!(encoded.len(), NUM_CLASSES);
                run.records
                    .extend(encoded.into_iter().map(|(class, rle)| SubmissionRecord {
                        image: name.clone(),
                        class,
                        encoded_pixels: rle,
                    }))
            }
            Err(e) => run.failures.push((name, e.to_string())),
        }
    }
    Ok(run)
}
