use std::io::Write;

use cloudseg_core::dataset::{
    load_annotations, predict_and_encode, read_records, score_submission, split_train_val, write_records_file,
    DatasetIndex, PredictOptions, SplitSpec, SubmissionRecord, SubmissionScale, NATIVE_DIMS, QUARTER_DIMS,
};
use cloudseg_core::decoder::{build_efficientunet, DecoderConfig};
use cloudseg_core::encoder::Variant;
use cloudseg_core::image::RgbImage;
use cloudseg_core::mask::CloudClass;
use cloudseg_core::params::Init;
use cloudseg_core::rle::{parse_rle, rle_decode, Rle};
use cloudseg_core::{Error, Result};

fn csv_file(body: &str) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(body.as_bytes()).unwrap();
    f
}

fn annotations(images: usize) -> String {
    let mut s = String::from("Image_Label,EncodedPixels\n");
    for i in 0..images {
        for (k, class) in CloudClass::ALL.iter().enumerate() {
            let rle = if (i + k) % 3 == 0 {
                format!("{} {}", 1 + 7 * k, 5 + i)
            } else {
                String::new()
            };
            s += &format!("img{i}.jpg_{class},{rle}\n");
        }
    }
    s
}

#[test]
fn loads_two_image_fixture() {
    let f = csv_file(&annotations(2));
    let index = load_annotations(f.path()).unwrap();
    assert_eq!(index.len(), 2);
    assert_eq!(index.annotations.len(), 8);
    assert_eq!(index.images[0].height, NATIVE_DIMS.0);
    assert_eq!(
        index.annotations[&("img0.jpg".to_string(), CloudClass::Fish)],
        parse_rle("1 5").unwrap()
    );
}

#[test]
fn parse_errors_name_the_line() {
    let cases = [
        ("Image,Pixels\n", "line 1"),
        (
            "Image_Label,EncodedPixels\nimg1.jpg_Fish,1 3\nimg1.jpg_Cumulus,\n",
            "line 3",
        ),
        ("Image_Label,EncodedPixels\nimg1.jpg_Fish,1 x\n", "line 2"),
        (
            "Image_Label,EncodedPixels\nimg1.jpg_Fish,1 3\nimg1.jpg_Fish,\n",
            "line 3",
        ),
    ];
    for (body, line) in cases {
        let err = read_records(body.as_bytes()).unwrap_err().to_string();
        assert!(err.contains(line), "{err}");
    }
    let dup = read_records("Image_Label,EncodedPixels\na.jpg_Fish,\na.jpg_Fish,\n".as_bytes())
        .unwrap_err()
        .to_string();
    assert!(dup.contains("a.jpg") && dup.contains("Fish"), "{dup}");
}

#[test]
fn image_names_may_contain_underscores() {
    let recs = read_records("Image_Label,EncodedPixels\nmy_img_1.jpg_Sugar,2 2\n".as_bytes()).unwrap();
    assert_eq!(recs[0].image, "my_img_1.jpg");
    assert_eq!(recs[0].class, CloudClass::Sugar);
}

#[test]
fn split_is_a_deterministic_image_level_partition() {
    let f = csv_file(&annotations(10));
    let index = load_annotations(f.path()).unwrap();
    let spec = SplitSpec {
        train_fraction: 0.8,
        seed: 42,
    };
    let (train, val) = split_train_val(&index, spec).unwrap();
    assert_eq!((train.len(), val.len()), (8, 2));
    assert_eq!(split_train_val(&index, spec).unwrap(), (train.clone(), val.clone()));
    let mut all: Vec<String> = train
        .images
        .iter()
        .chain(&val.images)
        .map(|e| e.filename.clone())
        .collect();
    all.sort();
    all.dedup();
    assert_eq!(all.len(), 10);
    for part in [&train, &val] {
        assert_eq!(part.annotations.len(), 4 * part.len());
    }
    assert!(split_train_val(
        &index,
        SplitSpec {
            train_fraction: 1.0,
            seed: 0
        }
    )
    .is_err());
}

#[test]
fn scoring_a_file_against_itself_is_perfect() {
    let f = csv_file(&annotations(5));
    let report = score_submission(f.path(), f.path(), NATIVE_DIMS).unwrap();
    assert_eq!(report.mean_dice, 1.0);
    assert_eq!(report.n_pairs, 20);
    assert_eq!(report.per_class.len(), 4);
}

#[test]
fn empty_predictions_score_the_empty_truth_fraction() {
    // truth: image a has Fish and Gravel, image b has Flower and Sugar
    let truth = csv_file(
        "Image_Label,EncodedPixels\na_Fish,1 2\na_Flower,\na_Gravel,3 1\na_Sugar,\n\
         b_Fish,\nb_Flower,5 5\nb_Gravel,\nb_Sugar,9 1\n",
    );
    let pred = csv_file("Image_Label,EncodedPixels\n");
    let report = score_submission(pred.path(), truth.path(), (4, 4)).unwrap();
    assert_eq!(report.mean_dice, 0.5);
}

#[test]
fn unknown_prediction_keys_are_rejected() {
    let truth = csv_file(&annotations(1));
    let pred = csv_file("Image_Label,EncodedPixels\nother.jpg_Fish,1 1\n");
    assert!(score_submission(pred.path(), truth.path(), NATIVE_DIMS).is_err());
}

#[test]
fn records_round_trip_through_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sub.csv");
    let recs = read_records(annotations(3).as_bytes()).unwrap();
    write_records_file(&path, &recs).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), annotations(3));
}

fn silent_model() -> cloudseg_core::decoder::SegmentationModel {
    let mut model = build_efficientunet(Variant::B0, DecoderConfig::default(), Init::Seeded(1)).unwrap();
    model.set_head(vec![0.0; 4 * 16], vec![-1e4; 4]).unwrap();
    model
}

fn gray(h: usize, w: usize) -> RgbImage {
    RgbImage::new(h, w, vec![128; h * w * 3]).unwrap()
}

#[test]
fn strongly_negative_head_predicts_nothing() {
    let model = silent_model();
    let opts = PredictOptions {
        threshold: 0.5,
        scale: SubmissionScale::Native,
        input_size: (64, 96),
    };
    let run = predict_and_encode(&model, vec![("a.jpg".to_string(), Ok(gray(70, 100)))], &opts).unwrap();
    assert_eq!(run.records.len(), 4);
    assert!(run.records.iter().all(|r| r.encoded_pixels == Rle::default()));
}

#[test]
fn quarter_scale_output_decodes_at_quarter_dims() {
    // softmax of equal logits is 0.25 everywhere; threshold 0.2 marks every pixel
    let mut model = silent_model();
    model.set_head(vec![0.0; 4 * 16], vec![0.0; 4]).unwrap();
    let opts = PredictOptions {
        threshold: 0.2,
        scale: SubmissionScale::Quarter,
        input_size: (64, 96),
    };
    let (h, w) = NATIVE_DIMS;
    let run = predict_and_encode(&model, vec![("a.jpg".to_string(), Ok(gray(h, w)))], &opts).unwrap();
    for r in &run.records {
        let m = rle_decode(&r.encoded_pixels, QUARTER_DIMS.0, QUARTER_DIMS.1).unwrap();
        assert_eq!(m.count(), QUARTER_DIMS.0 * QUARTER_DIMS.1);
    }
}

#[test]
fn ties_at_the_threshold_are_excluded() {
    let mut model = silent_model();
    // two classes at +∞-ish, two at −∞-ish: probabilities exactly 0.5 / 0
    model
        .set_head(vec![0.0; 4 * 16], vec![100.0, 100.0, -100.0, -100.0])
        .unwrap();
    let opts = PredictOptions {
        threshold: 0.5,
        scale: SubmissionScale::Native,
        input_size: (32, 32),
    };
    let run = predict_and_encode(&model, vec![("a.jpg".to_string(), Ok(gray(32, 32)))], &opts).unwrap();
    assert!(run.records.iter().all(|r| r.encoded_pixels.is_empty()));
}

#[test]
fn unreadable_images_are_reported_and_the_run_continues() {
    let model = silent_model();
    let opts = PredictOptions {
        threshold: 0.5,
        scale: SubmissionScale::Native,
        input_size: (32, 32),
    };
    let images: Vec<(String, Result<RgbImage>)> = vec![
        ("bad.jpg".into(), Err(Error::Validation("corrupt".into()))),
        ("good.jpg".into(), Ok(gray(32, 32))),
    ];
    let run = predict_and_encode(&model, images, &opts).unwrap();
    assert_eq!(run.failures.len(), 1);
    assert_eq!(run.failures[0].0, "bad.jpg");
    assert_eq!(run.records.len(), 4);
    let bad = PredictOptions { threshold: 1.0, ..opts };
    assert!(predict_and_encode(&model, Vec::new(), &bad).is_err());
}

#[test]
fn truth_masks_encode_to_a_perfect_score() {
    let truth: Vec<SubmissionRecord> = read_records(annotations(4).as_bytes()).unwrap();
    let index = DatasetIndex::from_records(&truth, NATIVE_DIMS).unwrap();
    let reencoded: Vec<SubmissionRecord> = index
        .masks()
        .unwrap()
        .into_iter()
        .map(|((image, class), m)| SubmissionRecord {
            image,
            class,
            encoded_pixels: cloudseg_core::rle::rle_encode(&m),
        })
        .collect();
    let report = cloudseg_core::dataset::score_records(&reencoded, &index).unwrap();
    assert_eq!(report.mean_dice, 1.0);
}

#[test]
fn resampled_quarter_output_matches_mask_subsampling_for_flat_fields() {
    let mut model = silent_model();
    model.set_head(vec![0.0; 4 * 16], vec![0.0; 4]).unwrap();
    let run = |scale| {
        let opts = PredictOptions {
            threshold: 0.2,
            scale,
            input_size: (32, 32),
        };
        predict_and_encode(&model, vec![("a.jpg".to_string(), Ok(gray(64, 96)))], &opts)
            .unwrap()
            .records
    };
    assert_eq!(run(SubmissionScale::Quarter), run(SubmissionScale::QuarterResampled));
    let r = &run(SubmissionScale::QuarterResampled)[0];
    assert_eq!(rle_decode(&r.encoded_pixels, 16, 24).unwrap().count(), 16 * 24);
}
