use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::json;

use cloudseg_core::augment::{augment_dataset, TrainingRecord};
use cloudseg_core::dataset::{
    predict_and_encode, read_records_file, score_submission, shuffled_split, split_train_val, write_records_file,
    DatasetIndex, PredictOptions, SplitSpec, SubmissionRecord,
};
use cloudseg_core::decoder::{build_efficientunet, DecoderConfig, SegmentationModel};
use cloudseg_core::encoder::Variant;
use cloudseg_core::image::RgbImage;
use cloudseg_core::mask::{ClassMaskSet, CloudClass, NUM_CLASSES};
use cloudseg_core::metrics::pr_curve;
use cloudseg_core::params::Init;
use cloudseg_core::radam::{train_head, RAdamHyperparams, TrainOptions, TrainedHead};
use cloudseg_core::rle::{parse_rle, rle_decode, rle_encode, rle_text, scale_mask};
use cloudseg_core::synthetic::{generate_dataset, one_hot_targets, texture_features};
use cloudseg_core::tensor::{resize_bilinear, softmax_channels, Tensor, WeightStore};
use cloudseg_core::Error;

use crate::io::{list_images, load_mask, load_rgb, resize_mask, save_mask, save_rgb, write_text};
use crate::{
    AugmentArgs, Cli, Command, DecodeArgs, DescribeArgs, EncodeArgs, FeatureSource, ForwardArgs, ForwardOutput,
    ModelArgs, PrCurveArgs, PredictArgs, ScaleMasksArgs, ScoreArgs, SplitArgs, TrainHeadArgs,
};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Describe(a) => describe(a),
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
        Command::ScaleMasks(a) => scale_masks(a),
        Command::Augment(a) => augment(a, cli.seed),
        Command::Split(a) => split(a, cli.seed),
        Command::Forward(a) => forward(a, cli.seed),
        Command::TrainHead(a) => train(a, cli.seed),
        Command::Predict(a) => predict(a, cli.seed),
        Command::Score(a) => score(a),
        Command::PrCurve(a) => curve(a),
    }
}

/// Writes to stdout; a reader that hung up early (`| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn records(path: &Path) -> Result<Vec<SubmissionRecord>> {
    read_records_file(path).with_context(|| format!("reading {}", path.display()))
}

fn write_records(path: &Path, rows: &[SubmissionRecord]) -> Result<()> {
    write_records_file(path, rows).with_context(|| format!("writing {}", path.display()))
}

fn print_json(value: &impl Serialize) -> Result<()> {
    emit(&format!("{}\n", serde_json::to_string_pretty(value)?))
}

fn describe(a: &DescribeArgs) -> Result<()> {
    let variants: Vec<Variant> = if a.variant.eq_ignore_ascii_case("all") {
        Variant::ALL.to_vec()
    } else {
        vec![a.variant.parse()?]
    };
    let dec = DecoderConfig::default();
    let mut out = Vec::new();
    for v in variants {
        let model = build_efficientunet(v, dec.clone(), Init::Zeros)?;
        let cfg = model.encoder_config();
        let coeffs = v.coefficients();
        let stages: Vec<_> = cfg
            .blocks
            .iter()
            .map(|b| {
                json!({
                    "expansion": b.expansion_ratio,
                    "kernel": b.kernel_size,
                    "stride": b.stride,
                    "in_channels": b.in_channels,
                    "out_channels": b.out_channels,
                    "repeats": b.repeats,
                })
            })
            .collect();
        let (enc, dec_params) = (model.encoder_parameter_count(), model.decoder_parameter_count());
        out.push(json!({
            "variant": v.to_string(),
            "width_mult": coeffs.width_mult,
            "depth_mult": coeffs.depth_mult,
            "resolution": coeffs.resolution,
            "stem_channels": cfg.stem.out_channels,
            "stages": stages,
            "tap_channels": cfg.tap_channels(),
            "decoder_channels": dec.channels,
            "encoder_parameters": enc,
            "decoder_parameters": dec_params,
            "total_parameters": enc + dec_params,
        }));
    }
    if out.len() == 1 {
        print_json(&out[0])
    } else {
        print_json(&out)
    }
}

fn encode(a: &EncodeArgs) -> Result<()> {
    let text = rle_text(&rle_encode(&load_mask(&a.mask)?));
    match &a.out {
        Some(p) => write_text(p, &format!("{text}\n")),
        None => emit(&format!("{text}\n")),
    }
}

fn decode(a: &DecodeArgs) -> Result<()> {
    let text = match (&a.rle, &a.rle_file) {
        (Some(t), _) => t.clone(),
        (None, Some(p)) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        (None, None) => unreachable!("clap requires one of --rle / --rle-file"),
    };
    let mask = rle_decode(&parse_rle(text.trim())?, a.size.0, a.size.1)?;
    save_mask(&a.out, &mask)
}

fn scale_masks(a: &ScaleMasksArgs) -> Result<()> {
    let (h, w) = a.from;
    let records = records(&a.input)?;
    let scaled = records
        .into_iter()
        .map(|r| {
            let mask = rle_decode(&r.encoded_pixels, h, w)
                .map_err(|e| Error::Validation(format!("{}: {e}", r.image_label())))?;
            Ok(SubmissionRecord {
                encoded_pixels: rle_encode(&scale_mask(&mask, a.factor)?),
                ..r
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_records(&a.output, &scaled)?;
    print_json(&json!({ "records": scaled.len() }))
}

/// Groups annotation rows per image, in first-appearance order.
fn group_records(records: Vec<SubmissionRecord>) -> Result<Vec<(String, BTreeMap<CloudClass, SubmissionRecord>)>> {
    let mut groups: Vec<(String, BTreeMap<CloudClass, SubmissionRecord>)> = Vec::new();
    for r in records {
        match groups.iter_mut().find(|(name, _)| *name == r.image) {
            Some((_, g)) => {
                g.insert(r.class, r);
            }
            None => groups.push((r.image.clone(), BTreeMap::from([(r.class, r)]))),
        }
    }
    for (name, g) in &groups {
        if g.len() != NUM_CLASSES {
            bail!(Error::Validation(format!(
                "image {name} has {} of {NUM_CLASSES} class rows",
                g.len()
            )));
        }
    }
    Ok(groups)
}

fn decode_masks(name: &str, rows: &BTreeMap<CloudClass, SubmissionRecord>, h: usize, w: usize) -> Result<ClassMaskSet> {
    let mut masks = ClassMaskSet::empty(h, w);
    for class in CloudClass::ALL {
        *masks.get_mut(class) = rle_decode(&rows[&class].encoded_pixels, h, w)
            .map_err(|e| Error::Validation(format!("{name}_{class}: {e}")))?;
    }
    Ok(masks)
}

fn mask_records(name: &str, masks: &ClassMaskSet) -> Vec<SubmissionRecord> {
    masks
        .iter()
        .map(|(class, m)| SubmissionRecord {
            image: name.to_string(),
            class,
            encoded_pixels: rle_encode(m),
        })
        .collect()
}

fn augment(a: &AugmentArgs, seed: u64) -> Result<()> {
    let groups = group_records(records(&a.annotations)?)?;
    let mut records = Vec::with_capacity(groups.len());
    for (name, rows) in &groups {
        let img = load_rgb(&a.input_dir.join(name))?;
        let masks = decode_masks(name, rows, img.height, img.width)?;
        records.push(TrainingRecord::new(name.clone(), img.to_unit_tensor(), masks)?);
    }
    fs::create_dir_all(&a.output_dir).with_context(|| format!("creating {}", a.output_dir.display()))?;
    let mut rows = Vec::new();
    let mut kinds: BTreeMap<&str, usize> = BTreeMap::new();
    let augmented = augment_dataset(&records, seed)?;
    for (rec, kind) in &augmented {
        let dest = a.output_dir.join(&rec.name);
        match kind {
            None => {
                let src = a.input_dir.join(&rec.name);
                fs::copy(&src, &dest).with_context(|| format!("copying {}", src.display()))?;
            }
            Some(k) => {
                *kinds.entry(k.label()).or_default() += 1;
                save_rgb(&dest, &RgbImage::from_unit_tensor(&rec.image)?)?;
            }
        }
        rows.extend(mask_records(&rec.name, &rec.masks));
    }
    write_records(&a.output_dir.join("annotations.csv"), &rows)?;
    print_json(&json!({ "originals": records.len(), "total": augmented.len(), "kinds": kinds }))
}

fn split(a: &SplitArgs, seed: u64) -> Result<()> {
    let records = records(&a.annotations)?;
    // masks are never decoded here, so the nominal size does not matter
    let index = DatasetIndex::from_records(&records, (1, 1))?;
    let spec = SplitSpec {
        train_fraction: a.train_fraction,
        seed,
    };
    let (train, val) = split_train_val(&index, spec)?;
    fs::create_dir_all(&a.output_dir).with_context(|| format!("creating {}", a.output_dir.display()))?;
    write_records(&a.output_dir.join("train.csv"), &train.records())?;
    write_records(&a.output_dir.join("val.csv"), &val.records())?;
    print_json(&json!({ "train": train.len(), "val": val.len() }))
}

fn load_model(m: &ModelArgs, seed: u64) -> Result<SegmentationModel> {
    let init = match &m.weights {
        Some(dir) => {
            Init::Store(WeightStore::load(dir).with_context(|| format!("loading weights from {}", dir.display()))?)
        }
        None => Init::Seeded(seed),
    };
    Ok(build_efficientunet(m.variant, DecoderConfig::default(), init)?)
}

fn write_tensor(path: &Path, t: &Tensor, kind: &str) -> Result<()> {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    let header = json!({ "tensor": kind, "dtype": "float32", "byte_order": "little", "shape": t.dims().as_array() });
    let mut header_path = path.as_os_str().to_owned();
    header_path.push(".json");
    write_text(Path::new(&header_path), &serde_json::to_string_pretty(&header)?)
}

fn forward(a: &ForwardArgs, seed: u64) -> Result<()> {
    let model = load_model(&a.model, seed)?;
    let image = load_rgb(&a.input)?;
    let input = cloudseg_core::decoder::prepare_input(&image, a.model.input_size)?;
    let (t, kind) = match a.output {
        ForwardOutput::Logits => (model.forward(&input)?, "logits"),
        ForwardOutput::Probs => (softmax_channels(&model.forward(&input)?), "probabilities"),
        ForwardOutput::Trunk => (model.trunk(&input)?, "trunk"),
    };
    write_tensor(&a.out, &t, kind)?;
    print_json(&json!({ "tensor": kind, "shape": t.dims().as_array() }))
}

struct Sample {
    image: Tensor,
    masks: ClassMaskSet,
}

fn load_samples(a: &TrainHeadArgs, seed: u64) -> Result<Vec<Sample>> {
    let (h, w) = a.size;
    if let Some(count) = a.synthetic {
        return Ok(generate_dataset(count, h, w, seed)?
            .into_iter()
            .map(|r| Sample {
                image: r.image,
                masks: r.masks,
            })
            .collect());
    }
    let dir = a.data_dir.as_ref().expect("clap enforces --data-dir or --synthetic");
    let annotations = a
        .annotations
        .as_ref()
        .expect("clap requires --annotations with --data-dir");
    let mut samples = Vec::new();
    for (name, rows) in group_records(records(annotations)?)? {
        let img = load_rgb(&dir.join(&name))?;
        let masks = decode_masks(&name, &rows, img.height, img.width)?;
        samples.push(Sample {
            image: resize_bilinear(&img.to_unit_tensor(), h, w)?,
            masks: masks.map(|m| resize_mask(m, h, w))?,
        });
    }
    Ok(samples)
}

fn train(a: &TrainHeadArgs, seed: u64) -> Result<()> {
    let samples = load_samples(a, seed)?;
    if samples.len() < 2 {
        bail!(Error::Validation(
            "need at least two images to train and validate".into()
        ));
    }
    let (train_idx, val_idx) = shuffled_split(samples.len(), 1.0 - a.val_fraction, seed)?;
    if train_idx.is_empty() || val_idx.is_empty() {
        bail!(Error::Validation(format!(
            "validation fraction {} leaves an empty split of {} images",
            a.val_fraction,
            samples.len()
        )));
    }
    let mut model = match a.features {
        FeatureSource::Decoder => Some(load_model(&a.model, seed)?),
        FeatureSource::Texture => None,
    };
    let features = |idx: &[usize]| -> Result<Tensor> {
        let each = idx
            .iter()
            .map(|&i| match &model {
                Some(m) => m.trunk(&samples[i].image),
                None => texture_features(&samples[i].image),
            })
            .collect::<cloudseg_core::Result<Vec<_>>>()?;
        Ok(Tensor::stack(&each)?)
    };
    let masks = |idx: &[usize]| -> Vec<&ClassMaskSet> { idx.iter().map(|&i| &samples[i].masks).collect() };
    let (train_x, val_x) = (features(&train_idx)?, features(&val_idx)?);
    let train_y = one_hot_targets(&masks(&train_idx))?;

    let hp = RAdamHyperparams {
        lr: a.lr,
        ..Default::default()
    };
    let opts = TrainOptions {
        epochs: a.epochs,
        batch: a.batch,
        seed,
    };
    let head = train_head(&train_x, &train_y, &hp, &opts)?;
    let before = TrainedHead::zeros(head.features).mean_dice(&val_x, &masks(&val_idx), 0.5)?;
    let after = head.mean_dice(&val_x, &masks(&val_idx), 0.5)?;

    let store = match model.as_mut() {
        Some(m) => {
            m.set_head(head.weight.clone(), head.bias.clone())?;
            m.weights().clone()
        }
        None => {
            let mut s = WeightStore::new();
            s.insert(
                "head.weight",
                vec![NUM_CLASSES, head.features, 1, 1],
                head.weight.clone(),
            )?;
            s.insert("head.bias", vec![NUM_CLASSES], head.bias.clone())?;
            s
        }
    };
    store.save(&a.out)?;
    if let Some(p) = &a.history {
        let mut csv = String::from("epoch,loss\n");
        for (epoch, loss) in head.history.iter().enumerate() {
            csv += &format!("{epoch},{loss}\n");
        }
        write_text(p, &csv)?;
    }
    print_json(&json!({
        "train_images": train_idx.len(),
        "val_images": val_idx.len(),
        "features": head.features,
        "initial_loss": head.history.first(),
        "final_loss": head.history.last(),
        "val_dice_before": before,
        "val_dice_after": after,
    }))
}

fn predict(a: &PredictArgs, seed: u64) -> Result<()> {
    let model = load_model(&a.model, seed)?;
    let paths = list_images(&a.images_dir)?;
    let opts = PredictOptions {
        threshold: a.threshold,
        scale: a.scale.into(),
        input_size: a.model.input_size,
    };
    let images = paths.iter().map(|p| {
        let name = p
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let img = load_rgb(p).map_err(|e| Error::Validation(format!("{e:#}")));
        (name, img)
    });
    let run = predict_and_encode(&model, images, &opts)?;
    write_records(&a.out, &run.records)?;
    let failures: Vec<_> = run
        .failures
        .iter()
        .map(|(image, reason)| json!({ "image": image, "reason": reason }))
        .collect();
    print_json(&json!({
        "images": paths.len(),
        "predicted": run.records.len() / NUM_CLASSES,
        "failures": failures,
    }))
}

fn score(a: &ScoreArgs) -> Result<()> {
    let report = score_submission(&a.pred, &a.truth, a.size)
        .with_context(|| format!("scoring {} against {}", a.pred.display(), a.truth.display()))?;
    if let Some(p) = &a.out {
        write_text(p, &serde_json::to_string_pretty(&report)?)?;
    }
    print_json(&report)
}

fn parse_label(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" => Some(true),
        "0" | "false" => Some(false),
        _ => None,
    }
}

fn curve(a: &PrCurveArgs) -> Result<()> {
    let text = fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim().replace(' ', "") == "score,label" => {}
        other => bail!(Error::Parse {
            location: "line 1".into(),
            message: format!(
                "expected header `score,label`, found `{}`",
                other.map_or("", |(_, l)| l)
            ),
        }),
    }
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for (i, line) in lines {
        let bad = |msg: String| Error::Parse {
            location: format!("line {}", i + 1),
            message: msg,
        };
        let (s, l) = line
            .split_once(',')
            .ok_or_else(|| bad(format!("expected `score,label`, found `{line}`")))?;
        scores.push(s.trim().parse::<f64>().map_err(|e| bad(format!("score `{s}`: {e}")))?);
        labels.push(parse_label(l).ok_or_else(|| bad(format!("label `{l}` is not 0/1/true/false")))?);
    }
    let c = pr_curve(&scores, &labels)?;
    let mut csv = String::from("threshold,precision,recall\n");
    for i in 0..c.thresholds.len() {
        csv += &format!("{},{},{}\n", c.thresholds[i], c.precision[i], c.recall[i]);
    }
    csv += &format!("auc,{}\n", c.auc);
    match &a.out {
        Some(p) => {
            write_text(p, &csv)?;
            print_json(&json!({ "points": c.thresholds.len(), "auc": c.auc }))
        }
        None => emit(&csv),
    }
}
