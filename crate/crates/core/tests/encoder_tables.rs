// Stage tables and trainable-parameter counts of the reference
// EfficientNet implementations (feature trunk without the final 1×1 head
// convolution; BatchNorm counted as scale + shift).

use cloudseg_core::decoder::{build_efficientunet, DecoderConfig};
use cloudseg_core::encoder::{encoder_forward, parameter_count, Variant, ENCODER_STRIDE};
use cloudseg_core::params::Init;
use cloudseg_core::tensor::{Dims, Tensor};

const REFERENCE: [(Variant, usize, usize, [(usize, usize); 7]); 6] = [
    (
        Variant::B0,
        3_595_388,
        32,
        [(1, 16), (2, 24), (2, 40), (3, 80), (3, 112), (4, 192), (1, 320)],
    ),
    (
        Variant::B1,
        6_101_024,
        32,
        [(2, 16), (3, 24), (3, 40), (4, 80), (4, 112), (5, 192), (2, 320)],
    ),
    (
        Variant::B2,
        7_202_562,
        32,
        [(2, 16), (3, 24), (3, 48), (4, 88), (4, 120), (5, 208), (2, 352)],
    ),
    (
        Variant::B3,
        10_103_336,
        40,
        [(2, 24), (3, 32), (3, 48), (5, 96), (5, 136), (6, 232), (2, 384)],
    ),
    (
        Variant::B4,
        16_742_216,
        48,
        [(2, 24), (4, 32), (4, 56), (6, 112), (6, 160), (8, 272), (2, 448)],
    ),
    (
        Variant::B5,
        27_288_112,
        48,
        [(3, 24), (5, 40), (5, 64), (7, 128), (7, 176), (9, 304), (3, 512)],
    ),
];

#[test]
fn stage_tables_match_reference() {
    for (variant, _, stem, stages) in REFERENCE {
        let cfg = variant.config();
        assert_eq!(cfg.stem.out_channels, stem, "{variant} stem");
        let got: Vec<(usize, usize)> = cfg.blocks.iter().map(|b| (b.repeats, b.out_channels)).collect();
        assert_eq!(got, stages.to_vec(), "{variant}");
    }
}

#[test]
fn parameter_counts_match_reference() {
    for (variant, count, _, _) in REFERENCE {
        assert_eq!(parameter_count(&variant.config()), count, "{variant}");
    }
}

#[test]
fn b0_taps_have_expected_widths_and_strides() {
    let model = build_efficientunet(Variant::B0, DecoderConfig::default(), Init::Seeded(1)).unwrap();
    assert_eq!(model.encoder_config().tap_channels(), vec![16, 24, 40, 112, 320]);
    let input = Tensor::full(Dims::new(1, 3, 64, 96), 0.3);
    let taps = encoder_forward(&input, model.encoder_config(), model.encoder_weights()).unwrap();
    let strides: Vec<usize> = taps.iter().map(|t| 64 / t.dims().h).collect();
    assert_eq!(strides, vec![2, 4, 8, 16, ENCODER_STRIDE]);
    for t in &taps {
        assert_eq!(96 / t.dims().w, 64 / t.dims().h);
    }
}

#[test]
fn indivisible_input_is_rejected() {
    let model = build_efficientunet(Variant::B0, DecoderConfig::default(), Init::Zeros).unwrap();
    assert!(model.forward(&Tensor::zeros(Dims::new(1, 3, 70, 64))).is_err());
}

#[test]
fn seeded_models_are_reproducible() {
    let a = build_efficientunet(Variant::B0, DecoderConfig::default(), Init::Seeded(3)).unwrap();
    let b = build_efficientunet(Variant::B0, DecoderConfig::default(), Init::Seeded(3)).unwrap();
    let x = Tensor::from_fn(Dims::new(1, 3, 32, 32), |_, c, y, x| ((c + y * x) % 7) as f32 / 7.0);
    assert_eq!(a.forward(&x).unwrap(), b.forward(&x).unwrap());
}

#[test]
fn model_reloads_from_its_own_store() {
    let model = build_efficientunet(Variant::B0, DecoderConfig::default(), Init::Seeded(4)).unwrap();
    let reloaded = build_efficientunet(
        Variant::B0,
        DecoderConfig::default(),
        Init::Store(model.weights().clone()),
    )
    .unwrap();
    let x = Tensor::full(Dims::new(1, 3, 32, 64), 0.25);
    assert_eq!(model.forward(&x).unwrap(), reloaded.forward(&x).unwrap());
}
