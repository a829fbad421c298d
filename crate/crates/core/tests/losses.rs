use std::collections::BTreeMap;

use proptest::prelude::*;

use cloudseg_core::mask::{BinaryMask, CloudClass};
use cloudseg_core::metrics::{
    categorical_cross_entropy, combined_loss, dice_coefficient, mean_dice, pr_curve, soft_dice_loss, softmax,
    LossWeights, ProbabilityField,
};
use cloudseg_core::tensor::Dims;

fn key(img: &str, class: CloudClass) -> (String, CloudClass) {
    (img.to_string(), class)
}

#[test]
fn dice_closed_forms() {
    let a = BinaryMask::from_fn(4, 4, |y, _| y < 2);
    let b = BinaryMask::from_fn(4, 4, |y, _| (1..3).contains(&y));
    // |A| = |B| = 8, |A∩B| = 4
    assert_eq!(dice_coefficient(&a, &b).unwrap(), 0.5);
    assert_eq!(dice_coefficient(&a, &a).unwrap(), 1.0);
    assert_eq!(dice_coefficient(&a, &BinaryMask::empty(4, 4)).unwrap(), 0.0);
    assert!(dice_coefficient(&a, &BinaryMask::empty(4, 5)).is_err());
}

#[test]
fn all_empty_predictions_score_the_empty_fraction() {
    let mut truth = BTreeMap::new();
    for (i, class) in CloudClass::ALL.into_iter().enumerate() {
        let m = if i % 2 == 0 {
            BinaryMask::filled(3, 3, true)
        } else {
            BinaryMask::empty(3, 3)
        };
        truth.insert(key("x.jpg", class), m);
    }
    assert_eq!(mean_dice(&BTreeMap::new(), &truth).unwrap(), 0.5);
}

#[test]
fn predictions_outside_the_universe_are_rejected() {
    let truth = BTreeMap::from([(key("x.jpg", CloudClass::Fish), BinaryMask::empty(2, 2))]);
    let pred = BTreeMap::from([(key("y.jpg", CloudClass::Fish), BinaryMask::empty(2, 2))]);
    assert!(mean_dice(&pred, &truth).is_err());
}

proptest! {
    #[test]
    fn dice_is_symmetric_and_bounded(bits in prop::collection::vec(any::<(bool, bool)>(), 1..200)) {
        let n = bits.len();
        let a = BinaryMask::new(1, n, bits.iter().map(|p| p.0).collect()).unwrap();
        let b = BinaryMask::new(1, n, bits.iter().map(|p| p.1).collect()).unwrap();
        let d = dice_coefficient(&a, &b).unwrap();
        prop_assert_eq!(d, dice_coefficient(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
    }
}

#[test]
fn uniform_probabilities_give_log_four_cross_entropy() {
    let dims = Dims::new(1, 4, 1, 3);
    let mut target = vec![0.0; 12];
    target[0] = 1.0; // site 0 → class 0
    target[3 + 2] = 1.0; // site 2 → class 1
    let field = ProbabilityField::from_logits(dims, &[0.0; 12], target).unwrap();
    let cce = categorical_cross_entropy(&field);
    assert!((cce.loss - 4f64.ln()).abs() < 1e-12);
    // the unlabeled site contributes no gradient
    for c in 0..4 {
        assert_eq!(cce.grad[c * 3 + 1], 0.0);
    }
}

#[test]
fn perfect_soft_dice_is_near_zero() {
    let dims = Dims::new(1, 4, 2, 2);
    let mut logits = vec![-30.0; 16];
    let mut target = vec![0.0; 16];
    for s in 0..4 {
        logits[s * 4 + s] = 30.0;
        target[s * 4 + s] = 1.0;
    }
    let field = ProbabilityField::from_logits(dims, &logits, target).unwrap();
    assert!(soft_dice_loss(&field, 1.0).loss < 1e-9);
}

#[test]
fn combined_loss_is_the_weighted_sum() {
    let dims = Dims::new(2, 4, 2, 3);
    let logits: Vec<f64> = (0..dims.len()).map(|i| ((i * 37) % 11) as f64 / 3.0 - 1.5).collect();
    let mut target = vec![0.0; dims.len()];
    for n in 0..2 {
        for p in 0..6 {
            target[(n * 4 + (p + n) % 4) * 6 + p] = 1.0;
        }
    }
    let res = combined_loss(dims, &logits, &target, LossWeights::default()).unwrap();
    assert!((res.loss - (0.7 * res.cce + 0.3 * res.dice)).abs() < 1e-15);
    let field = ProbabilityField::new(dims, softmax(dims, &logits), target).unwrap();
    assert_eq!(res.cce, categorical_cross_entropy(&field).loss);
    assert_eq!(res.dice, soft_dice_loss(&field, 1.0).loss);
}

#[test]
fn combined_loss_requires_four_classes() {
    let dims = Dims::new(1, 3, 1, 1);
    assert!(combined_loss(dims, &[0.0; 3], &[1.0, 0.0, 0.0], LossWeights::default()).is_err());
}

#[test]
fn field_rejects_probabilities_that_do_not_sum_to_one() {
    let dims = Dims::new(1, 4, 1, 1);
    assert!(ProbabilityField::new(dims, vec![0.5; 4], vec![0.0; 4]).is_err());
}

#[test]
fn pr_curve_on_ties_groups_thresholds() {
    let c = pr_curve(&[0.5, 0.5, 0.5], &[true, false, true]).unwrap();
    assert_eq!(c.thresholds, vec![0.5]);
    assert_eq!(c.precision, vec![2.0 / 3.0]);
    assert_eq!(c.recall, vec![1.0]);
}

#[test]
fn pr_curve_inverted_separator_has_low_auc() {
    let c = pr_curve(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]).unwrap();
    assert!(c.auc < 0.6);
    assert_eq!(*c.recall.last().unwrap(), 1.0);
}

#[test]
fn pr_curve_errors() {
    assert!(pr_curve(&[0.1, 0.2], &[false, false]).is_err());
    assert!(pr_curve(&[0.1, f64::NAN], &[true, false]).is_err());
    assert!(pr_curve(&[0.1], &[true, false]).is_err());
}
