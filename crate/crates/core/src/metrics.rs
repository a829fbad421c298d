//! Dice scoring, the segmentation losses with analytic gradients, and
//! precision-recall curves.
//!
//! Losses work on 64-bit buffers laid out like [`Tensor`](crate::tensor::Tensor)
//! data: `(n, c, h, w)`, channel = class.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, CloudClass, NUM_CLASSES};
use crate::tensor::Dims;

/// `(image filename, class)`: the unit of scoring.
pub type PairKey = (String, CloudClass);

pub const DEFAULT_DICE_SMOOTH: f64 = 1.0;
const PROB_FLOOR: f64 = 1e-12;

/// `2|X∩Y| / (|X|+|Y|)`, defined as 1 when both masks are empty.
pub fn dice_coefficient(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64> {
    if pred.dims() != truth.dims() {
        return Err(Error::shape(format!(
            "prediction {:?} and truth {:?} differ in size",
            pred.dims(),
            truth.dims()
        )));
    }
    let (mut inter, mut p, mut t) = (0u64, 0u64, 0u64);
    for (&a, &b) in pred.bits().iter().zip(truth.bits()) {
        p += a as u64;
        t += b as u64;
        inter += (a && b) as u64;
    }
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + t) as f64)
}

/// Per-pair Dice scores over the universe defined by `truth`. A missing
/// prediction counts as an empty mask; a prediction for a key outside the
/// universe is an error.
pub fn pair_dice(
    predictions: &BTreeMap<PairKey, BinaryMask>,
    truth: &BTreeMap<PairKey, BinaryMask>,
) -> Result<BTreeMap<PairKey, f64>> {
    if let Some((img, class)) = predictions.keys().find(|k| !truth.contains_key(*k)) {
        return Err(Error::Validation(format!(
            "prediction for ({img}, {class}) has no ground truth"
        )));
    }
    truth
        .iter()
        .map(|(key, t)| {
            let score = match predictions.get(key) {
                Some(p) => dice_coefficient(p, t)?,
                None => dice_coefficient(&BinaryMask::empty(t.height(), t.width()), t)?,
            };
            Ok((key.clone(), score))
        })
        .collect()
}

/// Unweighted mean Dice over all `(image, class)` pairs of `truth`.
pub fn mean_dice(predictions: &BTreeMap<PairKey, BinaryMask>, truth: &BTreeMap<PairKey, BinaryMask>) -> Result<f64> {
    let scores = pair_dice(predictions, truth)?;
    if scores.is_empty() {
        return Err(Error::precondition("no (image, class) pairs to score"));
    }
    Ok(scores.values().sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cce_weight: f64,
    pub dice_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cce_weight: 0.7,
            dice_weight: 0.3,
        }
    }
}

/// Softmax probabilities and a one-hot target of the same layout. Sites
/// whose target is all zero are unlabeled.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityField {
    pub dims: Dims,
    pub probs: Vec<f64>,
    pub target: Vec<f64>,
}

impl ProbabilityField {
    pub fn new(dims: Dims, probs: Vec<f64>, target: Vec<f64>) -> Result<Self> {
        if probs.len() != dims.len() || target.len() != dims.len() {
            return Err(Error::shape(format!(
                "probabilities ({}) and target ({}) must both hold {} values for {dims}",
                probs.len(),
                target.len(),
                dims.len()
            )));
        }
        let field = ProbabilityField { dims, probs, target };
        for (site, (p_sum, y_sum)) in field.site_sums().enumerate() {
            if (p_sum - 1.0).abs() > 1e-6 {
                return Err(Error::precondition(format!(
                    "probabilities at site {site} sum to {p_sum}"
                )));
            }
            if y_sum != 0.0 && y_sum != 1.0 {
                return Err(Error::precondition(format!(
                    "target at site {site} sums to {y_sum}, expected 0 or 1"
                )));
            }
        }
        Ok(field)
    }

    /// Builds the field from logits via a channel softmax.
    pub fn from_logits(dims: Dims, logits: &[f64], target: Vec<f64>) -> Result<Self> {
        if logits.len() != dims.len() {
            return Err(Error::shape("logit buffer does not match dims"));
        }
        Self::new(dims, softmax(dims, logits), target)
    }

    fn site_sums(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let d = self.dims;
        let plane = d.plane();
        (0..d.n * plane).map(move |s| {
            let (n, p) = (s / plane, s % plane);
            let base = n * d.c * plane + p;
            (0..d.c).fold((0.0, 0.0), |(a, b), c| {
                (a + self.probs[base + c * plane], b + self.target[base + c * plane])
            })
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Channel softmax with max subtraction.
pub fn softmax(dims: Dims, logits: &[f64]) -> Vec<f64> {
    let plane = dims.plane();
    let mut out = vec![0.0; logits.len()];
    for n in 0..dims.n {
        for p in 0..plane {
            let base = n * dims.c * plane + p;
            let idx = |c: usize| base + c * plane;
            let max = (0..dims.c).map(|c| logits[idx(c)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..dims.c {
                let e = (logits[idx(c)] - max).exp();
                out[idx(c)] = e;
                sum += e;
            }
            for c in 0..dims.c {
                out[idx(c)] /= sum;
            }
        }
    }
    out
}

/// Pulls a gradient w.r.t. probabilities back through the softmax:
/// `dz_k = p_k (g_k − Σ_j p_j g_j)`.
pub fn softmax_backward(dims: Dims, probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    let plane = dims.plane();
    let mut out = vec![0.0; probs.len()];
    for n in 0..dims.n {
        for p in 0..plane {
            let base = n * dims.c * plane + p;
            let dot: f64 = (0..dims.c)
                .map(|c| probs[base + c * plane] * grad_probs[base + c * plane])
                .sum();
            for c in 0..dims.c {
                let i = base + c * plane;
                out[i] = probs[i] * (grad_probs[i] - dot);
            }
        }
    }
    out
}

/// Mean over labeled sites of `−Σ_c y_c log ŷ_c`, with its gradient
/// w.r.t. the logits that produced `probs`: `(ŷ − y) / #labeled`.
pub fn categorical_cross_entropy(field: &ProbabilityField) -> LossGrad {
    let d = field.dims;
    let plane = d.plane();
    let mut grad = vec![0.0; d.len()];
    let mut total = 0.0;
    let mut labeled = 0usize;
    for n in 0..d.n {
        for p in 0..plane {
            let base = n * d.c * plane + p;
            let y_sum: f64 = (0..d.c).map(|c| field.target[base + c * plane]).sum();
            if y_sum == 0.0 {
                continue;
            }
            labeled += 1;
            for c in 0..d.c {
                let i = base + c * plane;
                let y = field.target[i];
                if y != 0.0 {
                    total -= y * field.probs[i].max(PROB_FLOOR).ln();
                }
                grad[i] = field.probs[i] - y;
            }
        }
    }
    if labeled == 0 {
        return LossGrad { loss: 0.0, grad };
    }
    let scale = 1.0 / labeled as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    LossGrad {
        loss: total * scale,
        grad,
    }
}

/// Mean over classes of `1 − (2Σpy + s) / (Σp + Σy + s)`, sums taken over
/// every site of the batch; the gradient is w.r.t. the probabilities.
pub fn soft_dice_loss(field: &ProbabilityField, smooth: f64) -> LossGrad {
    let d = field.dims;
    let plane = d.plane();
    let mut inter = vec![0.0; d.c];
    let mut p_sum = vec![0.0; d.c];
    let mut y_sum = vec![0.0; d.c];
    for n in 0..d.n {
        for c in 0..d.c {
            let start = (n * d.c + c) * plane;
            for i in start..start + plane {
                inter[c] += field.probs[i] * field.target[i];
                p_sum[c] += field.probs[i];
                y_sum[c] += field.target[i];
            }
        }
    }
    let mut loss = 0.0;
    let mut num = vec![0.0; d.c];
    let mut den = vec![0.0; d.c];
    for c in 0..d.c {
        num[c] = 2.0 * inter[c] + smooth;
        den[c] = p_sum[c] + y_sum[c] + smooth;
        loss += 1.0 - num[c] / den[c];
    }
    let classes = d.c as f64;
    let mut grad = vec![0.0; d.len()];
    for n in 0..d.n {
        for c in 0..d.c {
            let start = (n * d.c + c) * plane;
            let den2 = den[c] * den[c];
            for i in start..start + plane {
                grad[i] = -(2.0 * field.target[i] * den[c] - num[c]) / den2 / classes;
            }
        }
    }
    LossGrad {
        loss: loss / classes,
        grad,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLoss {
    pub loss: f64,
    pub cce: f64,
    pub dice: f64,
    /// Gradient w.r.t. the logits.
    pub grad: Vec<f64>,
}

/// Softmax, then `cce_weight·CCE + dice_weight·soft-Dice`, with the gradient
/// chained back to the logits.
pub fn combined_loss(dims: Dims, logits: &[f64], target: &[f64], w: LossWeights) -> Result<CombinedLoss> {
    if dims.c != NUM_CLASSES {
        return Err(Error::shape(format!(
            "combined loss expects {NUM_CLASSES} class channels, got {}",
            dims.c
        )));
    }
    if logits.len() != dims.len() || target.len() != dims.len() {
        return Err(Error::shape(format!(
            "logits ({}) and target ({}) must hold {} values",
            logits.len(),
            target.len(),
            dims.len()
        )));
    }
    let field = ProbabilityField {
        dims,
        probs: softmax(dims, logits),
        target: target.to_vec(),
    };
    let cce = categorical_cross_entropy(&field);
    let dice = soft_dice_loss(&field, DEFAULT_DICE_SMOOTH);
    let dice_logits = softmax_backward(dims, &field.probs, &dice.grad);
    let grad = cce
        .grad
        .iter()
        .zip(&dice_logits)
        .map(|(a, b)| w.cce_weight * a + w.dice_weight * b)
        .collect();
    Ok(CombinedLoss {
        loss: w.cce_weight * cce.loss + w.dice_weight * dice.loss,
        cce: cce.loss,
        dice: dice.loss,
        grad,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// Distinct scores, descending. A pixel is positive when `score >= threshold`.
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    /// Trapezoidal area under precision over recall, anchored at `(0, 1)`.
    pub auc: f64,
}

pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<PrCurve> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Validation(format!("score {i} is NaN")));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::precondition("no positive labels: recall is undefined"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut curve = PrCurve {
        thresholds: Vec::new(),
        precision: Vec::new(),
        recall: Vec::new(),
        auc: 0.0,
    };
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_r, mut prev_p) = (0.0, 1.0);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / positives as f64;
        curve.auc += (recall - prev_r) * (precision + prev_p) / 2.0;
        (prev_r, prev_p) = (recall, precision);
        curve.thresholds.push(t);
        curve.precision.push(precision);
        curve.recall.push(recall);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, on: &[usize]) -> BinaryMask {
        let mut bits = vec![false; h * w];
        for &i in on {
            bits[i] = true;
        }
        BinaryMask::new(h, w, bits).unwrap()
    }

    #[test]
    fn dice_cases() {
        let e = BinaryMask::empty(3, 3);
        assert_eq!(dice_coefficient(&e, &e).unwrap(), 1.0);
        let a = mask(3, 3, &[0, 1, 2]);
        assert_eq!(dice_coefficient(&a, &a).unwrap(), 1.0);
        let b = mask(3, 3, &[5, 6]);
        assert_eq!(dice_coefficient(&a, &b).unwrap(), 0.0);
        // |X| = 4, |Y| = 6, |X∩Y| = 3
        let x = mask(4, 4, &[0, 1, 2, 3]);
        let y = mask(4, 4, &[1, 2, 3, 8, 9, 10]);
        assert!((dice_coefficient(&x, &y).unwrap() - 0.6).abs() < 1e-15);
        assert!(dice_coefficient(&x, &BinaryMask::empty(2, 8)).is_err());
    }

    #[test]
    fn mean_dice_counts_every_pair() {
        let mut truth = BTreeMap::new();
        let mut pred = BTreeMap::new();
        for img in ["a.jpg", "b.jpg"] {
            for class in CloudClass::ALL {
                let m = mask(2, 2, &[class.index()]);
                truth.insert((img.to_string(), class), m.clone());
                pred.insert((img.to_string(), class), m);
            }
        }
        assert_eq!(mean_dice(&pred, &truth).unwrap(), 1.0);
        pred.insert(("a.jpg".into(), CloudClass::Sugar), BinaryMask::empty(2, 2));
        assert_eq!(mean_dice(&pred, &truth).unwrap(), 0.875);
        pred.remove(&("a.jpg".to_string(), CloudClass::Sugar));
        assert_eq!(mean_dice(&pred, &truth).unwrap(), 0.875);
        pred.insert(("c.jpg".into(), CloudClass::Fish), BinaryMask::empty(2, 2));
        assert!(mean_dice(&pred, &truth).is_err());
    }

    #[test]
    fn uniform_cce_is_ln4() {
        let dims = Dims::new(1, 4, 2, 2);
        let probs = vec![0.25; 16];
        let mut target = vec![0.0; 16];
        for p in 0..4 {
            target[(p % 4) * 4 + p] = 1.0;
        }
        let f = ProbabilityField::new(dims, probs, target).unwrap();
        let l = categorical_cross_entropy(&f);
        assert!((l.loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn unlabeled_sites_do_not_contribute() {
        let dims = Dims::new(1, 4, 1, 2);
        // site 0 labeled Fish, site 1 unlabeled
        let probs = vec![0.1, 0.7, 0.2, 0.1, 0.3, 0.1, 0.4, 0.1];
        let target = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let f = ProbabilityField::new(dims, probs, target).unwrap();
        let l = categorical_cross_entropy(&f);
        assert!((l.loss + 0.1f64.ln()).abs() < 1e-12);
        assert_eq!(l.grad[1], 0.0);
        assert_eq!(l.grad[3], 0.0);
    }

    #[test]
    fn field_validation() {
        let dims = Dims::new(1, 2, 1, 1);
        assert!(ProbabilityField::new(dims, vec![0.5, 0.6], vec![1.0, 0.0]).is_err());
        assert!(ProbabilityField::new(dims, vec![0.5, 0.5], vec![1.0, 1.0]).is_err());
        assert!(ProbabilityField::new(dims, vec![0.5, 0.5], vec![0.0, 0.0]).is_ok());
    }

    #[test]
    fn soft_dice_limits() {
        let dims = Dims::new(1, 4, 1, 4);
        let mut onehot = vec![0.0; 16];
        for p in 0..4 {
            onehot[p * 4 + p] = 1.0;
        }
        let f = ProbabilityField::new(dims, onehot.clone(), onehot.clone()).unwrap();
        assert!(soft_dice_loss(&f, 1e-12).loss.abs() < 1e-9);
        // probability mass always on the wrong class
        let mut wrong = vec![0.0; 16];
        for p in 0..4 {
            wrong[((p + 1) % 4) * 4 + p] = 1.0;
        }
        let f = ProbabilityField::new(dims, wrong, onehot).unwrap();
        assert!((soft_dice_loss(&f, 1e-12).loss - 1.0).abs() < 1e-9);
    }

    #[test]
    fn combined_is_weighted_sum() {
        let dims = Dims::new(1, 4, 2, 3);
        let logits: Vec<f64> = (0..24).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let mut target = vec![0.0; 24];
        for p in 0..6 {
            target[(p % 4) * 6 + p] = 1.0;
        }
        let c = combined_loss(dims, &logits, &target, LossWeights::default()).unwrap();
        assert!((c.loss - (0.7 * c.cce + 0.3 * c.dice)).abs() < 1e-9);
        assert!(c.loss >= 0.0);
        assert!(combined_loss(Dims::new(1, 3, 2, 4), &logits, &target, LossWeights::default()).is_err());
    }

    #[test]
    fn confident_correct_logits_give_zero_loss() {
        let dims = Dims::new(1, 4, 2, 2);
        let mut target = vec![0.0; 16];
        let mut logits = vec![-40.0; 16];
        for p in 0..4 {
            target[p * 4 + p] = 1.0;
            logits[p * 4 + p] = 40.0;
        }
        let c = combined_loss(dims, &logits, &target, LossWeights::default()).unwrap();
        assert!(c.loss < 1e-12, "{}", c.loss);
    }

    #[test]
    fn pr_curve_edge_cases() {
        let curve = pr_curve(&[0.9, 0.8, 0.3, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(curve.auc, 1.0);
        let curve = pr_curve(&[0.5; 8], &[true, false, false, true, false, false, false, false]).unwrap();
        assert_eq!(curve.thresholds, vec![0.5]);
        assert_eq!(curve.precision, vec![0.25]);
        assert_eq!(curve.recall, vec![1.0]);
        assert!(pr_curve(&[0.1, 0.2], &[false, false]).is_err());
        assert!(pr_curve(&[0.1], &[true, false]).is_err());
    }
}
