//! Rectified Adam and head-only training on frozen features.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{ClassMaskSet, CloudClass, NUM_CLASSES};
use crate::metrics::{combined_loss, dice_coefficient, LossWeights};
use crate::tensor::{Dims, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RAdamHyperparams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for RAdamHyperparams {
    fn default() -> Self {
        RAdamHyperparams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl RAdamHyperparams {
    pub fn validate(&self) -> Result<()> {
        let betas_ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2);
        if !betas_ok || self.lr < 0.0 || self.eps <= 0.0 {
            return Err(Error::Validation(format!("invalid RAdam hyperparameters {self:?}")));
        }
        Ok(())
    }

    /// Maximum length of the approximated simple moving average.
    pub fn rho_inf(&self) -> f64 {
        2.0 / (1.0 - self.beta2) - 1.0
    }

    /// Length of the approximated SMA at step `t ≥ 1`.
    pub fn rho(&self, t: u64) -> f64 {
        let b = self.beta2.powf(t as f64);
        self.rho_inf() - 2.0 * t as f64 * b / (1.0 - b)
    }

    /// Variance rectification term, or `None` while `rho(t) ≤ 4`.
    pub fn rectification(&self, t: u64) -> Option<f64> {
        let rho_t = self.rho(t);
        if rho_t <= 4.0 {
            return None;
        }
        let rho_inf = self.rho_inf();
        Some((((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RAdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// What a step did: `rectification` is `None` on the momentum-only branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub rho: f64,
    pub rectification: Option<f64>,
}

impl RAdamState {
    pub fn new(len: usize) -> Self {
        RAdamState {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// One RAdam update of `params` in place. Nothing changes if any
    /// gradient is non-finite.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], hp: &RAdamHyperparams) -> Result<StepInfo> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::shape(format!(
                "params ({}), grads ({}) and optimizer state ({}) differ in length",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { index });
        }
        self.step += 1;
        let t = self.step;
        let bias1 = 1.0 - hp.beta1.powf(t as f64);
        let bias2 = 1.0 - hp.beta2.powf(t as f64);
        let rect = hp.rectification(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = hp.beta1 * self.m[i] + (1.0 - hp.beta1) * g;
            self.v[i] = hp.beta2 * self.v[i] + (1.0 - hp.beta2) * g * g;
            let m_hat = self.m[i] / bias1;
            params[i] -= match rect {
                Some(r) => hp.lr * r * m_hat / ((self.v[i] / bias2).sqrt() + hp.eps),
                None => hp.lr * m_hat,
            };
        }
        Ok(StepInfo {
            rho: hp.rho(t),
            rectification: rect,
        })
    }
}

pub fn radam_step(
    state: &mut RAdamState,
    params: &mut [f64],
    grads: &[f64],
    hp: &RAdamHyperparams,
) -> Result<StepInfo> {
    state.step(params, grads, hp)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    /// Images per optimizer step.
    pub batch: usize,
    pub seed: u64,
}

/// A trained 1×1 head: `weight` is `(4, features)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedHead {
    pub features: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    /// Training-set loss before the first epoch and after each epoch.
    pub history: Vec<f64>,
}

impl TrainedHead {
    pub fn zeros(features: usize) -> Self {
        TrainedHead {
            features,
            weight: vec![0.0; NUM_CLASSES * features],
            bias: vec![0.0; NUM_CLASSES],
            history: Vec::new(),
        }
    }

    /// Logits `(n, 4, h, w)` for a feature tensor.
    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        let conv = crate::tensor::ConvWeights::dense(
            self.weight.clone(),
            NUM_CLASSES,
            self.features,
            1,
            Some(self.bias.clone()),
            1,
            0,
        )?;
        crate::tensor::conv2d(features, &conv)
    }

    /// Mean Dice over every `(image, class)` pair after softmax and a strict
    /// `> threshold` cut.
    pub fn mean_dice(&self, features: &Tensor, truth: &[&ClassMaskSet], threshold: f32) -> Result<f64> {
        let d = features.dims();
        if truth.len() != d.n {
            return Err(Error::shape(format!("{} mask sets for {} images", truth.len(), d.n)));
        }
        let probs = crate::tensor::softmax_channels(&self.logits(features)?);
        let mut total = 0.0;
        for (n, masks) in truth.iter().enumerate() {
            for class in CloudClass::ALL {
                let pred = crate::dataset::binarize(probs.plane(n, class.index()), d.h, d.w, threshold)?;
                total += dice_coefficient(&pred, masks.get(class))?;
            }
        }
        Ok(total / (d.n * NUM_CLASSES) as f64)
    }
}

struct HeadProblem<'a> {
    features: &'a Tensor,
    targets: &'a Tensor,
    f: usize,
    plane: usize,
}

impl HeadProblem<'_> {
    fn logits(&self, params: &[f64], images: &[usize]) -> Vec<f64> {
        let (f, plane) = (self.f, self.plane);
        let (weight, bias) = params.split_at(NUM_CLASSES * f);
        let mut out = vec![0.0; images.len() * NUM_CLASSES * plane];
        for (bi, &img) in images.iter().enumerate() {
            for k in 0..NUM_CLASSES {
                let dst = &mut out[(bi * NUM_CLASSES + k) * plane..(bi * NUM_CLASSES + k + 1) * plane];
                dst.iter_mut().for_each(|v| *v = bias[k]);
                for c in 0..f {
                    let w = weight[k * f + c];
                    for (d, &x) in dst.iter_mut().zip(self.features.plane(img, c)) {
                        *d += w * x as f64;
                    }
                }
            }
        }
        out
    }

    fn targets(&self, images: &[usize]) -> Vec<f64> {
        images
            .iter()
            .flat_map(|&img| (0..NUM_CLASSES).flat_map(move |k| self.targets.plane(img, k).iter().map(|&v| v as f64)))
            .collect()
    }

    fn dims(&self, batch: usize) -> Dims {
        let d = self.features.dims();
        Dims::new(batch, NUM_CLASSES, d.h, d.w)
    }

    fn loss_and_grad(&self, params: &[f64], images: &[usize]) -> Result<(f64, Vec<f64>)> {
        let dims = self.dims(images.len());
        let logits = self.logits(params, images);
        let target = self.targets(images);
        let res = combined_loss(dims, &logits, &target, LossWeights::default())?;
        let (f, plane) = (self.f, self.plane);
        let mut grad = vec![0.0; params.len()];
        for (bi, &img) in images.iter().enumerate() {
            for k in 0..NUM_CLASSES {
                let g = &res.grad[(bi * NUM_CLASSES + k) * plane..(bi * NUM_CLASSES + k + 1) * plane];
                grad[NUM_CLASSES * f + k] += g.iter().sum::<f64>();
                for c in 0..f {
                    grad[k * f + c] += g
                        .iter()
                        .zip(self.features.plane(img, c))
                        .map(|(a, &x)| a * x as f64)
                        .sum::<f64>();
                }
            }
        }
        Ok((res.loss, grad))
    }

    fn loss(&self, params: &[f64], images: &[usize]) -> Result<f64> {
        let dims = self.dims(images.len());
        let res = combined_loss(
            dims,
            &self.logits(params, images),
            &self.targets(images),
            LossWeights::default(),
        )?;
        Ok(res.loss)
    }
}

/// Fits the 4-class 1×1 head on frozen `features` under the combined loss,
/// starting from zero weights. Mini-batches are drawn by a seeded shuffle.
pub fn train_head(
    features: &Tensor,
    targets: &Tensor,
    hp: &RAdamHyperparams,
    opts: &TrainOptions,
) -> Result<TrainedHead> {
    hp.validate()?;
    let fd = features.dims();
    let td = targets.dims();
    if fd.c == 0 {
        return Err(Error::precondition("training set is empty"));
    }
    if td != Dims::new(fd.n, NUM_CLASSES, fd.h, fd.w) {
        return Err(Error::shape(format!(
            "targets {td} do not match features {fd} (expected {NUM_CLASSES} class channels)"
        )));
    }
    if opts.batch == 0 {
        return Err(Error::Validation("batch size must be positive".into()));
    }
    let problem = HeadProblem {
        features,
        targets,
        f: fd.c,
        plane: fd.plane(),
    };
    let mut params = vec![0.0f64; NUM_CLASSES * (fd.c + 1)];
    let mut state = RAdamState::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let all: Vec<usize> = (0..fd.n).collect();
    let mut history = vec![problem.loss(&params, &all)?];
    let mut order = all.clone();
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(opts.batch) {
            let (_, grad) = problem.loss_and_grad(&params, batch)?;
            state.step(&mut params, &grad, hp)?;
        }
        history.push(problem.loss(&params, &all)?);
    }
    let (w, b) = params.split_at(NUM_CLASSES * fd.c);
    Ok(TrainedHead {
        features: fd.c,
        weight: w.iter().map(|&v| v as f32).collect(),
        bias: b.iter().map(|&v| v as f32).collect(),
        history,
    })
}
