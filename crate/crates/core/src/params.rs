//! Parameter declarations shared by the encoder, decoder and head, and the
//! three ways of materializing them (zeros, seeded random, weight store).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Activation, BatchNorm, ConvWeights, Tensor, WeightStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    ConvKernel { fan_in: usize },
    Bias,
    BnGamma,
    BnBeta,
    BnMean,
    BnVar,
}

impl ParamRole {
    /// Running statistics are buffers, not trainable parameters.
    pub fn trainable(self) -> bool {
        !matches!(self, ParamRole::BnMean | ParamRole::BnVar)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Sum of trainable parameter counts.
pub fn count_trainable(specs: &[ParamSpec]) -> usize {
    specs.iter().filter(|s| s.role.trainable()).map(ParamSpec::numel).sum()
}

#[derive(Debug, Clone)]
pub enum Init {
    /// Zero kernels and biases, identity batch norm.
    Zeros,
    /// He-normal kernels from a ChaCha8 stream, zero biases, identity batch norm.
    Seeded(u64),
    /// Pre-trained or previously exported weights.
    Store(WeightStore),
}

pub fn materialize(specs: &[ParamSpec], init: Init) -> Result<WeightStore> {
    match init {
        Init::Zeros => {
            let mut store = WeightStore::new();
            for s in specs {
                store.insert(&s.name, s.shape.clone(), default_values(s))?;
            }
            Ok(store)
        }
        Init::Seeded(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = WeightStore::new();
            for s in specs {
                let values = match s.role {
                    ParamRole::ConvKernel { fan_in } => {
                        let std = (2.0 / fan_in as f64).sqrt();
                        let normal = Normal::new(0.0, std).expect("positive std");
                        (0..s.numel()).map(|_| normal.sample(&mut rng) as f32).collect()
                    }
                    _ => default_values(s),
                };
                store.insert(&s.name, s.shape.clone(), values)?;
            }
            Ok(store)
        }
        Init::Store(store) => {
            validate_store(specs, &store)?;
            Ok(store)
        }
    }
}

fn default_values(s: &ParamSpec) -> Vec<f32> {
    let fill = match s.role {
        ParamRole::BnGamma | ParamRole::BnVar => 1.0,
        _ => 0.0,
    };
    vec![fill; s.numel()]
}

/// Checks that `store` holds exactly the declared parameters, reporting the
/// first offending entry.
pub fn validate_store(specs: &[ParamSpec], store: &WeightStore) -> Result<()> {
    for s in specs {
        match store.get(&s.name) {
            None => {
                return Err(Error::WeightStore(format!(
                    "missing entry `{}` with shape {:?}",
                    s.name, s.shape
                )))
            }
            Some((shape, _)) if shape != s.shape.as_slice() => {
                return Err(Error::WeightStore(format!(
                    "entry `{}` has shape {:?}, expected {:?}",
                    s.name, shape, s.shape
                )))
            }
            Some(_) => {}
        }
    }
    if store.len() != specs.len() {
        let unexpected = store
            .iter()
            .find(|(name, _, _)| !specs.iter().any(|s| s.name == *name))
            .map(|(name, _, _)| name.to_string())
            .unwrap_or_default();
        return Err(Error::WeightStore(format!("unexpected entry `{unexpected}`")));
    }
    Ok(())
}

/// Convolution followed by inference batch norm and an activation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBn {
    pub conv: ConvWeights,
    pub bn: BatchNorm,
    pub act: Activation,
}

impl ConvBn {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = crate::tensor::conv2d(x, &self.conv)?;
        let y = crate::tensor::batchnorm_infer(&y, &self.bn)?;
        Ok(crate::tensor::activate(&y, self.act))
    }
}

/// Geometry of a bias-free convolution feeding a batch norm.
#[derive(Debug, Clone, Copy)]
pub struct ConvBnGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
}

impl ConvBnGeometry {
    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn specs(&self, prefix: &str, out: &mut Vec<ParamSpec>) {
        let k = self.kernel;
        out.push(ParamSpec {
            name: format!("{prefix}.conv.weight"),
            shape: vec![self.out_channels, self.in_per_group(), k, k],
            role: ParamRole::ConvKernel {
                fan_in: self.in_per_group() * k * k,
            },
        });
        for (suffix, role) in [
            ("gamma", ParamRole::BnGamma),
            ("beta", ParamRole::BnBeta),
            ("mean", ParamRole::BnMean),
            ("var", ParamRole::BnVar),
        ] {
            out.push(ParamSpec {
                name: format!("{prefix}.bn.{suffix}"),
                shape: vec![self.out_channels],
                role,
            });
        }
    }

    pub fn load(&self, store: &WeightStore, prefix: &str, act: Activation, eps: f32) -> Result<ConvBn> {
        let conv = ConvWeights::new(
            take(store, &format!("{prefix}.conv.weight"))?,
            self.out_channels,
            self.in_per_group(),
            self.kernel,
            self.kernel,
            None,
            self.stride,
            self.padding(),
            self.groups,
        )?;
        let bn = BatchNorm {
            gamma: take(store, &format!("{prefix}.bn.gamma"))?,
            beta: take(store, &format!("{prefix}.bn.beta"))?,
            mean: take(store, &format!("{prefix}.bn.mean"))?,
            var: take(store, &format!("{prefix}.bn.var"))?,
            eps,
        };
        Ok(ConvBn { conv, bn, act })
    }
}

/// Specs for a 1×1 convolution with bias.
pub fn pointwise_specs(prefix: &str, in_channels: usize, out_channels: usize, out: &mut Vec<ParamSpec>) {
    out.push(ParamSpec {
        name: format!("{prefix}.weight"),
        shape: vec![out_channels, in_channels, 1, 1],
        role: ParamRole::ConvKernel { fan_in: in_channels },
    });
    out.push(ParamSpec {
        name: format!("{prefix}.bias"),
        shape: vec![out_channels],
        role: ParamRole::Bias,
    });
}

pub fn load_pointwise(
    store: &WeightStore,
    prefix: &str,
    in_channels: usize,
    out_channels: usize,
) -> Result<ConvWeights> {
    ConvWeights::dense(
        take(store, &format!("{prefix}.weight"))?,
        out_channels,
        in_channels,
        1,
        Some(take(store, &format!("{prefix}.bias"))?),
        1,
        0,
    )
}

pub(crate) fn take(store: &WeightStore, name: &str) -> Result<Vec<f32>> {
    store
        .get(name)
        .map(|(_, v)| v.to_vec())
        .ok_or_else(|| Error::WeightStore(format!("missing entry `{name}`")))
}
