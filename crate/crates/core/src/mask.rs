use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 4;

/// Cloud organization classes. The discriminant is the channel index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CloudClass {
    Fish = 0,
    Flower = 1,
    Gravel = 2,
    Sugar = 3,
}

impl CloudClass {
    pub const ALL: [CloudClass; NUM_CLASSES] = [
        CloudClass::Fish,
        CloudClass::Flower,
        CloudClass::Gravel,
        CloudClass::Sugar,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            CloudClass::Fish => "Fish",
            CloudClass::Flower => "Flower",
            CloudClass::Gravel => "Gravel",
            CloudClass::Sugar => "Sugar",
        }
    }
}

impl fmt::Display for CloudClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CloudClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CloudClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown class `{s}`")))
    }
}

/// Per-pixel boolean mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(format!(
                "{height}x{width} mask needs {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(BinaryMask { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self::filled(height, width, false)
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        BinaryMask { height, width, bits }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        if self.dims() != other.dims() {
            return Err(Error::shape(format!(
                "mask dims {:?} and {:?} differ",
                self.dims(),
                other.dims()
            )));
        }
        Ok(BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| a | b).collect(),
        })
    }
}

/// The four class masks of one image, indexed by [`CloudClass`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMaskSet {
    masks: [BinaryMask; NUM_CLASSES],
}

impl ClassMaskSet {
    pub fn new(masks: [BinaryMask; NUM_CLASSES]) -> Result<Self> {
        let dims = masks[0].dims();
        if masks.iter().any(|m| m.dims() != dims) {
            return Err(Error::shape("class masks must share dimensions"));
        }
        Ok(ClassMaskSet { masks })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        ClassMaskSet {
            masks: std::array::from_fn(|_| BinaryMask::empty(height, width)),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.masks[0].dims()
    }

    pub fn get(&self, class: CloudClass) -> &BinaryMask {
        &self.masks[class.index()]
    }

    pub fn get_mut(&mut self, class: CloudClass) -> &mut BinaryMask {
        &mut self.masks[class.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (CloudClass, &BinaryMask)> {
        CloudClass::ALL.into_iter().zip(self.masks.iter())
    }

    pub fn map(&self, f: impl Fn(&BinaryMask) -> BinaryMask) -> Result<Self> {
        ClassMaskSet::new(std::array::from_fn(|i| f(&self.masks[i])))
    }

    pub fn into_masks(self) -> [BinaryMask; NUM_CLASSES] {
        self.masks
    }
}
