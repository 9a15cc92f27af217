//! Samples, the synthetic dataset, augmentation and on-disk formats.

pub mod augment;
pub mod dataset;
pub mod pnm;
pub mod toy;

pub use augment::{augment, AugmentConfig};
pub use toy::{gen_toy_dataset, ToyConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Label value of background pixels.
pub const BACKGROUND: u8 = 0;
/// Label value of pixels excluded from supervision and scoring.
pub const IGNORE: u8 = 255;

/// Per-pixel class indices: `0` background, `c + 1` for class `c`,
/// [`IGNORE`] for excluded pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("label map", format!("{height}x{width} vs {} values", data.len())));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        LabelMap { height, width, data: vec![value; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Multi-hot presence vector: class `c` is present iff some pixel is `c + 1`.
    pub fn present_classes(&self, classes: usize) -> Vec<u8> {
        let mut present = vec![0u8; classes];
        for &v in &self.data {
            if v != BACKGROUND && v != IGNORE && (v as usize) <= classes {
                present[v as usize - 1] = 1;
            }
        }
        present
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `3 × H × W`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Multi-hot image-level labels, one entry per class.
    pub labels: Vec<u8>,
    pub gt_mask: LabelMap,
    /// `H × W`, values in `[0, 1]`.
    pub saliency: Tensor<f32>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn classes(&self) -> usize {
        self.labels.len()
    }

    /// Checks the cross-field invariants.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        if self.image.shape() != [3, h, w] {
            return Err(Error::shape("sample", format!("image shape {:?}", self.image.shape())));
        }
        if self.gt_mask.height != h || self.gt_mask.width != w || self.saliency.shape() != [h, w] {
            return Err(Error::shape("sample", "mask or saliency geometry differs from the image"));
        }
        let c = self.classes();
        if let Some(bad) = self.gt_mask.data.iter().find(|&&v| v != IGNORE && v as usize > c) {
            return Err(Error::InvalidArgument(format!("mask value {bad} exceeds {c} classes")));
        }
        if self.gt_mask.present_classes(c) != self.labels {
            return Err(Error::InvalidArgument("labels disagree with the mask".into()));
        }
        let in_unit = |t: &Tensor<f32>| t.data().iter().all(|v| (0.0..=1.0).contains(v));
        if !in_unit(&self.image) || !in_unit(&self.saliency) {
            return Err(Error::InvalidArgument("image or saliency outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// Stacks sample images into an `N × 3 × H × W` batch.
pub fn batch_images(samples: &[&Sample]) -> Result<Tensor<f32>> {
    let images: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.clone()).collect();
    Tensor::stack(&images)
}

/// Stacks multi-hot labels into an `N × C` tensor.
pub fn batch_labels(samples: &[&Sample]) -> Result<Tensor<f32>> {
    let c = samples.first().map_or(0, |s| s.classes());
    let data = samples.iter().flat_map(|s| s.labels.iter().map(|&v| v as f32)).collect();
    Tensor::new([samples.len(), c], data)
}
