use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorkit::Tensor;

/// Integer class map, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape("label map", format!("{}x{} vs {} labels", height, width, labels.len())));
        }
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self { height, width, labels: vec![class; height * width] }
    }

    pub fn max_class(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    pub fn as_u32(&self) -> Vec<u32> {
        self.labels.iter().map(|&l| l as u32).collect()
    }

    /// Fraction of pixels carrying `class`.
    pub fn fraction(&self, class: u8) -> f64 {
        self.labels.iter().filter(|&&l| l == class).count() as f64 / self.labels.len() as f64
    }
}

/// Provenance of a generated sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub generator: String,
    pub noise: String,
}

/// One labelled image: `image` is `[C, H, W]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub image: Tensor<f32>,
    pub labels: LabelMap,
    pub meta: SampleMeta,
}

impl SegSample {
    pub fn new(image: Tensor<f32>, labels: LabelMap, meta: SampleMeta) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 || s[1] != labels.height || s[2] != labels.width {
            return Err(Error::shape("sample", format!("image {s:?} vs labels {}x{}", labels.height, labels.width)));
        }
        Ok(Self { image, labels, meta })
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.labels.height
    }

    pub fn width(&self) -> usize {
        self.labels.width
    }
}

/// Stacks sample images into a `[B, C, H, W]` batch.
pub fn batch_images(samples: &[&SegSample]) -> Result<Tensor<f32>> {
    let first = samples.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(first.image.shape());
    let mut data = Vec::with_capacity(shape.iter().product());
    for s in samples {
        if s.image.shape() != first.image.shape() {
            return Err(Error::shape("batch", format!("{:?} vs {:?}", s.image.shape(), first.image.shape())));
        }
        data.extend_from_slice(s.image.data());
    }
    Tensor::new(shape, data)
}
