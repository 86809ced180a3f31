//! Integer images and per-pixel label masks.
//!
//! An [`Image`] holds 8-bit gray values; optimization always happens on a
//! real-valued copy ([`Image::to_real`]) and comes back through
//! [`clip_quantize`].

use crate::tensor::Tensor;

/// Integer raster, H x W x C, row-major, 8-bit gray values.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), height * width * channels, "image buffer size");
        Image { height, width, channels, data }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image { height, width, channels, data: vec![0; height * width * channels] }
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Real-valued working copy used by gradient-based procedures.
    pub fn to_real(&self) -> Tensor {
        Tensor::new(
            vec![self.height, self.width, self.channels],
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }

    /// Largest absolute per-channel difference to `other`.
    pub fn linf_distance(&self, other: &Image) -> u8 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a.abs_diff(b))
            .max()
            .unwrap_or(0)
    }
}

/// Clamp a real value into the valid gray range and round half away from zero.
#[inline]
pub fn clip_quantize_value(v: f64) -> u8 {
    // f64::round rounds half away from zero, which is the documented rule.
    v.clamp(0.0, 255.0).round() as u8
}

/// Quantize a real-valued H x W x C tensor back to an integer image.
pub fn clip_quantize(real: &Tensor) -> Image {
    let shape = real.shape();
    assert_eq!(shape.len(), 3, "clip_quantize expects an H x W x C tensor");
    Image::new(
        shape[0],
        shape[1],
        shape[2],
        real.data().iter().map(|&v| clip_quantize_value(v)).collect(),
    )
}

/// Per-pixel class assignment, H x W, values in [0, n_classes).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    pub height: usize,
    pub width: usize,
    classes: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, classes: Vec<u8>) -> Self {
        assert_eq!(classes.len(), height * width, "label mask size");
        LabelMask { height, width, classes }
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        LabelMask { height, width, classes: vec![class; height * width] }
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.classes[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, class: u8) {
        self.classes[y * self.width + x] = class;
    }

    pub fn max_class(&self) -> u8 {
        self.classes.iter().copied().max().unwrap_or(0)
    }

    /// Fraction of pixels where the two masks agree.
    pub fn agreement(&self, other: &LabelMask) -> f64 {
        assert_eq!(self.classes.len(), other.classes.len());
        if self.classes.is_empty() {
            return 0.0;
        }
        let same = self
            .classes
            .iter()
            .zip(&other.classes)
            .filter(|(a, b)| a == b)
            .count();
        same as f64 / self.classes.len() as f64
    }
}
