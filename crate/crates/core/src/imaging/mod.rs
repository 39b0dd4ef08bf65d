//! Images, label maps, and the spatial and photometric transforms applied to
//! them, including the exact inverse of the crop transform.

pub(crate) mod photometric;
pub mod pnm;
mod spatial;

pub use photometric::{apply_photometric, box_length, sample_photo_noise, PhotoNoiseSpec};
pub use spatial::{
    apply_crop, apply_crop_labels, inverse_project, resample_plane, sample_crop_spec, CropSpec,
    Coverage,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Label value excluded from losses and metrics.
pub const IGNORE: u8 = 255;

/// Three-channel planar image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape("image dimensions must be positive".into()));
        }
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::Shape(format!(
                "image {height}x{width} needs {} values, got {}",
                Self::CHANNELS * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let n = height * width;
        let mut data = Vec::with_capacity(3 * n);
        for v in rgb {
            data.extend(std::iter::repeat(v.clamp(0.0, 1.0)).take(n));
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// Builds an image by clamping arbitrary values into `[0, 1]`.
    pub(crate) fn from_clamped(height: usize, width: usize, mut data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), 3 * height * width);
        for v in &mut data {
            *v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![3, self.height, self.width], self.data.clone())
            .expect("image buffer is consistent")
    }

    pub fn max_abs_diff_image(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Horizontal mirror.
    pub fn flipped(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.width) {
            row.reverse();
        }
        Self {
            data,
            ..self.clone()
        }
    }
}

/// Per-pixel class indices, `IGNORE` for unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>, num_classes: usize) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Shape(format!(
                "label map {height}x{width} with {} values",
                data.len()
            )));
        }
        if let Some(v) = data
            .iter()
            .find(|&&v| v != IGNORE && v as usize >= num_classes)
        {
            return Err(Error::InvalidArgument(format!(
                "label {v} is neither a class below {num_classes} nor IGNORE"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<u8>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn flipped(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.width) {
            row.reverse();
        }
        Self {
            data,
            ..self.clone()
        }
    }
}

/// Horizontal mirror of every plane of a `C×h×w` tensor.
pub fn flip_planes(map: &Tensor) -> Tensor {
    let w = *map.dims().last().expect("non-empty dims");
    let mut out = map.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}
