//! Importance sampling of target images: draw a class uniformly, then an
//! image in proportion to that class's prior mass in it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::io::write_atomic;
use crate::model::SoftmaxMap;
use crate::pseudo::estimate_prior;
use crate::rng::RngStream;

/// Per-image class priors of a target set, fixed after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerState {
    num_classes: usize,
    num_images: usize,
    /// `K × n_images`, row `c` holds χ_{c,·}.
    chi: Vec<f64>,
    /// Σ_n χ_{c,n} per class.
    class_sums: Vec<f64>,
    /// χ̂_{c,l} = χ_{c,l} / Σ_n χ_{c,n}; zero rows where the sum is zero.
    weights: Vec<f64>,
}

impl SamplerState {
    pub fn from_chi_matrix(num_classes: usize, num_images: usize, chi: Vec<f64>) -> Result<Self> {
        if num_images == 0 {
            return Err(Error::InvalidArgument("sampler needs at least one image".into()));
        }
        if chi.len() != num_classes * num_images {
            return Err(Error::Shape(format!(
                "chi matrix needs {}x{} entries, got {}",
                num_classes,
                num_images,
                chi.len()
            )));
        }
        if let Some(v) = chi.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidArgument(format!("chi entry {v} is negative or non-finite")));
        }
        let class_sums: Vec<f64> = chi
            .chunks(num_images)
            .map(|row| row.iter().sum())
            .collect();
        let mut weights = vec![0.0; chi.len()];
        for (c, &sum) in class_sums.iter().enumerate() {
            if sum > 0.0 {
                for l in 0..num_images {
                    weights[c * num_images + l] = chi[c * num_images + l] / sum;
                }
            }
        }
        Ok(Self {
            num_classes,
            num_images,
            chi,
            class_sums,
            weights,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_images(&self) -> usize {
        self.num_images
    }

    pub fn chi(&self, class: usize, image: usize) -> f64 {
        self.chi[class * self.num_images + image]
    }

    /// χ_{·,image} as a K-vector.
    pub fn column(&self, image: usize) -> Vec<f64> {
        (0..self.num_classes).map(|c| self.chi(c, image)).collect()
    }

    /// χ̂_{class,·}.
    pub fn class_weights(&self, class: usize) -> &[f64] {
        &self.weights[class * self.num_images..(class + 1) * self.num_images]
    }

    /// Marginal probability of drawing each image.
    pub fn marginal(&self) -> Vec<f64> {
        let k = self.num_classes as f64;
        let n = self.num_images;
        let mut p = vec![0.0; n];
        for c in 0..self.num_classes {
            for (l, pl) in p.iter_mut().enumerate() {
                *pl += if self.class_sums[c] > 0.0 {
                    self.weights[c * n + l]
                } else {
                    1.0 / n as f64
                } / k;
            }
        }
        p
    }

    /// Draws one image index. A class whose priors are all zero falls back to
    /// a uniform image.
    pub fn draw(&self, stream: &mut RngStream) -> usize {
        let c = stream.below(self.num_classes);
        let u = stream.uniform(0.0, 1.0);
        if self.class_sums[c] > 0.0 {
            let mut acc = 0.0;
            let row = self.class_weights(c);
            for (l, &w) in row.iter().enumerate() {
                acc += w;
                if u < acc {
                    return l;
                }
            }
            // rounding left u above the final cumulative sum
            row.iter().rposition(|&w| w > 0.0).unwrap_or(self.num_images - 1)
        } else {
            ((u * self.num_images as f64) as usize).min(self.num_images - 1)
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = SidecarHeader {
            format: SIDECAR_FORMAT.into(),
            num_classes: self.num_classes,
            num_images: self.num_images,
        };
        let mut bytes = serde_json::to_vec(&header).expect("header serializes");
        bytes.push(b'\n');
        for v in &self.chi {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(path, "missing header line"))?;
        let header: SidecarHeader = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
        if header.format != SIDECAR_FORMAT {
            return Err(Error::format(path, format!("unexpected format {}", header.format)));
        }
        let body = &bytes[nl + 1..];
        if body.len() != 8 * header.num_classes * header.num_images {
            return Err(Error::format(path, "payload length does not match header"));
        }
        let chi = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Self::from_chi_matrix(header.num_classes, header.num_images, chi)
            .map_err(|e| Error::format(path, e.to_string()))
    }
}

const SIDECAR_FORMAT: &str = "shiftseg-chi-matrix";

#[derive(Serialize, Deserialize)]
struct SidecarHeader {
    format: String,
    num_classes: usize,
    num_images: usize,
}

/// Runs `predict` on every target image and stores its mean class mass.
pub fn precompute_priors<F>(target_set: &[Image], mut predict: F) -> Result<SamplerState>
where
    F: FnMut(&Image) -> Result<SoftmaxMap>,
{
    if target_set.is_empty() {
        return Err(Error::InvalidArgument("empty target set".into()));
    }
    let n = target_set.len();
    let mut k = 0;
    let mut chi = Vec::new();
    let mut columns = Vec::with_capacity(n);
    for img in target_set {
        let map = predict(img)?;
        k = map.num_classes();
        columns.push(estimate_prior(&map));
    }
    chi.resize(k * n, 0.0);
    for (l, col) in columns.iter().enumerate() {
        for (c, &v) in col.iter().enumerate() {
            chi[c * n + l] = v;
        }
    }
    SamplerState::from_chi_matrix(k, n, chi)
}
