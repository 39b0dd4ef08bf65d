//! Target batch construction and fusion of momentum-net predictions made on
//! multi-scale, flipped crops back onto the full image canvas.

use crate::config::FusionMode;
use crate::error::{Error, Result};
use crate::imaging::{
    apply_crop, apply_photometric, inverse_project, sample_crop_spec, sample_photo_noise,
    CropSpec, Image,
};
use crate::model::SoftmaxMap;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Switches that alter how target views are generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViewOptions {
    pub photometric: bool,
    pub flip: bool,
}

impl Default for ViewOptions {
    fn default() -> Self {
        Self {
            photometric: true,
            flip: true,
        }
    }
}

/// Clean views for the momentum net and their noisy twins for the
/// segmentation net. Index 0 of [`TargetBatch::views`] is the full image.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetBatch {
    pub original_clean: Image,
    pub crops_clean: Vec<Image>,
    pub crop_specs: Vec<CropSpec>,
    pub original_noisy: Image,
    pub crops_noisy: Vec<Image>,
    /// Geometry of the full-image view.
    pub original_spec: CropSpec,
}

impl TargetBatch {
    pub fn len(&self) -> usize {
        1 + self.crops_clean.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Full-image spec followed by the crop specs.
    pub fn specs(&self) -> Vec<CropSpec> {
        std::iter::once(self.original_spec)
            .chain(self.crop_specs.iter().copied())
            .collect()
    }

    pub fn clean_views(&self) -> impl Iterator<Item = &Image> {
        std::iter::once(&self.original_clean).chain(&self.crops_clean)
    }

    pub fn noisy_views(&self) -> impl Iterator<Item = &Image> {
        std::iter::once(&self.original_noisy).chain(&self.crops_noisy)
    }
}

/// Samples `n` crops of `img` and resizes every view to `out_h×out_w`.
/// Each element gets its own photometric draw unless disabled.
pub fn build_target_batch(
    img: &Image,
    n: usize,
    min_scale: f64,
    out_h: usize,
    out_w: usize,
    options: ViewOptions,
    stream: &RngStream,
) -> Result<TargetBatch> {
    let (h, w) = (img.height(), img.width());
    let original_spec = CropSpec::full(h, w);
    let original_clean = apply_crop(img, &original_spec, out_h, out_w)?;
    let mut crop_specs = Vec::with_capacity(n);
    let mut crops_clean = Vec::with_capacity(n);
    for i in 0..n {
        let mut spec = sample_crop_spec(h, w, min_scale, &mut stream.derive(&format!("crop={i}")));
        if !options.flip {
            spec.flip = false;
        }
        crops_clean.push(apply_crop(img, &spec, out_h, out_w)?);
        crop_specs.push(spec);
    }
    let noisy = |view: &Image, label: &str| {
        if options.photometric {
            let spec = sample_photo_noise(&mut stream.derive(label));
            apply_photometric(view, &spec)
        } else {
            view.clone()
        }
    };
    let original_noisy = noisy(&original_clean, "noise=original");
    let crops_noisy = crops_clean
        .iter()
        .enumerate()
        .map(|(i, c)| noisy(c, &format!("noise={i}")))
        .collect();
    Ok(TargetBatch {
        original_clean,
        crops_clean,
        crop_specs,
        original_noisy,
        crops_noisy,
        original_spec,
    })
}

/// Fused class distribution on the full canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedPrediction {
    pub map: SoftmaxMap,
    /// Number of views covering each pixel, at least 1.
    pub coverage: Vec<u32>,
}

fn entropy(map: &Tensor, k: usize, n: usize, i: usize) -> f64 {
    (0..k)
        .map(|c| {
            let p = map.data()[c * n + i];
            if p > 0.0 {
                -p * p.ln()
            } else {
                0.0
            }
        })
        .sum()
}

/// Re-projects every view's prediction onto the `canvas` and merges them:
/// the per-pixel mean over covering views, or the covering view with the
/// lowest entropy (ties to the earlier view).
pub fn fuse(
    predictions: &[SoftmaxMap],
    specs: &[CropSpec],
    canvas: (usize, usize),
    mode: FusionMode,
) -> Result<FusedPrediction> {
    let (ch, cw) = canvas;
    if predictions.len() != specs.len() + 1 {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} crops; expected one more than the crops",
            predictions.len(),
            specs.len()
        )));
    }
    let k = predictions[0].num_classes();
    let n = ch * cw;
    let full = CropSpec::full(ch, cw);
    let views = std::iter::once(&full).chain(specs);

    let mut acc = Tensor::zeros(vec![k, ch, cw]);
    let mut coverage = vec![0u32; n];
    let mut best_entropy = vec![f64::INFINITY; n];
    for (pred, spec) in predictions.iter().zip(views) {
        if pred.num_classes() != k {
            return Err(Error::Shape("predictions disagree on class count".into()));
        }
        let (proj, cov) = inverse_project(pred.tensor(), spec, ch, cw)?;
        for i in (0..n).filter(|&i| cov.mask[i]) {
            coverage[i] += 1;
            match mode {
                FusionMode::Average => {
                    for c in 0..k {
                        acc.data_mut()[c * n + i] += proj.data()[c * n + i];
                    }
                }
                FusionMode::MinEntropy => {
                    let e = entropy(&proj, k, n, i);
                    if e < best_entropy[i] {
                        best_entropy[i] = e;
                        for c in 0..k {
                            acc.data_mut()[c * n + i] = proj.data()[c * n + i];
                        }
                    }
                }
            }
        }
    }
    if mode == FusionMode::Average {
        let d = acc.data_mut();
        for (i, &count) in coverage.iter().enumerate() {
            if count > 1 {
                let inv = count as f64;
                for c in 0..k {
                    d[c * n + i] /= inv;
                }
            }
        }
    }
    Ok(FusedPrediction {
        map: SoftmaxMap::from_tensor_unchecked(acc),
        coverage,
    })
}
