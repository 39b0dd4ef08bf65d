//! Target and source losses with gradients w.r.t. the pre-softmax logits.

use crate::error::{Error, Result};
use crate::imaging::{LabelMap, IGNORE};
use crate::model::SoftmaxMap;
use crate::pseudo::PseudoLabelMap;
use crate::tensor::Tensor;

/// Probabilities are clamped to this floor before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct LossReport {
    pub loss: f64,
    /// dL/dlogits, `K×h×w`; zero at IGNORE pixels.
    pub grad_logits: Tensor,
    /// Pixels that contributed to the loss.
    pub count: usize,
    pub clamp_count: usize,
}

/// `(1 − χ)^λ`, the prior-driven focal multiplier.
pub fn focal_weight(chi: f64, lambda: f64) -> f64 {
    (1.0 - chi).powf(lambda)
}

/// Weighted cross-entropy over labeled pixels, averaged over those pixels
/// and multiplied by `scale`. `weight(i, c)` gives the per-pixel weight.
fn weighted_ce(
    pred: &SoftmaxMap,
    labels: &LabelMap,
    scale: f64,
    weight: impl Fn(usize, usize) -> f64,
) -> Result<LossReport> {
    let (k, h, w) = (pred.num_classes(), pred.height(), pred.width());
    if labels.height() != h || labels.width() != w {
        return Err(Error::Shape(format!(
            "prediction {h}x{w} vs labels {}x{}",
            labels.height(),
            labels.width()
        )));
    }
    let n = h * w;
    let mut grad = Tensor::zeros(vec![k, h, w]);
    let count = labels.data().iter().filter(|&&l| l != IGNORE).count();
    if count == 0 {
        return Ok(LossReport {
            loss: 0.0,
            grad_logits: grad,
            count: 0,
            clamp_count: 0,
        });
    }
    let norm = scale / count as f64;
    let mut total = 0.0;
    let mut clamp_count = 0;
    let g = grad.data_mut();
    for (i, &label) in labels.data().iter().enumerate() {
        if label == IGNORE {
            continue;
        }
        let c = label as usize;
        if c >= k {
            return Err(Error::InvalidArgument(format!("label {c} outside {k} classes")));
        }
        let wt = weight(i, c);
        let p = pred.prob(c, i);
        if p < PROB_FLOOR {
            clamp_count += 1;
        }
        total += -wt * p.max(PROB_FLOOR).ln();
        let f = wt * norm;
        for j in 0..k {
            g[j * n + i] = f * pred.prob(j, i);
        }
        g[c * n + i] -= f;
    }
    Ok(LossReport {
        loss: total * norm,
        grad_logits: grad,
        count,
        clamp_count,
    })
}

/// Focal, confidence-weighted target loss: per labeled pixel
/// `−m_c*·(1 − χ_c*)^λ·log(m̄_c*)`, averaged over labeled pixels, times `scale`.
pub fn focal_target_loss(
    pred: &SoftmaxMap,
    pseudo: &PseudoLabelMap,
    chi: &[f64],
    lambda: f64,
    scale: f64,
) -> Result<LossReport> {
    if chi.len() != pred.num_classes() {
        return Err(Error::Shape(format!(
            "{} priors for {} classes",
            chi.len(),
            pred.num_classes()
        )));
    }
    if lambda < 0.0 {
        return Err(Error::InvalidArgument(format!("lambda {lambda} < 0")));
    }
    let focal: Vec<f64> = chi.iter().map(|&x| focal_weight(x, lambda)).collect();
    weighted_ce(pred, &pseudo.labels, scale, |i, c| {
        pseudo.confidence[i] * focal[c]
    })
}

/// Mean cross-entropy over non-IGNORE pixels.
pub fn source_ce_loss(pred: &SoftmaxMap, gt: &LabelMap) -> Result<LossReport> {
    weighted_ce(pred, gt, 1.0, |_, _| 1.0)
}
