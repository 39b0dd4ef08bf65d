//! Confusion-matrix IoU over a labeled set.

use crate::databench::Dataset;
use crate::error::{Error, Result};
use crate::imaging::{Image, LabelMap, IGNORE};
use crate::model::{predict, BnState, ModelParams};
use crate::tensor::Tensor;

/// Accumulates true positives, false positives and false negatives per class.
#[derive(Debug, Clone, PartialEq)]
pub struct IouAccumulator {
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
}

impl IouAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self {
            tp: vec![0; num_classes],
            fp: vec![0; num_classes],
            fn_: vec![0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.tp.len()
    }

    /// Adds one image; IGNORE ground-truth pixels are skipped entirely.
    pub fn add(&mut self, prediction: &[u8], gt: &LabelMap) -> Result<()> {
        if prediction.len() != gt.data().len() {
            return Err(Error::Shape(format!(
                "prediction has {} pixels, ground truth {}",
                prediction.len(),
                gt.data().len()
            )));
        }
        let k = self.num_classes();
        for (&p, &g) in prediction.iter().zip(gt.data()) {
            if g == IGNORE {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= k || g >= k {
                return Err(Error::InvalidArgument(format!("label {} outside {k} classes", p.max(g))));
            }
            if p == g {
                self.tp[g] += 1;
            } else {
                self.fp[p] += 1;
                self.fn_[g] += 1;
            }
        }
        Ok(())
    }

    /// Per-class IoU; `None` for classes absent from both prediction and
    /// ground truth.
    pub fn per_class(&self) -> Vec<Option<f64>> {
        (0..self.num_classes())
            .map(|c| {
                let denom = self.tp[c] + self.fp[c] + self.fn_[c];
                (denom > 0).then(|| self.tp[c] as f64 / denom as f64)
            })
            .collect()
    }

    pub fn report(&self) -> EvalReport {
        let iou = self.per_class();
        let present: Vec<f64> = iou.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        EvalReport { iou, miou }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
}

pub(crate) fn stack(views: &[&Image]) -> Tensor {
    let (h, w) = (views[0].height(), views[0].width());
    let mut data = Vec::with_capacity(views.len() * 3 * h * w);
    for v in views {
        debug_assert_eq!((v.height(), v.width()), (h, w));
        data.extend_from_slice(v.data());
    }
    Tensor::new(vec![views.len(), 3, h, w], data).expect("images hold finite values")
}

const EVAL_BATCH: usize = 8;

/// Argmax labels per image at native resolution, single forward pass.
pub fn predict_labels(params: &ModelParams, bn: &BnState, images: &[Image]) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        // images of differing sizes cannot share a batch
        let same = chunk.iter().all(|i| (i.height(), i.width()) == (chunk[0].height(), chunk[0].width()));
        let groups: Vec<Vec<&Image>> = if same {
            vec![chunk.iter().collect()]
        } else {
            chunk.iter().map(|i| vec![i]).collect()
        };
        for group in groups {
            for map in predict(params, bn, &stack(&group))? {
                out.push((0..map.pixels()).map(|i| map.argmax(i) as u8).collect());
            }
        }
    }
    Ok(out)
}

pub fn evaluate(params: &ModelParams, bn: &BnState, data: &Dataset) -> Result<EvalReport> {
    let mut acc = IouAccumulator::new(params.num_classes());
    for (pred, gt) in predict_labels(params, bn, &data.images)?.iter().zip(&data.labels) {
        acc.add(pred, gt)?;
    }
    Ok(acc.report())
}
