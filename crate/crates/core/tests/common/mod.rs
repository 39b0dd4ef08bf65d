//! Test-only oracles shared by the integration suites.

#![allow(dead_code)]

use shiftseg::imaging::{LabelMap, IGNORE};
use shiftseg::loss::{focal_target_loss, source_ce_loss};
use shiftseg::model::{backward, forward, BnMode, BnState, ModelParams};
use shiftseg::pseudo::PseudoLabelMap;
use shiftseg::{RngStream, Tensor};

pub const FD_STEP: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, 1e-6)`; the floor keeps gradients that are zero
/// up to rounding (conv biases ahead of batch-stat BN) from dividing noise
/// by noise.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn random_batch(b: usize, h: usize, w: usize, stream: &mut RngStream) -> Tensor {
    let data = (0..b * 3 * h * w).map(|_| stream.uniform(0.0, 1.0)).collect();
    Tensor::new(vec![b, 3, h, w], data).unwrap()
}

/// Initialised parameters with every BN affine and bias perturbed away from
/// its neutral value.
pub fn random_params(k: usize, stream: &mut RngStream) -> ModelParams {
    let mut p = ModelParams::init(k, stream);
    for name in ["bn1.scale", "bn2.scale"] {
        for v in p.slice_mut(name) {
            *v = 0.5 + stream.uniform(0.0, 1.0);
        }
    }
    for name in ["bn1.shift", "bn2.shift", "conv1.bias", "conv2.bias", "conv3.bias"] {
        for v in p.slice_mut(name) {
            *v = stream.uniform(-0.3, 0.3);
        }
    }
    p
}

pub fn random_bn(stream: &mut RngStream) -> BnState {
    let mut bn = BnState::new(0.1);
    for layer in 0..2 {
        for v in &mut bn.running_mean[layer] {
            *v = stream.uniform(-0.5, 0.5);
        }
        for v in &mut bn.running_var[layer] {
            *v = stream.uniform(0.5, 2.0);
        }
    }
    bn
}

pub fn random_labels(k: usize, h: usize, w: usize, stream: &mut RngStream) -> LabelMap {
    let data = (0..h * w)
        .map(|_| {
            if stream.bernoulli(0.15) {
                IGNORE
            } else {
                stream.below(k) as u8
            }
        })
        .collect();
    LabelMap::new(h, w, data, k).unwrap()
}

pub fn random_pseudo(k: usize, h: usize, w: usize, stream: &mut RngStream) -> PseudoLabelMap {
    let labels = random_labels(k, h, w, stream);
    let confidence = (0..h * w).map(|_| stream.uniform(0.2, 1.0)).collect();
    PseudoLabelMap { labels, confidence }
}

#[derive(Clone, Copy, Debug)]
pub enum LossKind {
    SourceCe,
    FocalTarget,
}

pub struct GradProblem {
    pub batch: Tensor,
    pub labels: Vec<LabelMap>,
    pub pseudo: Vec<PseudoLabelMap>,
    pub chi: Vec<f64>,
    pub bn: BnState,
    pub mode: BnMode,
    pub kind: LossKind,
}

impl GradProblem {
    /// Batch loss: mean of per-sample losses.
    pub fn loss_and_grad(&self, params: &ModelParams, with_grad: bool) -> (f64, Vec<f64>) {
        let mut bn = self.bn.clone();
        let out = forward(params, &mut bn, &self.batch, self.mode).unwrap();
        let b = out.maps.len();
        let k = params.num_classes();
        let (h, w) = (self.batch.dims()[2], self.batch.dims()[3]);
        let mut total = 0.0;
        let mut dlogits = Vec::with_capacity(b * k * h * w);
        for (i, map) in out.maps.iter().enumerate() {
            let report = match self.kind {
                LossKind::SourceCe => source_ce_loss(map, &self.labels[i]).unwrap(),
                LossKind::FocalTarget => {
                    focal_target_loss(map, &self.pseudo[i], &self.chi, 3.0, 5.0).unwrap()
                }
            };
            total += report.loss / b as f64;
            dlogits.extend(report.grad_logits.data().iter().map(|g| g / b as f64));
        }
        if !with_grad {
            return (total, Vec::new());
        }
        let dl = Tensor::new(vec![b, k, h, w], dlogits).unwrap();
        (total, backward(out.cache.as_ref().unwrap(), &dl).unwrap())
    }
}

/// Parameter groups checked separately: conv weights, BN affine, biases.
pub fn layer_groups(params: &ModelParams) -> Vec<(&'static str, Vec<usize>)> {
    let l = params.layout();
    let collect = |names: &[&str]| -> Vec<usize> {
        names.iter().flat_map(|n| l.range(n)).collect()
    };
    vec![
        ("conv weights", collect(&["conv1.weight", "conv2.weight", "conv3.weight"])),
        ("bn scale/shift", collect(&["bn1.scale", "bn1.shift", "bn2.scale", "bn2.shift"])),
        ("biases", collect(&["conv1.bias", "conv2.bias", "conv3.bias"])),
    ]
}

/// Central differences on `per_group` random coordinates of every group.
/// Returns the worst relative error per group.
pub fn finite_difference_check(
    problem: &GradProblem,
    params: &ModelParams,
    per_group: usize,
    stream: &mut RngStream,
) -> Vec<(&'static str, f64)> {
    let (_, analytic) = problem.loss_and_grad(params, true);
    layer_groups(params)
        .into_iter()
        .map(|(name, indices)| {
            let mut worst: f64 = 0.0;
            for _ in 0..per_group {
                let idx = indices[stream.below(indices.len())];
                let mut plus = params.clone();
                plus.values_mut()[idx] += FD_STEP;
                let mut minus = params.clone();
                minus.values_mut()[idx] -= FD_STEP;
                let numeric = (problem.loss_and_grad(&plus, false).0
                    - problem.loss_and_grad(&minus, false).0)
                    / (2.0 * FD_STEP);
                worst = worst.max(rel_error(analytic[idx], numeric));
            }
            (name, worst)
        })
        .collect()
}

pub fn build_problem(kind: LossKind, mode: BnMode, seed: u64) -> (GradProblem, ModelParams) {
    let (k, b, h, w) = (6, 2, 8, 8);
    let mut s = RngStream::root(seed).derive("gradcheck");
    let params = random_params(k, &mut s);
    let batch = random_batch(b, h, w, &mut s);
    let labels = (0..b).map(|_| random_labels(k, h, w, &mut s)).collect();
    let pseudo = (0..b).map(|_| random_pseudo(k, h, w, &mut s)).collect();
    let chi = (0..k).map(|_| s.uniform(0.0, 0.6)).collect();
    let bn = random_bn(&mut s);
    (
        GradProblem {
            batch,
            labels,
            pseudo,
            chi,
            bn,
            mode,
            kind,
        },
        params,
    )
}

/// Pure colours used by the oracle fixture, one per class.
pub const ORACLE_COLOURS: [[f64; 3]; 6] = [
    [0.0, 0.0, 0.0],
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [0.0, 1.0, 1.0],
];

/// A hand-set network computing a nearest-colour classifier: the first two
/// layers pass the RGB channels through unchanged and the 1×1 classifier
/// scores `2·x·μ_c − |μ_c|²`, scaled to near-hard decisions.
pub fn oracle_network() -> (ModelParams, BnState) {
    let mut p = ModelParams::zeros(6);
    for ch in 0..3 {
        for (name, cin) in [("conv1.weight", 3), ("conv2.weight", 16)] {
            p.slice_mut(name)[((ch * cin + ch) * 3 + 1) * 3 + 1] = 1.0;
        }
    }
    for name in ["bn1.scale", "bn2.scale"] {
        p.slice_mut(name).fill(1.0);
    }
    let sharp = 50.0;
    for (c, mu) in ORACLE_COLOURS.iter().enumerate() {
        for j in 0..3 {
            p.slice_mut("conv3.weight")[c * 16 + j] = sharp * 2.0 * mu[j];
        }
        p.slice_mut("conv3.bias")[c] = -sharp * mu.iter().map(|m| m * m).sum::<f64>();
    }
    let mut bn = BnState::new(0.1);
    for layer in 0..2 {
        bn.running_var[layer].fill(1.0 - shiftseg::model::BN_EPS);
    }
    (p, bn)
}

/// Writes a `target_val` split of pure-colour scenes and a checkpoint of the
/// oracle network; returns the checkpoint path.
pub fn write_oracle_fixture(root: &std::path::Path, count: usize) -> std::path::PathBuf {
    use shiftseg::imaging::pnm::{write_pgm, write_ppm};
    use shiftseg::imaging::Image;
    use shiftseg::model::checkpoint::Checkpoint;

    let (h, w) = (32, 32);
    let mut manifest = String::new();
    let mut s = RngStream::root(77);
    for i in 0..count {
        let mut labels = vec![0u8; h * w];
        for _ in 0..4 {
            let class = 1 + s.below(5) as u8;
            let (y0, x0) = (s.below(h - 8), s.below(w - 8));
            for y in y0..y0 + 8 {
                for x in x0..x0 + 8 {
                    labels[y * w + x] = class;
                }
            }
        }
        let n = h * w;
        let mut data = vec![0.0; 3 * n];
        for (p, &l) in labels.iter().enumerate() {
            for c in 0..3 {
                data[c * n + p] = ORACLE_COLOURS[l as usize][c];
            }
        }
        let rel = format!("target_val/images/{i:05}.ppm");
        write_ppm(&root.join(&rel), &Image::new(h, w, data).unwrap()).unwrap();
        write_pgm(
            &root.join(format!("target_val/labels/{i:05}.pgm")),
            &LabelMap::new(h, w, labels, 6).unwrap(),
        )
        .unwrap();
        manifest.push_str(&format!("{rel} target {i}\n"));
    }
    std::fs::write(root.join("manifest.txt"), manifest).unwrap();

    let (params, bn) = oracle_network();
    let velocity = vec![0.0; params.len()];
    let path = root.join("oracle.ckpt");
    Checkpoint {
        iteration: 0,
        input_h: h,
        input_w: w,
        config_hash: "oracle".into(),
        params,
        bn,
        velocity,
        momentum: None,
        class_prior: None,
    }
    .save(&path)
    .unwrap();
    path
}
