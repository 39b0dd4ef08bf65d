//! The toy segmentation network: two 3×3 conv + BN + ReLU blocks and a 1×1
//! classifier, with hand-derived gradients, SGD and the momentum-net EMA.

pub mod checkpoint;
mod net;

pub use net::{backward, forward, predict, BnMode, ForwardCache, ForwardOutput};

use std::ops::Range;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Hidden channel width of both conv blocks.
pub const HIDDEN: usize = 16;
pub const IN_CHANNELS: usize = 3;
pub const BN_EPS: f64 = 1e-5;

/// Named index ranges into the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    num_classes: usize,
    entries: Vec<(String, Range<usize>)>,
}

impl Layout {
    pub fn new(num_classes: usize) -> Self {
        let shapes = [
            ("conv1.weight", HIDDEN * IN_CHANNELS * 9),
            ("conv1.bias", HIDDEN),
            ("bn1.scale", HIDDEN),
            ("bn1.shift", HIDDEN),
            ("conv2.weight", HIDDEN * HIDDEN * 9),
            ("conv2.bias", HIDDEN),
            ("bn2.scale", HIDDEN),
            ("bn2.shift", HIDDEN),
            ("conv3.weight", num_classes * HIDDEN),
            ("conv3.bias", num_classes),
        ];
        let mut offset = 0;
        let entries = shapes
            .iter()
            .map(|&(name, len)| {
                let r = offset..offset + len;
                offset += len;
                (name.to_string(), r)
            })
            .collect();
        Self {
            num_classes,
            entries,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn total(&self) -> usize {
        self.entries.last().map_or(0, |(_, r)| r.end)
    }

    pub fn range(&self, name: &str) -> Range<usize> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| r.clone())
            .unwrap_or_else(|| panic!("no layer named {name}"))
    }

    pub fn entries(&self) -> &[(String, Range<usize>)] {
        &self.entries
    }
}

/// Flat parameter vector plus the layout that names its slices.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layout: Layout,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn from_values(layout: Layout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total() {
            return Err(Error::Shape(format!(
                "layout needs {} parameters, got {}",
                layout.total(),
                values.len()
            )));
        }
        Ok(Self { layout, values })
    }

    pub fn zeros(num_classes: usize) -> Self {
        let layout = Layout::new(num_classes);
        let values = vec![0.0; layout.total()];
        Self { layout, values }
    }

    /// He-scaled normal conv weights, zero biases, unit BN scales.
    pub fn init(num_classes: usize, stream: &mut RngStream) -> Self {
        let mut p = Self::zeros(num_classes);
        for (name, fan_in) in [
            ("conv1.weight", IN_CHANNELS * 9),
            ("conv2.weight", HIDDEN * 9),
            ("conv3.weight", HIDDEN),
        ] {
            let std = (2.0 / fan_in as f64).sqrt();
            for v in p.slice_mut(name) {
                *v = std * stream.normal();
            }
        }
        p.slice_mut("bn1.scale").fill(1.0);
        p.slice_mut("bn2.scale").fill(1.0);
        p
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn num_classes(&self) -> usize {
        self.layout.num_classes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slice(&self, name: &str) -> &[f64] {
        &self.values[self.layout.range(name)]
    }

    pub fn slice_mut(&mut self, name: &str) -> &mut [f64] {
        let r = self.layout.range(name);
        &mut self.values[r]
    }
}

/// Running statistics of both BN layers.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub running_mean: [Vec<f64>; 2],
    pub running_var: [Vec<f64>; 2],
    pub update_momentum: f64,
}

impl BnState {
    pub fn new(update_momentum: f64) -> Self {
        Self {
            running_mean: [vec![0.0; HIDDEN], vec![0.0; HIDDEN]],
            running_var: [vec![1.0; HIDDEN], vec![1.0; HIDDEN]],
            update_momentum,
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(4 * HIDDEN);
        for layer in 0..2 {
            v.extend_from_slice(&self.running_mean[layer]);
            v.extend_from_slice(&self.running_var[layer]);
        }
        v
    }

    pub fn from_flat(flat: &[f64], update_momentum: f64) -> Result<Self> {
        if flat.len() != 4 * HIDDEN {
            return Err(Error::Shape(format!(
                "BN state needs {} values, got {}",
                4 * HIDDEN,
                flat.len()
            )));
        }
        let chunk = |i: usize| flat[i * HIDDEN..(i + 1) * HIDDEN].to_vec();
        let state = Self {
            running_mean: [chunk(0), chunk(2)],
            running_var: [chunk(1), chunk(3)],
            update_momentum,
        };
        if state.running_var.iter().flatten().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidArgument("running variance must be > 0".into()));
        }
        Ok(state)
    }
}

/// Per-pixel class distribution of one image, `K×h×w`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxMap(Tensor);

impl SoftmaxMap {
    /// Validates that every pixel is a distribution (sum within 1e-9).
    pub fn new(t: Tensor) -> Result<Self> {
        let dims = t.dims();
        if dims.len() != 3 {
            return Err(Error::Shape(format!("softmax map must be K×h×w, got {dims:?}")));
        }
        let (k, n) = (dims[0], dims[1] * dims[2]);
        for i in 0..n {
            let mut sum = 0.0;
            for c in 0..k {
                let v = t.data()[c * n + i];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidArgument(format!("probability {v} outside [0, 1]")));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "pixel {i} sums to {sum}, not 1"
                )));
            }
        }
        Ok(Self(t))
    }

    pub(crate) fn from_tensor_unchecked(t: Tensor) -> Self {
        Self(t)
    }

    pub fn uniform(k: usize, h: usize, w: usize) -> Self {
        Self(Tensor::filled(vec![k, h, w], 1.0 / k as f64))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.0.dims()[2]
    }

    pub fn pixels(&self) -> usize {
        self.height() * self.width()
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        self.0.plane(c)
    }

    pub fn prob(&self, c: usize, i: usize) -> f64 {
        self.0.data()[c * self.pixels() + i]
    }

    /// Most probable class at pixel `i`; ties go to the lowest index.
    pub fn argmax(&self, i: usize) -> usize {
        let mut best = 0;
        let mut best_p = self.prob(0, i);
        for c in 1..self.num_classes() {
            let p = self.prob(c, i);
            if p > best_p {
                best = c;
                best_p = p;
            }
        }
        best
    }
}

/// Heavy-ball SGD with L2 weight decay:
/// `v ← μ·v + g + wd·p`, `p ← p − lr·v`.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), velocity.len());
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
}

/// `ψ ← γψ·ψ + (1 − γψ)·φ`, elementwise.
pub fn ema_update(psi: &mut ModelParams, phi: &ModelParams, gamma_psi: f64) -> Result<()> {
    if psi.layout != phi.layout {
        return Err(Error::Shape("momentum and segmentation layouts differ".into()));
    }
    for (s, &f) in psi.values.iter_mut().zip(&phi.values) {
        *s = gamma_psi * *s + (1.0 - gamma_psi) * f;
    }
    Ok(())
}
