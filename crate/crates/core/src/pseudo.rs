//! Moving class priors, per-sample thresholds and pseudo-label extraction.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::imaging::{LabelMap, IGNORE};
use crate::model::SoftmaxMap;

const HISTORY_CAP: usize = 1024;

/// Exponential moving average of the per-class prior χ.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPriorState {
    chi: Vec<f64>,
    pub gamma_chi: f64,
    pub beta: f64,
    pub zeta: f64,
    history: VecDeque<Vec<f64>>,
}

impl ClassPriorState {
    /// Starts from the uniform prior `1/K`.
    pub fn uniform(num_classes: usize, gamma_chi: f64, beta: f64, zeta: f64) -> Self {
        Self::with_chi(vec![1.0 / num_classes as f64; num_classes], gamma_chi, beta, zeta)
    }

    pub fn with_chi(chi: Vec<f64>, gamma_chi: f64, beta: f64, zeta: f64) -> Self {
        Self {
            chi,
            gamma_chi,
            beta,
            zeta,
            history: VecDeque::new(),
        }
    }

    pub fn chi(&self) -> &[f64] {
        &self.chi
    }

    /// Most recent χ snapshots, oldest first (bounded).
    pub fn history(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.history.iter()
    }

    /// `χ ← γχ·χ + (1 − γχ)·observation`.
    pub fn update(&mut self, observation: &[f64]) -> Result<()> {
        if observation.len() != self.chi.len() {
            return Err(Error::Shape(format!(
                "prior observation has {} classes, state has {}",
                observation.len(),
                self.chi.len()
            )));
        }
        if let Some(v) = observation.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("prior observation {v} outside [0, 1]")));
        }
        let g = self.gamma_chi;
        for (c, &o) in self.chi.iter_mut().zip(observation) {
            *c = g * *c + (1.0 - g) * o;
        }
        if self.history.len() == HISTORY_CAP {
            self.history.pop_front();
        }
        self.history.push_back(self.chi.clone());
        Ok(())
    }
}

/// Mean probability mass per class over the pixels of one map.
pub fn estimate_prior(map: &SoftmaxMap) -> Vec<f64> {
    let n = map.pixels() as f64;
    (0..map.num_classes())
        .map(|c| map.plane(c).iter().sum::<f64>() / n)
        .collect()
}

/// Peak probability per class over the pixels of one map.
pub fn peak_confidence(map: &SoftmaxMap) -> Vec<f64> {
    (0..map.num_classes())
        .map(|c| map.plane(c).iter().copied().fold(0.0, f64::max))
        .collect()
}

/// `θ_c = ζ·(1 − exp(−χ_c/β))·m*_c`.
pub fn thresholds(state: &ClassPriorState, peak: &[f64]) -> Vec<f64> {
    state
        .chi
        .iter()
        .zip(peak)
        .map(|(&chi, &m)| state.zeta * (1.0 - (-chi / state.beta).exp()) * m)
        .collect()
}

/// The β → 0 limit of [`thresholds`]: `θ_c = ζ·m*_c`.
pub fn thresholds_without_class_prior(zeta: f64, peak: &[f64]) -> Vec<f64> {
    peak.iter().map(|&m| zeta * m).collect()
}

/// Pseudo labels with the momentum net's confidence in each label.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelMap {
    pub labels: LabelMap,
    pub confidence: Vec<f64>,
}

impl PseudoLabelMap {
    pub fn height(&self) -> usize {
        self.labels.height()
    }

    pub fn width(&self) -> usize {
        self.labels.width()
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.data().iter().filter(|&&l| l != IGNORE).count()
    }

    /// Replaces every confidence by 1 (no confidence regularisation).
    pub fn with_unit_confidence(mut self) -> Self {
        self.confidence.fill(1.0);
        self
    }

    pub fn all_ignore(height: usize, width: usize) -> Self {
        Self {
            labels: LabelMap::filled(height, width, IGNORE),
            confidence: vec![0.0; height * width],
        }
    }
}

/// Labels each pixel with its argmax class when that class's probability
/// exceeds its threshold, IGNORE otherwise.
pub fn extract_pseudo_labels(fused: &SoftmaxMap, theta: &[f64]) -> Result<PseudoLabelMap> {
    let k = fused.num_classes();
    if theta.len() != k {
        return Err(Error::Shape(format!("{} thresholds for {k} classes", theta.len())));
    }
    let n = fused.pixels();
    let mut labels = Vec::with_capacity(n);
    let mut confidence = Vec::with_capacity(n);
    for i in 0..n {
        let c = fused.argmax(i);
        let p = fused.prob(c, i);
        labels.push(if p > theta[c] { c as u8 } else { IGNORE });
        confidence.push(p);
    }
    Ok(PseudoLabelMap {
        labels: LabelMap::from_raw(fused.height(), fused.width(), labels),
        confidence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn map(k: usize, h: usize, w: usize, data: Vec<f64>) -> SoftmaxMap {
        SoftmaxMap::new(Tensor::new(vec![k, h, w], data).unwrap()).unwrap()
    }

    #[test]
    fn prior_of_uniform_and_half_mass() {
        let u = SoftmaxMap::uniform(4, 3, 3);
        assert!(estimate_prior(&u).iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let m = map(2, 2, 2, vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(estimate_prior(&m), vec![0.5, 0.5]);
    }

    #[test]
    fn update_special_cases() {
        let mut s = ClassPriorState::with_chi(vec![0.1, 0.9], 1.0, 1e-3, 0.75);
        s.update(&[0.7, 0.3]).unwrap();
        assert_eq!(s.chi(), &[0.1, 0.9]);

        let mut s = ClassPriorState::with_chi(vec![0.1, 0.9], 0.99, 1e-3, 0.75);
        s.update(&[0.2, 0.8]).unwrap();
        assert!((s.chi()[0] - 0.101).abs() < 1e-12);
        assert!(s.update(&[1.2, 0.0]).is_err());
        assert!(s.update(&[0.5]).is_err());
    }

    #[test]
    fn peak_is_max() {
        let m = map(
            2,
            2,
            2,
            vec![0.1, 0.7, 0.3, 0.2, 0.9, 0.3, 0.7, 0.8],
        );
        assert_eq!(peak_confidence(&m)[0], 0.7);
        let u = SoftmaxMap::uniform(5, 2, 2);
        assert!(peak_confidence(&u).iter().all(|&v| v == 0.2));
    }

    #[test]
    fn threshold_values() {
        let s = ClassPriorState::with_chi(vec![0.0, 0.5, 1e-3], 0.99, 1e-3, 0.75);
        let th = thresholds(&s, &[0.9, 0.8, 1.0]);
        assert_eq!(th[0], 0.0);
        assert!((th[1] - 0.75 * 0.8).abs() < 1e-12);
        assert!((th[2] - 0.75 * (1.0 - (-1.0f64).exp())).abs() < 1e-12);
        // 0.4740904..., commonly quoted rounded as 0.474088
        assert!((th[2] - 0.474088).abs() < 1e-5);
        assert_eq!(thresholds_without_class_prior(0.75, &[0.8]), vec![0.75 * 0.8]);
    }

    #[test]
    fn extraction_decisions() {
        let m = map(3, 1, 1, vec![0.5, 0.3, 0.2]);
        let p = extract_pseudo_labels(&m, &[0.4, 0.6, 0.6]).unwrap();
        assert_eq!(p.labels.data(), &[0]);
        assert_eq!(p.confidence, vec![0.5]);

        let m = map(3, 1, 1, vec![0.45, 0.45, 0.10]);
        let p = extract_pseudo_labels(&m, &[0.5, 0.0, 0.0]).unwrap();
        // tie goes to class 0, which fails its threshold
        assert_eq!(p.labels.data(), &[IGNORE]);

        let m = map(2, 1, 2, vec![0.6, 0.3, 0.4, 0.7]);
        let p = extract_pseudo_labels(&m, &[0.0, 0.0]).unwrap();
        assert_eq!(p.labels.data(), &[0, 1]);
    }

    #[test]
    fn one_hot_maps_label_everything() {
        let m = map(3, 1, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let p = extract_pseudo_labels(&m, &[0.99, 0.99, 0.99]).unwrap();
        assert_eq!(p.labels.data(), &[0, 1, 2]);
    }

    #[test]
    fn closed_form_after_constant_observations() {
        let (g, x, chi0) = (0.99f64, 0.3, 0.05);
        let mut s = ClassPriorState::with_chi(vec![chi0], g, 1e-3, 0.75);
        for t in 1..=10_000u32 {
            s.update(&[x]).unwrap();
            if t % 1000 == 0 {
                let expect = g.powi(t as i32) * chi0 + (1.0 - g.powi(t as i32)) * x;
                assert!((s.chi()[0] - expect).abs() < 1e-10);
            }
        }
    }

    proptest! {
        #[test]
        fn threshold_shape(
            chi_a in 0.0f64..1.0, chi_b in 0.0f64..1.0, peak in 0.01f64..=1.0,
            beta in 1e-4f64..1e-1, zeta in 0.1f64..=1.0,
        ) {
            let (lo, hi) = if chi_a < chi_b { (chi_a, chi_b) } else { (chi_b, chi_a) };
            let s = ClassPriorState::with_chi(vec![lo, hi], 0.99, beta, zeta);
            let th = thresholds(&s, &[peak, peak]);
            prop_assert!(th[0] <= th[1]);
            prop_assert!(th[1] <= zeta * peak);
            // smaller beta never lowers a threshold
            let sharper = ClassPriorState::with_chi(vec![lo, hi], 0.99, beta / 2.0, zeta);
            let th2 = thresholds(&sharper, &[peak, peak]);
            prop_assert!(th2[0] >= th[0] && th2[1] >= th[1]);
        }

        #[test]
        fn raising_a_threshold_never_adds_labels(
            probs in proptest::collection::vec(0.01f64..1.0, 12),
            theta in proptest::collection::vec(0.0f64..1.0, 3),
            which in 0usize..3, bump in 0.0f64..0.5,
        ) {
            // 4 pixels × 3 classes, normalised per pixel
            let mut data = vec![0.0; 12];
            for i in 0..4 {
                let s: f64 = (0..3).map(|c| probs[i * 3 + c]).sum();
                for c in 0..3 {
                    data[c * 4 + i] = probs[i * 3 + c] / s;
                }
            }
            let m = SoftmaxMap::new(Tensor::new(vec![3, 2, 2], data).unwrap()).unwrap();
            let base = extract_pseudo_labels(&m, &theta).unwrap();
            let mut raised = theta.clone();
            raised[which] += bump;
            let after = extract_pseudo_labels(&m, &raised).unwrap();
            for (a, b) in base.labels.data().iter().zip(after.labels.data()) {
                if *a == IGNORE {
                    prop_assert_eq!(*b, IGNORE);
                }
            }
        }

        #[test]
        fn chi_stays_in_unit_interval(
            obs in proptest::collection::vec(proptest::collection::vec(0.0f64..=1.0, 3), 1..50),
            gamma in 0.0f64..=1.0,
        ) {
            let mut s = ClassPriorState::uniform(3, gamma, 1e-3, 0.75);
            for o in &obs {
                s.update(o).unwrap();
                prop_assert!(s.chi().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
