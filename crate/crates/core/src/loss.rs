//! Class-balanced cross-entropy with batch-adaptive voxel weights.
//!
//! Each class `c` is given a target share `t_c` of the total loss mass. In a
//! batch where class `c` covers `N_c` voxels, each of those voxels is weighted
//! `t_c / N_c`, so the class contributes exactly `t_c` of the summed weight no
//! matter how rare it is. Classes missing from a batch are dropped and the
//! remaining targets are rescaled to sum to one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Lower clamp on probabilities before taking the logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

const SUM_TOLERANCE: f64 = 1e-9;

/// Per-class target fractions of the loss; non-negative, summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TargetWeights(Vec<f64>);

impl TargetWeights {
    pub fn new(targets: Vec<f64>) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::Config("target weights must not be empty".into()));
        }
        if let Some(t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Config(format!("target weight {t} outside [0, 1]")));
        }
        let sum: f64 = targets.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::Config(format!(
                "target weights {targets:?} sum to {sum}, expected 1"
            )));
        }
        Ok(TargetWeights(targets))
    }

    /// `(0.4, 0.2, 0.2, 0.2)`: the 3D network default.
    pub fn volumetric_default() -> Self {
        TargetWeights(vec![0.4, 0.2, 0.2, 0.2])
    }

    /// `(0.7, 0.1, 0.1, 0.1)`: the 2D network default.
    pub fn planar_default() -> Self {
        TargetWeights(vec![0.7, 0.1, 0.1, 0.1])
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Targets restricted to classes with a non-zero count, rescaled to sum
    /// to one. Absent classes get zero.
    pub fn renormalized(&self, counts: &[usize]) -> Vec<f64> {
        let present_mass: f64 = self.0.iter().zip(counts).filter(|(_, &n)| n > 0).map(|(t, _)| t).sum();
        let present = counts.iter().filter(|&&n| n > 0).count();
        self.0
            .iter()
            .zip(counts)
            .map(|(&t, &n)| match (n > 0, present_mass > 0.0) {
                (false, _) => 0.0,
                (true, true) => t / present_mass,
                // every present class has target 0: spread the mass evenly
                (true, false) => 1.0 / present as f64,
            })
            .collect()
    }
}

impl TryFrom<Vec<f64>> for TargetWeights {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        TargetWeights::new(v)
    }
}

impl From<TargetWeights> for Vec<f64> {
    fn from(t: TargetWeights) -> Self {
        t.0
    }
}

/// Number of voxels of each class.
pub fn class_counts(labels: &[u8], classes: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; classes];
    for &l in labels {
        let slot = counts
            .get_mut(l as usize)
            .ok_or_else(|| Error::InvalidArgument(format!("label {l} outside [0, {classes})")))?;
        *slot += 1;
    }
    Ok(counts)
}

/// Voxel weights `t'_c / N_c` for the batch described by `labels`.
pub fn compute_voxel_weights(labels: &[u8], targets: &TargetWeights) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("empty label volume".into()));
    }
    let counts = class_counts(labels, targets.classes())?;
    let renorm = targets.renormalized(&counts);
    let per_class: Vec<f64> = renorm
        .iter()
        .zip(&counts)
        .map(|(&t, &n)| if n > 0 { t / n as f64 } else { 0.0 })
        .collect();
    Ok(labels.iter().map(|&l| per_class[l as usize]).collect())
}

/// Which ground-truth element count divides the weighted sum. Both resolve
/// to the number of labelled elements in the batch: voxels for volumetric
/// batches, pixels for slice batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalizer {
    Voxels,
    Pixels,
}

fn check_layout<T: Scalar>(probs: &Tensor<T>, labels: &[u8], weights: &[f64]) -> Result<usize> {
    if probs.shape().len() < 2 {
        return Err(Error::invalid_shape("weighted_cross_entropy", "missing channel axis"));
    }
    let plane: usize = probs.spatial().iter().product();
    let expect = probs.batch() * plane;
    if labels.len() != expect || weights.len() != expect {
        return Err(Error::shape(
            "weighted_cross_entropy",
            probs.shape(),
            &[labels.len(), weights.len()],
        ));
    }
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= probs.channels()) {
        return Err(Error::InvalidArgument(format!(
            "label {l} outside [0, {})",
            probs.channels()
        )));
    }
    Ok(plane)
}

/// `-(1/V) Σ w · log p_label` over every labelled element of the batch.
///
/// `probs` is `[batch, classes, spatial...]`; `labels` and `weights` are laid
/// out `[batch, spatial...]`.
pub fn weighted_cross_entropy<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[u8],
    weights: &[f64],
    _normalizer: Normalizer,
) -> Result<f64> {
    let plane = check_layout(probs, labels, weights)?;
    let c = probs.channels();
    let p = probs.data();
    let mut acc = 0.0;
    for (i, (&l, &w)) in labels.iter().zip(weights).enumerate() {
        let (n, q) = (i / plane, i % plane);
        let pl = p[(n * c + l as usize) * plane + q].to_f64_lossy();
        acc += w * pl.max(LOG_CLAMP).ln();
    }
    Ok(-acc / labels.len() as f64)
}

/// Gradient of [`weighted_cross_entropy`] with respect to `probs`.
pub fn weighted_cross_entropy_backward<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[u8],
    weights: &[f64],
    upstream: T,
) -> Result<Tensor<T>> {
    let plane = check_layout(probs, labels, weights)?;
    let c = probs.channels();
    let inv_v = 1.0 / labels.len() as f64;
    let mut grad = Tensor::zeros(probs.shape());
    let p = probs.data();
    let g = grad.data_mut();
    for (i, (&l, &w)) in labels.iter().zip(weights).enumerate() {
        let (n, q) = (i / plane, i % plane);
        let idx = (n * c + l as usize) * plane + q;
        let pl = p[idx].to_f64_lossy();
        if pl > LOG_CLAMP {
            g[idx] = upstream * T::of(-w * inv_v / pl);
        }
    }
    Ok(grad)
}

/// Convex mixing weights of the main and auxiliary losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCoefficients {
    pub c_main: f64,
    pub c_k: Vec<f64>,
}

impl LossCoefficients {
    /// `c_main = 0.75` and the remaining quarter split evenly across the
    /// `modalities + 1` subnetworks (0.05 each for four modalities).
    pub fn default_for(modalities: usize) -> Self {
        let k = modalities + 1;
        LossCoefficients {
            c_main: 0.75,
            c_k: vec![0.25 / k as f64; k],
        }
    }

    /// Main loss only.
    pub fn main_only(subnetworks: usize) -> Self {
        LossCoefficients {
            c_main: 1.0,
            c_k: vec![0.0; subnetworks],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = std::iter::once(&self.c_main).chain(&self.c_k);
        if let Some(c) = all.clone().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::Config(format!("loss coefficient {c} outside [0, 1]")));
        }
        let sum: f64 = all.sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::Config(format!("loss coefficients sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// The individual terms of a combined loss and their mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub main_loss: f64,
    pub subnetwork_losses: Vec<f64>,
    pub combined: f64,
    pub coefficients: LossCoefficients,
}

pub fn combined_loss(main: f64, subnetwork: &[f64], coefficients: &LossCoefficients) -> Result<LossBreakdown> {
    coefficients.validate()?;
    if subnetwork.len() != coefficients.c_k.len() {
        return Err(Error::InvalidArgument(format!(
            "{} subnetwork losses but {} coefficients",
            subnetwork.len(),
            coefficients.c_k.len()
        )));
    }
    let combined = coefficients.c_main * main
        + subnetwork
            .iter()
            .zip(&coefficients.c_k)
            .map(|(l, c)| l * c)
            .sum::<f64>();
    Ok(LossBreakdown {
        main_loss: main,
        subnetwork_losses: subnetwork.to_vec(),
        combined,
        coefficients: coefficients.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels_from_counts(counts: &[usize]) -> Vec<u8> {
        counts
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat_n(c as u8, n))
            .collect()
    }

    fn weight_of(labels: &[u8], w: &[f64], class: u8) -> f64 {
        let i = labels.iter().position(|&l| l == class).unwrap();
        w[i]
    }

    #[test]
    fn default_targets_on_full_batch() {
        let labels = labels_from_counts(&[100, 10, 10, 10]);
        let w = compute_voxel_weights(&labels, &TargetWeights::volumetric_default()).unwrap();
        for (class, want) in [(0, 0.004), (1, 0.02), (2, 0.02), (3, 0.02)] {
            assert!((weight_of(&labels, &w, class) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn single_class_batch() {
        let labels = vec![0u8; 37];
        let w = compute_voxel_weights(&labels, &TargetWeights::volumetric_default()).unwrap();
        assert!(w.iter().all(|&x| (x - 1.0 / 37.0).abs() < 1e-15));
    }

    #[test]
    fn absent_class_renormalizes_the_rest() {
        let labels = labels_from_counts(&[50, 0, 25, 25]);
        let w = compute_voxel_weights(&labels, &TargetWeights::volumetric_default()).unwrap();
        // hand oracle: present mass 0.8 -> (0.5, -, 0.25, 0.25)
        assert!((weight_of(&labels, &w, 0) - 0.5 / 50.0).abs() < 1e-15);
        assert!((weight_of(&labels, &w, 2) - 0.25 / 25.0).abs() < 1e-15);
        assert!((weight_of(&labels, &w, 3) - 0.25 / 25.0).abs() < 1e-15);
        let total: f64 = w.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_labels_fail() {
        assert!(compute_voxel_weights(&[], &TargetWeights::planar_default()).is_err());
    }

    #[test]
    fn targets_must_sum_to_one() {
        assert!(TargetWeights::new(vec![0.5, 0.2, 0.2, 0.2]).is_err());
        assert!(TargetWeights::new(vec![1.2, -0.2]).is_err());
        assert!(TargetWeights::new(vec![0.7, 0.1, 0.1, 0.1]).is_ok());
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let labels = vec![0u8, 1, 2, 3];
        let probs = Tensor::from_fn(&[1, 4, 2, 2], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        let w = compute_voxel_weights(&labels, &TargetWeights::volumetric_default()).unwrap();
        let loss = weighted_cross_entropy::<f64>(&probs, &labels, &w, Normalizer::Voxels).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn uniform_prediction_closed_form() {
        // 2x2 grid, labels (0, 0, 1, 3): weights sum to 1, so
        // loss = -(1/4) * sum(w) * ln(0.25) = ln(4) / 4
        let labels = vec![0u8, 0, 1, 3];
        let probs = Tensor::full(&[1, 4, 2, 2], 0.25f64);
        let w = compute_voxel_weights(&labels, &TargetWeights::volumetric_default()).unwrap();
        let by_hand = -(w[0] + w[1] + w[2] + w[3]) * 0.25f64.ln() / 4.0;
        let loss = weighted_cross_entropy(&probs, &labels, &w, Normalizer::Voxels).unwrap();
        assert!((loss - 4f64.ln() / 4.0).abs() < 1e-12);
        assert!((loss - by_hand).abs() < 1e-15);
    }

    #[test]
    fn paper_coefficients_validate() {
        let c = LossCoefficients::default_for(4);
        assert_eq!(c.c_k.len(), 5);
        assert!(c.c_k.iter().all(|&x| (x - 0.05).abs() < 1e-15));
        assert_eq!(c.c_main, 0.75);
        c.validate().unwrap();
    }

    #[test]
    fn combined_loss_cases() {
        let main_only = combined_loss(2.5, &[9.0, 9.0], &LossCoefficients::main_only(2)).unwrap();
        assert_eq!(main_only.combined, 2.5);
        let c = LossCoefficients::default_for(4);
        let same = combined_loss(1.3, &[1.3; 5], &c).unwrap();
        assert!((same.combined - 1.3).abs() < 1e-12);
        let bad = LossCoefficients {
            c_main: 0.7,
            c_k: vec![0.05; 5],
        };
        assert!(combined_loss(1.0, &[1.0; 5], &bad).is_err());
    }
}
