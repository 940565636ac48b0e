use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with statistics of the current batch.
    Train,
    /// Normalize with running statistics.
    Infer,
}

/// Running per-channel statistics used in inference mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    /// `running <- momentum * running + (1 - momentum) * batch`.
    pub fn update(&mut self, batch: &BatchStats<T>, momentum: f64) {
        let (m, r) = (T::of(momentum), T::of(1.0 - momentum));
        for (s, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *s = m * *s + r * b;
        }
        for (s, &b) in self.var.iter_mut().zip(&batch.var) {
            *s = m * *s + r * b;
        }
    }
}

/// Per-channel statistics of one batch (biased variance).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Forward output plus what the backward pass needs.
#[derive(Clone, Debug)]
pub struct Normalized<T> {
    pub output: Tensor<T>,
    pub x_hat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub stats: Option<BatchStats<T>>,
}

fn plane_iter<T: Scalar>(x: &Tensor<T>) -> (usize, usize, usize) {
    (x.batch(), x.channels(), x.spatial().iter().product())
}

fn check<T: Scalar>(input: &Tensor<T>, gamma: &[T], beta: &[T]) -> Result<()> {
    if input.shape().len() < 3 {
        return Err(Error::invalid_shape("batchnorm", "need [batch, channel, spatial...]"));
    }
    if gamma.len() != input.channels() || beta.len() != input.channels() {
        return Err(Error::shape("batchnorm", input.shape(), &[gamma.len(), beta.len()]));
    }
    Ok(())
}

/// Per-channel normalization over batch and spatial axes.
pub fn batchnorm_forward<T: Scalar>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mode: NormMode,
    running: &RunningStats<T>,
) -> Result<Normalized<T>> {
    check(input, gamma, beta)?;
    let (b, c, plane) = plane_iter(input);
    let eps = T::of(BATCHNORM_EPS);
    let x = input.data();
    let (mean, var) = match mode {
        NormMode::Train => {
            let count = T::of((b * plane) as f64);
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for n in 0..b {
                    let off = (n * c + ch) * plane;
                    s += x[off..off + plane].iter().copied().sum::<T>();
                }
                let mu = s / count;
                let mut v = T::zero();
                for n in 0..b {
                    let off = (n * c + ch) * plane;
                    v += x[off..off + plane].iter().map(|&e| (e - mu) * (e - mu)).sum::<T>();
                }
                mean[ch] = mu;
                var[ch] = v / count;
            }
            (mean, var)
        }
        NormMode::Infer => (running.mean.clone(), running.var.clone()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut x_hat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for n in 0..b {
        for ch in 0..c {
            let off = (n * c + ch) * plane;
            for i in off..off + plane {
                let h = (x[i] - mean[ch]) * inv_std[ch];
                x_hat[i] = h;
                out[i] = gamma[ch] * h + beta[ch];
            }
        }
    }
    Ok(Normalized {
        output: Tensor::new(input.shape().to_vec(), out)?.ensure_finite("batchnorm")?,
        x_hat: Tensor::new(input.shape().to_vec(), x_hat)?,
        inv_std,
        stats: (mode == NormMode::Train).then_some(BatchStats { mean, var }),
    })
}

/// Convenience form that also folds the batch statistics into `running`
/// when in training mode.
pub fn batchnorm<T: Scalar>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running: &mut RunningStats<T>,
    mode: NormMode,
    momentum: f64,
) -> Result<Tensor<T>> {
    let n = batchnorm_forward(input, gamma, beta, mode, running)?;
    if let Some(stats) = &n.stats {
        running.update(stats, momentum);
    }
    Ok(n.output)
}

/// Gradients with respect to input, gamma and beta.
///
/// `x_hat` and `inv_std` are the values saved by [`batchnorm_forward`].
pub fn batchnorm_backward<T: Scalar>(
    x_hat: &Tensor<T>,
    inv_std: &[T],
    gamma: &[T],
    mode: NormMode,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    if grad_out.shape() != x_hat.shape() {
        return Err(Error::shape("batchnorm backward", grad_out.shape(), x_hat.shape()));
    }
    let (b, c, plane) = plane_iter(grad_out);
    let dy = grad_out.data();
    let xh = x_hat.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for n in 0..b {
        for ch in 0..c {
            let off = (n * c + ch) * plane;
            for i in off..off + plane {
                dbeta[ch] += dy[i];
                dgamma[ch] += dy[i] * xh[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    let count = T::of((b * plane) as f64);
    for n in 0..b {
        for ch in 0..c {
            let off = (n * c + ch) * plane;
            let scale = gamma[ch] * inv_std[ch];
            for i in off..off + plane {
                dx[i] = match mode {
                    NormMode::Train => scale * (dy[i] - dbeta[ch] / count - xh[i] * dgamma[ch] / count),
                    NormMode::Infer => scale * dy[i],
                };
            }
        }
    }
    Ok((
        Tensor::new(grad_out.shape().to_vec(), dx)?.ensure_finite("batchnorm backward")?,
        dgamma,
        dbeta,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_mode_standardizes_each_channel() {
        let x = Tensor::from_fn(&[2, 3, 4, 5], |i| ((i * 37) % 17) as f64 * 3.0 - 20.0);
        let ones = vec![1.0; 3];
        let zeros = vec![0.0; 3];
        let n = batchnorm_forward(&x, &ones, &zeros, NormMode::Train, &RunningStats::new(3)).unwrap();
        let plane = 20;
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|b| n.output.data()[(b * 3 + ch) * plane..(b * 3 + ch + 1) * plane].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-5, "variance {v}");
        }
    }

    #[test]
    fn infer_mode_with_unit_running_stats_is_near_identity() {
        let x = Tensor::from_fn(&[1, 2, 3, 3], |i| i as f64 - 4.0);
        let y = batchnorm_forward(&x, &[1.0, 1.0], &[0.0, 0.0], NormMode::Infer, &RunningStats::new(2))
            .unwrap()
            .output;
        let tol = 10.0 * BATCHNORM_EPS;
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= tol * b.abs().max(1.0));
        }
    }

    #[test]
    fn zero_variance_channel_stays_finite() {
        let x = Tensor::full(&[1, 1, 4, 4], 5.0f32);
        let y = batchnorm_forward(&x, &[1.0], &[0.0], NormMode::Train, &RunningStats::new(1)).unwrap();
        assert!(y.output.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut running = RunningStats::<f64>::new(1);
        let x = Tensor::new(vec![1, 1, 2, 1], vec![1.0, 3.0]).unwrap();
        batchnorm(&x, &[1.0], &[0.0], &mut running, NormMode::Train, 0.9).unwrap();
        assert!((running.mean[0] - 0.2).abs() < 1e-12);
        assert!((running.var[0] - (0.9 + 0.1 * 1.0)).abs() < 1e-12);
    }
}
