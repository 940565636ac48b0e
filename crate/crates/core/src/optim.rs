//! Momentum SGD on unit-normalized, multi-batch gradients.
//!
//! Each iteration sums the gradients of `N` batches, divides the sum by its
//! Euclidean norm, and applies
//!
//! ```text
//! v ← μ·v − α·g/‖g‖
//! θ ← θ + v
//! ```
//!
//! so the step length never depends on the gradient magnitude. The learning
//! rate is adapted from the loss curve: every `F` iterations the mean loss of
//! the last `F/2` iterations is compared with the mean of the `F/2` before
//! them. If it did not drop below `d_loss` times the earlier mean, `α` is
//! halved (floored at `α_min`); two such insufficient decreases in a row
//! double `F`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub momentum: f64,
    /// Batches whose gradients are summed per iteration (`N`).
    pub batches_per_iteration: usize,
    pub alpha_init: f64,
    pub alpha_min: f64,
    /// Schedule window `F`, in iterations. Must be even.
    pub window: usize,
    /// Required relative decrease `d_loss` ∈ (0, 1).
    pub d_loss: f64,
    /// Training length in iterations.
    pub iterations: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            momentum: 0.9,
            batches_per_iteration: 10,
            alpha_init: 0.25,
            alpha_min: 0.001,
            window: 200,
            d_loss: 0.98,
            iterations: 2000,
        }
    }
}

impl OptimizerConfig {
    /// Defaults for slice networks (`N = 10`).
    pub fn planar() -> Self {
        Self::default()
    }

    /// Defaults for patch networks (`N = 5`).
    pub fn volumetric() -> Self {
        OptimizerConfig {
            batches_per_iteration: 5,
            iterations: 1000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.batches_per_iteration == 0 {
            return fail("batches_per_iteration must be >= 1".into());
        }
        if !(self.alpha_min > 0.0 && self.alpha_min <= self.alpha_init) {
            return fail(format!(
                "need 0 < alpha_min <= alpha_init, got {} and {}",
                self.alpha_min, self.alpha_init
            ));
        }
        if self.window < 2 || self.window % 2 != 0 {
            return fail(format!("window F must be even and >= 2, got {}", self.window));
        }
        if !(self.d_loss > 0.0 && self.d_loss < 1.0) {
            return fail(format!("d_loss {} outside (0, 1)", self.d_loss));
        }
        Ok(())
    }
}

/// What [`NormSgd::step`] did.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// The gradient had zero norm; parameters and velocity are unchanged.
    SkippedZeroGradient,
}

/// What [`NormSgd::schedule_update`] did.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleEvent {
    /// No comparison was due this iteration.
    Waiting,
    SufficientDecrease,
    /// Learning rate halved (possibly clamped at the floor).
    Halved,
    /// Second insufficient decrease in a row: halved and window doubled.
    HalvedAndWidened,
}

/// Optimizer state: velocity, learning rate and schedule bookkeeping.
#[derive(Clone, Debug)]
pub struct NormSgd<T> {
    config: OptimizerConfig,
    velocity: Vec<T>,
    alpha: f64,
    window: usize,
    history: VecDeque<f64>,
    since_check: usize,
    consecutive_insufficient: u8,
}

impl<T: Scalar> NormSgd<T> {
    pub fn new(config: OptimizerConfig, parameters: usize) -> Result<Self> {
        config.validate()?;
        Ok(NormSgd {
            velocity: vec![T::zero(); parameters],
            alpha: config.alpha_init,
            window: config.window,
            history: VecDeque::with_capacity(config.window),
            since_check: 0,
            consecutive_insufficient: 0,
            config,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn velocity(&self) -> &[T] {
        &self.velocity
    }

    pub fn consecutive_insufficient(&self) -> u8 {
        self.consecutive_insufficient
    }

    /// Apply one update to `params` from the (summed) `gradient`.
    pub fn step(&mut self, gradient: &[T], params: &mut [T]) -> Result<StepOutcome> {
        if gradient.len() != self.velocity.len() || params.len() != self.velocity.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer sized for {} parameters, got gradient {} / params {}",
                self.velocity.len(),
                gradient.len(),
                params.len()
            )));
        }
        let norm = gradient
            .iter()
            .map(|g| {
                let g = g.to_f64_lossy();
                g * g
            })
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFiniteGradient { batch: 0 });
        }
        if norm == 0.0 {
            log::warn!("zero gradient norm; update skipped");
            return Ok(StepOutcome::SkippedZeroGradient);
        }
        let mu = T::of(self.config.momentum);
        let scale = T::of(self.alpha / norm);
        for ((v, &g), p) in self.velocity.iter_mut().zip(gradient).zip(params.iter_mut()) {
            *v = mu * *v - scale * g;
            *p += *v;
        }
        Ok(StepOutcome::Applied)
    }

    /// Record one iteration's loss and adapt `α` / `F` when a window closes.
    pub fn schedule_update(&mut self, iteration_loss: f64) -> ScheduleEvent {
        self.history.push_back(iteration_loss);
        while self.history.len() > self.window {
            self.history.pop_front();
        }
        self.since_check += 1;
        if self.since_check < self.window || self.history.len() < self.window {
            return ScheduleEvent::Waiting;
        }
        self.since_check = 0;
        let half = self.window / 2;
        let n = self.history.len();
        let mean = |it: std::collections::vec_deque::Iter<'_, f64>| it.sum::<f64>() / half as f64;
        let current = mean(self.history.range(n - half..));
        let previous = mean(self.history.range(n - 2 * half..n - half));
        if current > self.config.d_loss * previous {
            self.alpha = (self.alpha / 2.0).max(self.config.alpha_min);
            if self.consecutive_insufficient == 1 {
                self.consecutive_insufficient = 0;
                self.window *= 2;
                ScheduleEvent::HalvedAndWidened
            } else {
                self.consecutive_insufficient = 1;
                ScheduleEvent::Halved
            }
        } else {
            self.consecutive_insufficient = 0;
            ScheduleEvent::SufficientDecrease
        }
    }
}

/// Summed loss and gradient over the batches of one iteration.
#[derive(Clone, Debug)]
pub struct Accumulated<T> {
    pub loss: f64,
    pub gradient: Vec<T>,
}

/// `Σ_b ∇Loss_b`, evaluated in batch order.
///
/// `loss_and_gradient` returns one batch's loss and flat gradient.
pub fn accumulate_gradient<T: Scalar, B>(
    batches: &[B],
    mut loss_and_gradient: impl FnMut(&B) -> Result<(f64, Vec<T>)>,
) -> Result<Accumulated<T>> {
    let mut total: Option<Vec<T>> = None;
    let mut loss = 0.0;
    for (i, batch) in batches.iter().enumerate() {
        let (l, g) = loss_and_gradient(batch)?;
        if !l.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient { batch: i });
        }
        loss += l;
        match &mut total {
            None => total = Some(g),
            Some(acc) => {
                if acc.len() != g.len() {
                    return Err(Error::InvalidArgument(format!(
                        "batch {i} gradient has {} entries, expected {}",
                        g.len(),
                        acc.len()
                    )));
                }
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }
    let gradient = total.ok_or_else(|| Error::InvalidArgument("no batches to accumulate".into()))?;
    Ok(Accumulated { loss, gradient })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(momentum: f64, window: usize) -> OptimizerConfig {
        OptimizerConfig {
            momentum,
            window,
            ..OptimizerConfig::default()
        }
    }

    #[test]
    fn paper_defaults() {
        let c = OptimizerConfig::planar();
        assert_eq!(
            (c.alpha_init, c.alpha_min, c.window, c.d_loss, c.batches_per_iteration),
            (0.25, 0.001, 200, 0.98, 10)
        );
        assert_eq!(OptimizerConfig::volumetric().batches_per_iteration, 5);
    }

    #[test]
    fn momentum_unrolls_as_expected() {
        // same unit direction u twice: v1 = -αu, v2 = 0.9·v1 - αu = -1.9αu
        let mut opt = NormSgd::<f64>::new(config(0.9, 200), 2).unwrap();
        let mut p = vec![0.0, 0.0];
        let g = vec![3.0, 4.0];
        opt.step(&g, &mut p).unwrap();
        opt.step(&g, &mut p).unwrap();
        let u = [0.6, 0.8];
        for i in 0..2 {
            assert!((opt.velocity()[i] + 1.9 * 0.25 * u[i]).abs() < 1e-15);
            assert!((p[i] + 2.9 * 0.25 * u[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_is_skipped() {
        let mut opt = NormSgd::<f32>::new(config(0.9, 200), 3).unwrap();
        let mut p = vec![1.0, 2.0, 3.0];
        let out = opt.step(&[0.0; 3], &mut p).unwrap();
        assert_eq!(out, StepOutcome::SkippedZeroGradient);
        assert_eq!(p, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn geometric_decrease_never_changes_alpha() {
        let mut opt = NormSgd::<f64>::new(config(0.9, 4), 1).unwrap();
        for i in 0..40 {
            opt.schedule_update(0.5f64.powi(i));
        }
        assert_eq!(opt.alpha(), 0.25);
        assert_eq!(opt.window(), 4);
    }

    #[test]
    fn alpha_is_floored() {
        let mut opt = NormSgd::<f64>::new(
            OptimizerConfig {
                alpha_init: 0.001,
                ..config(0.9, 2)
            },
            1,
        )
        .unwrap();
        for _ in 0..10 {
            opt.schedule_update(1.0);
        }
        assert_eq!(opt.alpha(), 0.001);
    }

    #[test]
    fn invalid_configs() {
        assert!(config(1.0, 200).validate().is_err());
        assert!(config(0.9, 3).validate().is_err());
        let c = OptimizerConfig {
            d_loss: 1.0,
            ..OptimizerConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn accumulate_reports_bad_batch() {
        let batches = [1.0f64, f64::NAN, 2.0];
        let r = accumulate_gradient(&batches, |&b| Ok((b, vec![b])));
        assert!(matches!(r, Err(Error::NonFiniteGradient { batch: 1 })));
    }
}
