//! Likelihood-free intent inference: classic rejection sampling over a
//! continuous prior, and the cached grid evaluation used at interactive rates.

mod grid;
mod posterior;
mod reject;

pub use grid::{build_cache, evaluate, grid_posterior, prior_densities, GridSpec, InferenceGrid, TrajectoryCache};
pub use posterior::{decision_summary, read_ipos, write_ipos, PosteriorEstimate, PosteriorJson};
pub use reject::{abc_reject, infer_reject, RejectOutcome};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::similarity::Window;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    /// Keep a candidate iff its loss is below `epsilon` (m²).
    Indicator,
    /// Weight `exp(-L / (2 epsilon²))` with `epsilon` a bandwidth in metres.
    Gaussian,
}

pub const DEFAULT_INDICATOR_EPSILON: f64 = 0.02;
pub const DEFAULT_GAUSSIAN_BANDWIDTH: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub epsilon: f64,
    pub n_samples: usize,
    pub window: Window,
    pub kernel: Kernel,
    pub max_draws: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_GAUSSIAN_BANDWIDTH,
            n_samples: 1000,
            window: Window::default(),
            kernel: Kernel::Gaussian,
            max_draws: 100_000,
        }
    }
}

impl InferenceConfig {
    pub fn indicator(epsilon: f64) -> Self {
        Self {
            epsilon,
            kernel: Kernel::Indicator,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Parameter(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.n_samples == 0 || self.max_draws < self.n_samples {
            return Err(Error::Parameter(format!(
                "need 1 <= n_samples <= max_draws, got {} and {}",
                self.n_samples, self.max_draws
            )));
        }
        Ok(())
    }
}

/// Windowed MSE over the last `w` observed points, both sequences indexed from
/// onset. Past the end of the generated trajectory the hand is taken to rest
/// at its final point.
pub(crate) fn held_mse(observed: &[Vector3<f64>], generated: &[Vector3<f64>], w: usize) -> f64 {
    let t = observed.len() - 1;
    let start = (t + 1).saturating_sub(w);
    let last = generated.len() - 1;
    let sum: f64 = (start..=t).map(|i| (observed[i] - generated[i.min(last)]).norm_squared()).sum();
    sum / (t + 1 - start) as f64
}

/// Log of the kernel value for a loss `l`.
#[inline]
pub fn log_kernel(kernel: Kernel, epsilon: f64, l: f64) -> f64 {
    match kernel {
        Kernel::Indicator => {
            if l < epsilon {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        }
        Kernel::Gaussian => -l / (2.0 * epsilon * epsilon),
    }
}

/// Normalized `prior · K(loss)` weights, computed in the log domain.
///
/// Returns the weights and whether the evidence was degenerate (every
/// candidate had zero kernel weight), in which case the normalized prior is
/// returned instead.
pub fn kernel_weights(prior: &[f64], losses: &[f64], kernel: Kernel, epsilon: f64) -> (Vec<f64>, bool) {
    debug_assert_eq!(prior.len(), losses.len());
    let logs: Vec<f64> = prior
        .iter()
        .zip(losses)
        .map(|(&p, &l)| if p > 0.0 { p.ln() + log_kernel(kernel, epsilon, l) } else { f64::NEG_INFINITY })
        .collect();
    match normalize_log(&logs) {
        Some(w) => (w, false),
        None => (normalize_or_uniform(prior), true),
    }
}

fn normalize_log(logs: &[f64]) -> Option<Vec<f64>> {
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let mut w: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    Some(w)
}

fn normalize_or_uniform(values: &[f64]) -> Vec<f64> {
    let total: f64 = values.iter().filter(|v| **v > 0.0).sum();
    if total > 0.0 && total.is_finite() {
        values.iter().map(|&v| v.max(0.0) / total).collect()
    } else {
        vec![1.0 / values.len() as f64; values.len()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_kernel_returns_prior() {
        let prior = [0.1, 0.2, 0.3, 0.4];
        let losses = [0.0, 1.0, 0.5, 2.0];
        let (w, degenerate) = kernel_weights(&prior, &losses, Kernel::Gaussian, 1e6);
        assert!(!degenerate);
        for (a, b) in w.iter().zip(&prior) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn indicator_with_nothing_accepted_falls_back() {
        let prior = [1.0, 3.0];
        let (w, degenerate) = kernel_weights(&prior, &[1.0, 1.0], Kernel::Indicator, 0.5);
        assert!(degenerate);
        assert_eq!(w, vec![0.25, 0.75]);
        let (w, degenerate) = kernel_weights(&[0.0, 0.0], &[1.0, 1.0], Kernel::Indicator, 0.5);
        assert!(degenerate);
        assert_eq!(w, vec![0.5, 0.5]);
    }

    #[test]
    fn sharp_gaussian_does_not_underflow() {
        let (w, degenerate) = kernel_weights(&[0.5, 0.5], &[10.0, 10.5], Kernel::Gaussian, 0.01);
        assert!(!degenerate);
        assert_eq!(w[0], 1.0);
        assert_eq!(w[1], 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(InferenceConfig::default().validate().is_ok());
        assert!(InferenceConfig::indicator(0.0).validate().is_err());
        let bad = InferenceConfig {
            max_draws: 10,
            n_samples: 11,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
