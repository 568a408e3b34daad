//! Fixed-length leapfrog HMC with a diagonal metric.
//!
//! Warmup follows the usual windowed scheme: a fast initial buffer that
//! only tunes the step size, a sequence of doubling slow windows whose
//! draw variances set the inverse mass, and a fast terminal buffer.
//! Step sizes are tuned by dual averaging toward `target_accept`.

mod adapt;
mod hmc;

pub use adapt::{run_chain, ChainOutput, DualAveraging};
pub use hmc::{hmc_step, hmc_step_seeded, jitter, leapfrog, ChainState, JitterStats, StepInfo};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Log-density with gradient on ℝ^d.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Returns log π(x) (−∞ outside the support) and overwrites `grad`.
    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;

    fn log_density(&self, x: &[f64]) -> f64 {
        let mut g = vec![0.0; self.dim()];
        self.log_density_grad(x, &mut g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    /// Initial step size; tuned during warmup.
    pub step_size: f64,
    pub n_leapfrog: usize,
    /// Diagonal inverse mass; `None` means identity.
    pub inv_mass: Option<Vec<f64>>,
    /// Warmup iterations that adapt the step size (and mass when long enough).
    pub adapt_steps: usize,
    pub target_accept: f64,
    pub adapt_mass: bool,
    /// Energy error above which a trajectory counts as divergent.
    pub max_energy_error: f64,
    /// Relative uniform jitter of the step size after warmup.
    pub step_jitter: f64,
    pub da_gamma: f64,
    pub da_t0: f64,
    pub da_kappa: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            step_size: 0.1,
            n_leapfrog: 16,
            inv_mass: None,
            adapt_steps: 500,
            target_accept: 0.8,
            adapt_mass: true,
            max_energy_error: 1000.0,
            step_jitter: 0.1,
            da_gamma: 0.05,
            da_t0: 10.0,
            da_kappa: 0.75,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config("step_size must be positive".into()));
        }
        if self.n_leapfrog == 0 {
            return Err(Error::Config("n_leapfrog must be at least 1".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config("target_accept must lie in (0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.step_jitter) {
            return Err(Error::Config("step_jitter must lie in [0, 1)".into()));
        }
        if let Some(m) = &self.inv_mass {
            if m.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::Config("inverse mass entries must be positive".into()));
            }
        }
        Ok(())
    }
}
