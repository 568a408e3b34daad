use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use super::{KernelConfig, LogDensity};
use crate::rng::StreamRng;
use crate::{Error, Result};

/// Current position with cached log-density and gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub x: Vec<f64>,
    pub log_density: f64,
    pub grad: Vec<f64>,
    pub n_proposed: u64,
    pub n_accepted: u64,
    pub n_divergent: u64,
}

impl ChainState {
    pub fn new<T: LogDensity + ?Sized>(target: &T, x: Vec<f64>) -> Result<Self> {
        let mut grad = vec![0.0; target.dim()];
        let log_density = target.log_density_grad(&x, &mut grad);
        if !log_density.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteInit);
        }
        Ok(ChainState {
            x,
            log_density,
            grad,
            n_proposed: 0,
            n_accepted: 0,
            n_divergent: 0,
        })
    }

    pub fn accept_rate(&self) -> f64 {
        if self.n_proposed == 0 {
            0.0
        } else {
            self.n_accepted as f64 / self.n_proposed as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub accepted: bool,
    pub divergent: bool,
    /// Metropolis acceptance probability (0 for divergent trajectories).
    pub accept_prob: f64,
}

/// Runs `n` leapfrog steps in place. Returns the final log-density, or
/// `None` as soon as the trajectory leaves the region where the target is
/// finite.
pub fn leapfrog<T: LogDensity + ?Sized>(
    target: &T,
    x: &mut [f64],
    p: &mut [f64],
    grad: &mut [f64],
    eps: f64,
    inv_mass: &[f64],
    n: usize,
) -> Option<f64> {
    let d = x.len();
    let mut lp = f64::NAN;
    for _ in 0..n {
        for i in 0..d {
            p[i] += 0.5 * eps * grad[i];
            x[i] += eps * inv_mass[i] * p[i];
        }
        lp = target.log_density_grad(x, grad);
        if !lp.is_finite() {
            return None;
        }
        for i in 0..d {
            p[i] += 0.5 * eps * grad[i];
        }
    }
    Some(lp)
}

fn kinetic(p: &[f64], inv_mass: &[f64]) -> f64 {
    0.5 * p.iter().zip(inv_mass).map(|(p, m)| p * p * m).sum::<f64>()
}

/// One HMC transition with momentum refreshment and Metropolis correction.
pub fn hmc_step<T: LogDensity + ?Sized, R: Rng + ?Sized>(
    state: &mut ChainState,
    target: &T,
    eps: f64,
    n_leapfrog: usize,
    inv_mass: &[f64],
    max_energy_error: f64,
    rng: &mut R,
) -> StepInfo {
    let d = state.x.len();
    let mut p: Vec<f64> = (0..d)
        .map(|i| rng.sample::<f64, _>(StandardNormal) / inv_mass[i].sqrt())
        .collect();
    let h0 = -state.log_density + kinetic(&p, inv_mass);
    let mut x = state.x.clone();
    let mut grad = state.grad.clone();
    state.n_proposed += 1;
    let end = leapfrog(target, &mut x, &mut p, &mut grad, eps, inv_mass, n_leapfrog);
    let u: f64 = rng.random();
    let Some(lp) = end else {
        state.n_divergent += 1;
        return StepInfo {
            accepted: false,
            divergent: true,
            accept_prob: 0.0,
        };
    };
    let h1 = -lp + kinetic(&p, inv_mass);
    let delta = h1 - h0;
    if !delta.is_finite() || delta > max_energy_error {
        state.n_divergent += 1;
        return StepInfo {
            accepted: false,
            divergent: true,
            accept_prob: 0.0,
        };
    }
    let accept_prob = (-delta).exp().min(1.0);
    let accepted = u < accept_prob;
    if accepted {
        state.x = x;
        state.grad = grad;
        state.log_density = lp;
        state.n_accepted += 1;
    }
    StepInfo {
        accepted,
        divergent: false,
        accept_prob,
    }
}

/// [`hmc_step`] with its own generator seeded from `seed`.
pub fn hmc_step_seeded<T: LogDensity + ?Sized>(state: &mut ChainState, target: &T, cfg: &KernelConfig, seed: u64) -> StepInfo {
    let mut rng = StreamRng::seed_from_u64(seed);
    let ones;
    let inv_mass = match &cfg.inv_mass {
        Some(m) => m.as_slice(),
        None => {
            ones = vec![1.0; state.x.len()];
            ones.as_slice()
        }
    };
    hmc_step(state, target, cfg.step_size, cfg.n_leapfrog, inv_mass, cfg.max_energy_error, &mut rng)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct JitterStats {
    pub proposed: usize,
    pub accepted: usize,
    pub divergent: usize,
    /// Sum of acceptance probabilities, for step-size feedback.
    pub accept_prob_sum: f64,
}

impl JitterStats {
    pub fn merge(&mut self, other: &JitterStats) {
        self.proposed += other.proposed;
        self.accepted += other.accepted;
        self.divergent += other.divergent;
        self.accept_prob_sum += other.accept_prob_sum;
    }

    pub fn mean_accept_prob(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accept_prob_sum / self.proposed as f64
        }
    }
}

/// Runs `n_steps` kernel transitions from `x` and leaves the final state
/// in `x`. With `n_steps = 0` the position is returned untouched.
pub fn jitter<T: LogDensity + ?Sized, R: Rng + ?Sized>(
    x: &mut Vec<f64>,
    target: &T,
    eps: f64,
    n_leapfrog: usize,
    inv_mass: &[f64],
    n_steps: usize,
    rng: &mut R,
) -> Result<JitterStats> {
    let mut stats = JitterStats::default();
    if n_steps == 0 {
        return Ok(stats);
    }
    let mut state = ChainState::new(target, std::mem::take(x))?;
    for _ in 0..n_steps {
        let info = hmc_step(&mut state, target, eps, n_leapfrog, inv_mass, 1000.0, rng);
        stats.proposed += 1;
        stats.accepted += info.accepted as usize;
        stats.divergent += info.divergent as usize;
        stats.accept_prob_sum += info.accept_prob;
    }
    *x = state.x;
    Ok(stats)
}
