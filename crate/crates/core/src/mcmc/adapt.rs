use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use super::hmc::{hmc_step, leapfrog, ChainState};
use super::{KernelConfig, LogDensity};
use crate::rng::StreamRng;
use crate::Result;

/// Nesterov dual averaging of log step size.
#[derive(Debug, Clone)]
pub struct DualAveraging {
    mu: f64,
    h_bar: f64,
    log_eps: f64,
    log_eps_bar: f64,
    t: f64,
    gamma: f64,
    t0: f64,
    kappa: f64,
    delta: f64,
}

impl DualAveraging {
    pub fn new(eps: f64, cfg: &KernelConfig) -> Self {
        DualAveraging {
            mu: (10.0 * eps).ln(),
            h_bar: 0.0,
            log_eps: eps.ln(),
            log_eps_bar: 0.0,
            t: 0.0,
            gamma: cfg.da_gamma,
            t0: cfg.da_t0,
            kappa: cfg.da_kappa,
            delta: cfg.target_accept,
        }
    }

    pub fn restart(&mut self, eps: f64) {
        self.mu = (10.0 * eps).ln();
        self.h_bar = 0.0;
        self.log_eps = eps.ln();
        self.log_eps_bar = 0.0;
        self.t = 0.0;
    }

    /// Feeds one acceptance probability and returns the next step size.
    pub fn update(&mut self, accept_prob: f64) -> f64 {
        self.t += 1.0;
        let w = 1.0 / (self.t + self.t0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.delta - accept_prob);
        self.log_eps = self.mu - self.t.sqrt() / self.gamma * self.h_bar;
        let eta = self.t.powf(-self.kappa);
        self.log_eps_bar = eta * self.log_eps + (1.0 - eta) * self.log_eps_bar;
        self.log_eps.exp()
    }

    pub fn current(&self) -> f64 {
        self.log_eps.exp()
    }

    /// Averaged step size, used after adaptation ends.
    pub fn averaged(&self) -> f64 {
        if self.t == 0.0 {
            self.current()
        } else {
            self.log_eps_bar.exp()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    /// Post-warmup positions (unconstrained scale).
    pub draws: Vec<Vec<f64>>,
    pub log_densities: Vec<f64>,
    pub step_size: f64,
    pub inv_mass: Vec<f64>,
    /// Mean Metropolis acceptance probability after warmup.
    pub accept_rate: f64,
    pub divergences: usize,
    pub warmup_divergences: usize,
}

/// End indices (exclusive) of the slow windows, plus the first index of
/// the terminal buffer.
fn slow_windows(n_warmup: usize) -> (usize, Vec<usize>) {
    if n_warmup < 20 {
        return (n_warmup, Vec::new());
    }
    let (init, term) = if n_warmup < 150 {
        ((0.15 * n_warmup as f64) as usize, (0.1 * n_warmup as f64) as usize)
    } else {
        (75, 50)
    };
    let slow_end = n_warmup - term;
    let mut ends = Vec::new();
    let mut start = init;
    let mut size = if n_warmup < 150 { slow_end - init } else { 25 };
    while start < slow_end {
        let mut end = start + size;
        // Stretch the last window rather than leave a short one.
        if end + 2 * size > slow_end {
            end = slow_end;
        }
        ends.push(end);
        start = end;
        size *= 2;
    }
    (slow_end, ends)
}

fn initial_step_size<T: LogDensity + ?Sized>(
    state: &ChainState,
    target: &T,
    eps0: f64,
    inv_mass: &[f64],
    rng: &mut StreamRng,
) -> f64 {
    let mut eps = eps0;
    let d = state.x.len();
    let trial = |eps: f64, rng: &mut StreamRng| -> f64 {
        let mut p: Vec<f64> = (0..d)
            .map(|i| rng.sample::<f64, _>(StandardNormal) / inv_mass[i].sqrt())
            .collect();
        let k0: f64 = 0.5 * p.iter().zip(inv_mass).map(|(p, m)| p * p * m).sum::<f64>();
        let mut x = state.x.clone();
        let mut g = state.grad.clone();
        match leapfrog(target, &mut x, &mut p, &mut g, eps, inv_mass, 1) {
            Some(lp) => {
                let k1: f64 = 0.5 * p.iter().zip(inv_mass).map(|(p, m)| p * p * m).sum::<f64>();
                let log_ratio = lp - k1 - (state.log_density - k0);
                if log_ratio.is_finite() {
                    log_ratio
                } else {
                    f64::NEG_INFINITY
                }
            }
            None => f64::NEG_INFINITY,
        }
    };
    let half = 0.5f64.ln();
    let up = trial(eps, rng) > half;
    for _ in 0..60 {
        let next = if up { eps * 2.0 } else { eps * 0.5 };
        let lr = trial(next, rng);
        if up && lr <= half {
            break;
        }
        eps = next;
        if !up && lr > half {
            break;
        }
    }
    eps
}

/// Warmup plus sampling for a single chain. The chain is deterministic
/// given `seed`.
pub fn run_chain<T: LogDensity + ?Sized>(
    init: Vec<f64>,
    target: &T,
    cfg: &KernelConfig,
    n_warmup: usize,
    n_samples: usize,
    seed: u64,
) -> Result<ChainOutput> {
    cfg.validate()?;
    let d = target.dim();
    let mut rng = StreamRng::seed_from_u64(seed);
    let mut state = ChainState::new(target, init)?;
    let mut inv_mass = cfg.inv_mass.clone().unwrap_or_else(|| vec![1.0; d]);
    let mut eps = cfg.step_size;
    let mut warmup_divergences = 0;

    if n_warmup > 0 {
        eps = initial_step_size(&state, target, eps, &inv_mass, &mut rng);
        let mut da = DualAveraging::new(eps, cfg);
        let (slow_end, ends) = if cfg.adapt_mass { slow_windows(n_warmup) } else { (n_warmup, Vec::new()) };
        let mut window = 0;
        let mut mean = vec![0.0; d];
        let mut m2 = vec![0.0; d];
        let mut count = 0.0;
        let first_slow = if ends.is_empty() { usize::MAX } else { initial_buffer(n_warmup) };
        for it in 0..n_warmup {
            let info = hmc_step(&mut state, target, eps, cfg.n_leapfrog, &inv_mass, cfg.max_energy_error, &mut rng);
            warmup_divergences += info.divergent as usize;
            eps = da.update(info.accept_prob);
            if window < ends.len() && it >= first_slow && it < slow_end {
                count += 1.0;
                for i in 0..d {
                    let delta = state.x[i] - mean[i];
                    mean[i] += delta / count;
                    m2[i] += delta * (state.x[i] - mean[i]);
                }
                if it + 1 == ends[window] {
                    if count > 2.0 {
                        for i in 0..d {
                            let var = m2[i] / (count - 1.0);
                            let reg = (count / (count + 5.0)) * var + 1e-3 * (5.0 / (count + 5.0));
                            inv_mass[i] = reg;
                        }
                        eps = initial_step_size(&state, target, eps, &inv_mass, &mut rng);
                        da.restart(eps);
                    }
                    mean.iter_mut().for_each(|v| *v = 0.0);
                    m2.iter_mut().for_each(|v| *v = 0.0);
                    count = 0.0;
                    window += 1;
                }
            }
        }
        eps = da.averaged();
    }

    state.n_proposed = 0;
    state.n_accepted = 0;
    let mut draws = Vec::with_capacity(n_samples);
    let mut log_densities = Vec::with_capacity(n_samples);
    let mut accept_sum = 0.0;
    let mut divergences = 0;
    for _ in 0..n_samples {
        let u: f64 = rng.random_range(-1.0..=1.0);
        let step = eps * (1.0 + cfg.step_jitter * u);
        let info = hmc_step(&mut state, target, step, cfg.n_leapfrog, &inv_mass, cfg.max_energy_error, &mut rng);
        accept_sum += info.accept_prob;
        divergences += info.divergent as usize;
        draws.push(state.x.clone());
        log_densities.push(state.log_density);
    }
    Ok(ChainOutput {
        draws,
        log_densities,
        step_size: eps,
        inv_mass,
        accept_rate: if n_samples == 0 { 0.0 } else { accept_sum / n_samples as f64 },
        divergences,
        warmup_divergences,
    })
}

fn initial_buffer(n_warmup: usize) -> usize {
    if n_warmup < 150 {
        (0.15 * n_warmup as f64) as usize
    } else {
        75
    }
}
