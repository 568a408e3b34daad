//! Iterated batch importance sampling over the partial posteriors
//! π(θ | y_1:i), one subject at a time.
//!
//! Each step reweights the particles by the new subject's incremental
//! likelihood (drawing its latent factor from a Laplace proposal where
//! needed), accumulates the evidence, and, when the effective sample size
//! falls below γ, resamples and moves every particle with a few HMC steps
//! on the augmented posterior of everything absorbed so far.
//!
//! Every random draw comes from a stream keyed by (seed, purpose, step,
//! particle), so results do not depend on the number of worker threads.

mod models;

pub use models::{sequential_model, supports_sequential, Increment, LaplaceModel, MarginalModel, NormalMeanModel, SequentialModel};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::{log_sum_exp, weighted_quantile};
use crate::mcda::{summarize_scores, ScoreSummary};
use crate::mcmc::jitter;
use crate::model::Theta;
use crate::rng::{stream, tag};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resampling {
    Multinomial,
    /// Lower-variance alternative; not the default.
    Systematic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmcConfig {
    pub n_particles: usize,
    /// Resample when ESS < `ess_fraction` · N.
    pub ess_fraction: f64,
    pub jitter_steps: usize,
    pub jitter_leapfrog: usize,
    /// Initial jitter step size; adapted from acceptance between rejuvenations.
    pub step_size: f64,
    pub target_accept: f64,
    pub resampling: Resampling,
}

impl Default for SmcConfig {
    fn default() -> Self {
        SmcConfig {
            n_particles: 1000,
            ess_fraction: 0.5,
            jitter_steps: 10,
            jitter_leapfrog: 10,
            step_size: 0.5,
            target_accept: 0.8,
            resampling: Resampling::Multinomial,
        }
    }
}

impl SmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 {
            return Err(Error::Config("n_particles must be at least 1".into()));
        }
        if !(self.ess_fraction > 0.0 && self.ess_fraction <= 1.0) {
            return Err(Error::Config("ess_fraction must lie in (0, 1]".into()));
        }
        if self.jitter_leapfrog == 0 || !(self.step_size > 0.0) {
            return Err(Error::Config("jitter needs a positive step size and at least one leapfrog step".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config("target_accept must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn gamma(&self) -> f64 {
        self.ess_fraction * self.n_particles as f64
    }
}

/// Effective sample size (Σω)² / Σω² of nonnegative weights.
pub fn ess(weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    if s2 == 0.0 {
        0.0
    } else {
        s * s / s2
    }
}

/// ESS of weights given on the log scale.
pub fn ess_log(log_weights: &[f64]) -> f64 {
    let m = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return 0.0;
    }
    let w: Vec<f64> = log_weights.iter().map(|l| (l - m).exp()).collect();
    ess(&w)
}

fn normalized(log_weights: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(log_weights);
    log_weights.iter().map(|l| (l - lse).exp()).collect()
}

/// Ancestor indices drawn from normalised weights `w`.
pub fn resample<R: Rng + ?Sized>(w: &[f64], n: usize, scheme: Resampling, rng: &mut R) -> Vec<usize> {
    let total: f64 = w.iter().sum();
    let mut cum = Vec::with_capacity(w.len());
    let mut acc = 0.0;
    for x in w {
        acc += x / total;
        cum.push(acc);
    }
    let last = w.len() - 1;
    let pick = |u: f64| cum.partition_point(|c| *c <= u).min(last);
    match scheme {
        Resampling::Multinomial => (0..n).map(|_| pick(rng.random::<f64>())).collect(),
        Resampling::Systematic => {
            let u0: f64 = rng.random::<f64>() / n as f64;
            (0..n).map(|i| pick(u0 + i as f64 / n as f64)).collect()
        }
    }
}

/// Weighted particles plus everything absorbed so far.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSystem {
    /// Per particle: unconstrained θ followed by the latent history.
    pub particles: Vec<Vec<f64>>,
    pub log_weights: Vec<f64>,
    /// Per particle, binary linear predictors of every absorbed subject.
    pub eta: Vec<Vec<f64>>,
    /// Absorbed data rows in order.
    pub absorbed: Vec<usize>,
    pub log_evidence: f64,
    pub log_increments: Vec<f64>,
    pub theta_dim: usize,
    pub latent_dim: usize,
    pub step_size: f64,
    pub n_fallbacks: usize,
    pub n_rejuvenations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorSummary {
    pub mean: f64,
    pub q025: f64,
    pub q500: f64,
    pub q975: f64,
}

impl ParticleSystem {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn i(&self) -> usize {
        self.absorbed.len()
    }

    pub fn ess(&self) -> f64 {
        ess_log(&self.log_weights)
    }

    pub fn normalized_weights(&self) -> Vec<f64> {
        normalized(&self.log_weights)
    }

    pub fn theta_x(&self, m: usize) -> &[f64] {
        &self.particles[m][..self.theta_dim]
    }

    /// Self-normalised estimate of E[g] with weighted quantiles.
    pub fn posterior_summary<G: Fn(&[f64]) -> f64>(&self, g: G) -> PosteriorSummary {
        let w = self.normalized_weights();
        let vals: Vec<f64> = self.particles.iter().map(|p| g(p)).collect();
        PosteriorSummary {
            mean: vals.iter().zip(&w).map(|(v, w)| v * w).sum(),
            q025: weighted_quantile(&vals, &w, 0.025),
            q500: weighted_quantile(&vals, &w, 0.5),
            q975: weighted_quantile(&vals, &w, 0.975),
        }
    }
}

/// N particles drawn i.i.d. from the prior, unit weights, no data.
pub fn ibis_init(model: &dyn SequentialModel, n_particles: usize, step_size: f64, seed: u64) -> Result<ParticleSystem> {
    if n_particles == 0 {
        return Err(Error::Config("n_particles must be at least 1".into()));
    }
    let particles = (0..n_particles)
        .into_par_iter()
        .map(|m| model.sample_prior(&mut stream(seed, &[tag::PRIOR, m as u64])))
        .collect::<Result<Vec<_>>>()?;
    Ok(ParticleSystem {
        particles,
        log_weights: vec![0.0; n_particles],
        eta: vec![Vec::new(); n_particles],
        absorbed: Vec::new(),
        log_evidence: 0.0,
        log_increments: Vec::new(),
        theta_dim: model.theta_dim(),
        latent_dim: model.latent_dim(),
        step_size,
        n_fallbacks: 0,
        n_rejuvenations: 0,
    })
}

/// Reweights by the incremental likelihood of data row `row`, appending
/// any latent draw to each particle. Returns log L_i.
pub fn ibis_step(ps: &mut ParticleSystem, model: &dyn SequentialModel, row: usize, seed: u64) -> Result<f64> {
    let step = ps.i() as u64;
    let d = ps.theta_dim;
    let increments = ps
        .particles
        .par_iter()
        .enumerate()
        .map(|(m, x)| model.increment(&x[..d], row, &mut stream(seed, &[tag::PROPOSAL, step, m as u64])))
        .collect::<Result<Vec<_>>>()?;
    let before = log_sum_exp(&ps.log_weights);
    let mut fallbacks = 0;
    for (m, inc) in increments.into_iter().enumerate() {
        ps.log_weights[m] += if inc.log_weight.is_nan() { f64::NEG_INFINITY } else { inc.log_weight };
        ps.particles[m].extend_from_slice(&inc.latent);
        ps.eta[m].extend_from_slice(&inc.eta);
        fallbacks += inc.fallback as usize;
    }
    let after = log_sum_exp(&ps.log_weights);
    if !after.is_finite() {
        return Err(Error::WeightUnderflow { step: ps.i() + 1 });
    }
    let log_l = after - before;
    ps.absorbed.push(row);
    ps.log_evidence += log_l;
    ps.log_increments.push(log_l);
    ps.n_fallbacks += fallbacks;
    // Keep weights near zero on the log scale.
    let max = ps.log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    ps.log_weights.iter_mut().for_each(|l| *l -= max);
    Ok(log_l)
}

/// Outcome of a rejuvenation check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rejuvenation {
    pub happened: bool,
    /// Mean acceptance probability of the jitter moves.
    pub accept_rate: f64,
    pub divergences: usize,
}

/// Resample-and-jitter when the ESS falls below `gamma`.
pub fn maybe_rejuvenate(ps: &mut ParticleSystem, model: &dyn SequentialModel, gamma: f64, cfg: &SmcConfig, seed: u64) -> Result<Rejuvenation> {
    if ps.ess() >= gamma {
        return Ok(Rejuvenation {
            happened: false,
            accept_rate: f64::NAN,
            divergences: 0,
        });
    }
    rejuvenate(ps, model, cfg, seed)
}

/// Unconditional resample-and-jitter.
pub fn rejuvenate(ps: &mut ParticleSystem, model: &dyn SequentialModel, cfg: &SmcConfig, seed: u64) -> Result<Rejuvenation> {
    let step = ps.i() as u64;
    let w = ps.normalized_weights();
    let n = ps.len();
    let dim = ps.particles[0].len();

    // Diagonal metric from the weighted particle spread before resampling.
    let ess_now = ess(&w);
    let mut inv_mass = vec![0.0; dim];
    for c in 0..dim {
        let mean: f64 = ps.particles.iter().zip(&w).map(|(p, w)| p[c] * w).sum();
        let var: f64 = ps.particles.iter().zip(&w).map(|(p, w)| w * (p[c] - mean).powi(2)).sum();
        inv_mass[c] = (ess_now / (ess_now + 5.0)) * var + 1e-3 * (5.0 / (ess_now + 5.0));
    }

    let ancestors = resample(&w, n, cfg.resampling, &mut stream(seed, &[tag::RESAMPLE, step]));
    let particles: Vec<Vec<f64>> = ancestors.iter().map(|&a| ps.particles[a].clone()).collect();
    let eta: Vec<Vec<f64>> = ancestors.iter().map(|&a| ps.eta[a].clone()).collect();
    ps.particles = particles;
    ps.eta = eta;
    ps.log_weights = vec![0.0; n];
    ps.n_rejuvenations += 1;

    if cfg.jitter_steps == 0 {
        return Ok(Rejuvenation {
            happened: true,
            accept_rate: f64::NAN,
            divergences: 0,
        });
    }
    let target = model.jitter_target(&ps.absorbed);
    let eps = ps.step_size;
    let stats = ps
        .particles
        .par_iter_mut()
        .enumerate()
        .map(|(m, x)| {
            let mut rng = stream(seed, &[tag::JITTER, step, m as u64]);
            let before = x.clone();
            match jitter(x, target.as_ref(), eps, cfg.jitter_leapfrog, &inv_mass, cfg.jitter_steps, &mut rng) {
                Ok(s) => s,
                Err(_) => {
                    *x = before;
                    Default::default()
                }
            }
        })
        .collect::<Vec<_>>();
    let mut total = crate::mcmc::JitterStats::default();
    for s in &stats {
        total.merge(s);
    }
    let accept = total.mean_accept_prob();
    // Multiplicative step-size feedback toward the target acceptance.
    ps.step_size = (eps * (2.0 * (accept - cfg.target_accept)).exp()).clamp(1e-4, 5.0);

    // Refresh stored linear predictors from the moved latents.
    if ps.latent_dim > 0 {
        let d = ps.theta_dim;
        let q = ps.latent_dim;
        let rows = ps.absorbed.clone();
        ps.eta = ps
            .particles
            .par_iter()
            .map(|x| {
                rows.iter()
                    .enumerate()
                    .flat_map(|(t, &r)| model.linear_predictor(&x[..d], r, &x[d + t * q..d + (t + 1) * q]))
                    .collect()
            })
            .collect();
    }
    Ok(Rejuvenation {
        happened: true,
        accept_rate: accept,
        divergences: total.divergent,
    })
}

/// One row of the sequential trace.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Number of subjects absorbed (1-based).
    pub i: usize,
    pub row: usize,
    pub group: usize,
    /// ESS after reweighting, before any rejuvenation.
    pub ess: f64,
    pub log_increment: f64,
    pub log_evidence: f64,
    pub rejuvenated: bool,
    pub accept_rate: f64,
    pub fallbacks: usize,
    pub scores: Option<ScoreSummary>,
}

/// Per-particle group scores, used to attach MCDA summaries to the trace.
pub type Scorer<'a> = dyn Fn(&Theta) -> Vec<f64> + Sync + 'a;

pub fn particle_scores(ps: &ParticleSystem, model: &dyn SequentialModel, scorer: &Scorer<'_>) -> Vec<Vec<f64>> {
    let d = ps.theta_dim;
    ps.particles
        .par_iter()
        .map(|x| match model.constrain(&x[..d]) {
            Some(t) => scorer(&t),
            None => Vec::new(),
        })
        .collect()
}

/// Folds IBIS steps (with rejuvenation) over `order`.
pub fn run_sequential(
    model: &dyn SequentialModel,
    order: &[usize],
    cfg: &SmcConfig,
    seed: u64,
    scorer: Option<&Scorer<'_>>,
) -> Result<(ParticleSystem, Vec<StepRecord>)> {
    cfg.validate()?;
    let mut ps = ibis_init(model, cfg.n_particles, cfg.step_size, seed)?;
    let mut trace = Vec::with_capacity(order.len());
    for &row in order {
        let fallbacks_before = ps.n_fallbacks;
        let log_l = ibis_step(&mut ps, model, row, seed)?;
        let ess_now = ps.ess();
        let rj = maybe_rejuvenate(&mut ps, model, cfg.gamma(), cfg, seed)?;
        let scores = scorer.map(|s| summarize_scores(&particle_scores(&ps, model, s), &ps.normalized_weights()));
        trace.push(StepRecord {
            i: ps.i(),
            row,
            group: model.group_of(row),
            ess: ess_now,
            log_increment: log_l,
            log_evidence: ps.log_evidence,
            rejuvenated: rj.happened,
            accept_rate: rj.accept_rate,
            fallbacks: ps.n_fallbacks - fallbacks_before,
            scores,
        });
    }
    Ok((ps, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(n: usize, seed: u64) -> NormalMeanModel {
        NormalMeanModel {
            y: NormalMeanModel::simulate(n, 1.5, 1.0, seed),
            sigma: 1.0,
            prior_mean: 0.0,
            prior_sd: 3.0,
        }
    }

    #[test]
    fn ess_examples() {
        assert_eq!(ess(&[1.0; 100]), 100.0);
        assert_eq!(ess(&[0.0, 0.0, 4.0, 0.0]), 1.0);
        assert!((ess(&[1.0, 2.0, 3.0]) - 36.0 / 14.0).abs() < 1e-12);
        assert!((ess_log(&[0.0, 2f64.ln(), 3f64.ln()]) - 36.0 / 14.0).abs() < 1e-12);
        // Extreme log weights do not overflow.
        assert!((ess_log(&[700.0, 700.0, -700.0]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn init_draws_from_prior() {
        let model = toy(0, 1);
        let ps = ibis_init(&model, 4000, 0.5, 7).unwrap();
        assert_eq!(ps.ess(), 4000.0);
        let mean = ps.particles.iter().map(|p| p[0]).sum::<f64>() / 4000.0;
        assert!(mean.abs() < 4.0 * 3.0 / 4000f64.sqrt());
        assert_eq!(ps, ibis_init(&model, 4000, 0.5, 7).unwrap());
    }

    #[test]
    fn constant_increments_leave_ess() {
        // Every particle at the same mean: all increments equal.
        let model = toy(3, 2);
        let mut ps = ibis_init(&model, 50, 0.5, 1).unwrap();
        for p in &mut ps.particles {
            p[0] = model.y[0];
        }
        ibis_step(&mut ps, &model, 0, 1).unwrap();
        assert!((ps.ess() - 50.0).abs() < 1e-9);
    }

    #[test]
    fn single_particle_matches_sequential_importance_sampling() {
        let model = toy(20, 3);
        let cfg = SmcConfig {
            n_particles: 1,
            jitter_steps: 0,
            ..SmcConfig::default()
        };
        let order: Vec<usize> = (0..20).collect();
        let (ps, trace) = run_sequential(&model, &order, &cfg, 4, None).unwrap();
        let mu = ibis_init(&model, 1, 0.5, 4).unwrap().particles[0][0];
        let oracle: f64 = model.y.iter().map(|y| crate::linalg::normal_lpdf(*y, mu, 1.0)).sum();
        assert!((ps.log_evidence - oracle).abs() < 1e-9);
        let telescoped: f64 = trace.iter().map(|r| r.log_increment).sum();
        assert!((telescoped - ps.log_evidence).abs() < 1e-12);
    }

    #[test]
    fn conjugate_posterior_and_evidence() {
        let model = toy(100, 5);
        let cfg = SmcConfig {
            n_particles: 2000,
            ..SmcConfig::default()
        };
        let order: Vec<usize> = (0..100).collect();
        let (ps, _) = run_sequential(&model, &order, &cfg, 11, None).unwrap();
        let (m, s) = model.posterior(100);
        let est = ps.posterior_summary(|x| x[0]);
        let se = s / ps.ess().sqrt();
        assert!((est.mean - m).abs() < 3.0 * se.max(s / 2000f64.sqrt()) * 1.5, "{} vs {m}", est.mean);
        let exact = model.log_evidence(100);
        assert!(((ps.log_evidence - exact) / exact).abs() < 0.05);
    }

    #[test]
    fn rejuvenation_resets_weights_and_noop_when_healthy() {
        let model = toy(10, 6);
        let cfg = SmcConfig {
            n_particles: 200,
            ..SmcConfig::default()
        };
        let mut ps = ibis_init(&model, 200, 0.5, 3).unwrap();
        let before = ps.clone();
        let r = maybe_rejuvenate(&mut ps, &model, 100.0, &cfg, 3).unwrap();
        assert!(!r.happened);
        assert_eq!(ps, before);
        for i in 0..5 {
            ibis_step(&mut ps, &model, i, 3).unwrap();
        }
        rejuvenate(&mut ps, &model, &cfg, 3).unwrap();
        assert_eq!(ps.ess(), 200.0);
    }

    #[test]
    fn dominant_weight_copies_before_jitter() {
        let model = toy(1, 6);
        let cfg = SmcConfig {
            n_particles: 30,
            jitter_steps: 0,
            ..SmcConfig::default()
        };
        let mut ps = ibis_init(&model, 30, 0.5, 3).unwrap();
        ps.log_weights = vec![f64::NEG_INFINITY; 30];
        ps.log_weights[7] = 0.0;
        let keep = ps.particles[7].clone();
        rejuvenate(&mut ps, &model, &cfg, 1).unwrap();
        assert!(ps.particles.iter().all(|p| *p == keep));
    }

    #[test]
    fn resampling_is_unbiased_for_the_weighted_mean() {
        let vals = [0.0, 1.0, 2.0, 5.0];
        let w = [0.1, 0.2, 0.3, 0.4];
        let target: f64 = vals.iter().zip(&w).map(|(v, w)| v * w).sum();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let reps = 10_000;
        let means: Vec<f64> = (0..reps)
            .map(|_| {
                let idx = resample(&w, 20, Resampling::Multinomial, &mut rng);
                idx.iter().map(|&i| vals[i]).sum::<f64>() / 20.0
            })
            .collect();
        let m = means.iter().sum::<f64>() / reps as f64;
        let sd = (means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (reps as f64 - 1.0)).sqrt();
        assert!((m - target).abs() < 3.0 * sd / (reps as f64).sqrt());
        let sys = resample(&w, 10, Resampling::Systematic, &mut rng);
        assert_eq!(sys.iter().filter(|&&i| i == 3).count(), 4);
    }

    #[test]
    fn summary_of_constant_and_equal_weights() {
        let model = toy(0, 1);
        let ps = ibis_init(&model, 10, 0.5, 2).unwrap();
        let s = ps.posterior_summary(|_| 1.0);
        assert!((s.mean - 1.0).abs() < 1e-15);
        let s = ps.posterior_summary(|x| x[0]);
        let mean = ps.particles.iter().map(|p| p[0]).sum::<f64>() / 10.0;
        assert!((s.mean - mean).abs() < 1e-12);
    }

    #[test]
    fn empty_schedule() {
        let model = toy(0, 1);
        let (ps, trace) = run_sequential(&model, &[], &SmcConfig { n_particles: 5, ..SmcConfig::default() }, 1, None).unwrap();
        assert!(trace.is_empty());
        assert_eq!(ps.log_evidence, 0.0);
    }
}
