use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use crate::data::Dataset;
use crate::laplace::{laplace_fit_or_prior, reparameterize_single_factor, SingleFactorSpec};
use crate::linalg::{bernoulli_logit_lpmf, normal_lpdf, LN_2PI};
use crate::mcmc::LogDensity;
use crate::model::{marginal_blocks, row_loglik_marginal, ContinuousBlock, LatentFactors, Layout, ModelSpec, PosteriorTarget, Prior, Theta, Variant};
use crate::rng::StreamRng;
use crate::{Error, Result};

/// Outcome of absorbing one subject into one particle.
#[derive(Debug, Clone, PartialEq)]
pub struct Increment {
    pub log_weight: f64,
    /// Latent coordinates appended to the particle (empty for marginal models).
    pub latent: Vec<f64>,
    /// Linear predictors of the binary items at the drawn latent.
    pub eta: Vec<f64>,
    /// The Laplace fit failed and the prior proposal was used.
    pub fallback: bool,
}

/// A static model seen one subject at a time.
pub trait SequentialModel: Sync {
    /// Dimension of the unconstrained parameter block.
    fn theta_dim(&self) -> usize;
    /// Latent coordinates appended per absorbed subject.
    fn latent_dim(&self) -> usize;
    fn sample_prior(&self, rng: &mut StreamRng) -> Result<Vec<f64>>;
    /// Incremental weight of subject `row` for parameter block `theta_x`.
    fn increment(&self, theta_x: &[f64], row: usize, rng: &mut StreamRng) -> Result<Increment>;
    /// Binary linear predictors of `row` at parameters `theta_x` and latent `latent`.
    fn linear_predictor(&self, _theta_x: &[f64], _row: usize, _latent: &[f64]) -> Vec<f64> {
        Vec::new()
    }
    /// π(θ, latents of `rows` | y_rows) on the particle's coordinates.
    fn jitter_target<'s>(&'s self, rows: &[usize]) -> Box<dyn LogDensity + 's>;
    /// Constrained parameters, when the model has them.
    fn constrain(&self, _theta_x: &[f64]) -> Option<Theta> {
        None
    }
    /// Group of a data row, for per-group summaries.
    fn group_of(&self, _row: usize) -> usize {
        0
    }
}

/// Builds the sequential model for `spec`: plain IBIS when the likelihood
/// of a subject is available in closed form, IBIS-Laplace for EZ1.
pub fn sequential_model<'a>(spec: &'a ModelSpec, prior: &'a Prior, data: &'a Dataset) -> Result<Box<dyn SequentialModel + 'a>> {
    match spec.latent_factors() {
        LatentFactors::None => Ok(Box::new(MarginalModel::new(spec, prior, data))),
        _ => Ok(Box::new(LaplaceModel::new(spec, prior, data)?)),
    }
}

/// Models whose per-subject likelihood needs no latent variables.
pub struct MarginalModel<'a> {
    spec: &'a ModelSpec,
    prior: &'a Prior,
    data: &'a Dataset,
    layout: Layout,
}

impl<'a> MarginalModel<'a> {
    pub fn new(spec: &'a ModelSpec, prior: &'a Prior, data: &'a Dataset) -> Self {
        MarginalModel {
            spec,
            prior,
            data,
            layout: Layout::new(spec),
        }
    }
}

impl SequentialModel for MarginalModel<'_> {
    fn theta_dim(&self) -> usize {
        self.layout.dim()
    }

    fn latent_dim(&self) -> usize {
        0
    }

    fn sample_prior(&self, rng: &mut StreamRng) -> Result<Vec<f64>> {
        let t = self.prior.sample(self.spec, rng)?;
        Ok(self.layout.unconstrain(&t)?.iter().copied().collect())
    }

    fn increment(&self, theta_x: &[f64], row: usize, _rng: &mut StreamRng) -> Result<Increment> {
        let r = &self.data.rows()[row];
        let Some(u) = self.layout.unpack(theta_x) else {
            return Ok(Increment {
                log_weight: f64::NEG_INFINITY,
                latent: Vec::new(),
                eta: vec![0.0; self.spec.p_b],
                fallback: false,
            });
        };
        let log_weight = match marginal_blocks(&u.theta, self.spec) {
            Ok(blocks) => row_loglik_marginal(&r.y, r.group, &u.theta, self.spec, &blocks),
            Err(_) => f64::NEG_INFINITY,
        };
        Ok(Increment {
            log_weight,
            latent: Vec::new(),
            eta: (self.spec.p_c..self.spec.p()).map(|j| u.theta.alpha[(r.group, j)]).collect(),
            fallback: false,
        })
    }

    fn jitter_target<'s>(&'s self, rows: &[usize]) -> Box<dyn LogDensity + 's> {
        Box::new(PosteriorTarget::new(self.spec, self.prior, self.data, rows.to_vec()))
    }

    fn constrain(&self, theta_x: &[f64]) -> Option<Theta> {
        self.layout.unpack(theta_x).map(|u| u.theta)
    }

    fn group_of(&self, row: usize) -> usize {
        self.data.rows()[row].group
    }
}

/// IBIS-Laplace for EZ1: the binary factor of each new subject is drawn
/// from a Laplace approximation of its conditional posterior, and the
/// continuous factor is integrated out.
pub struct LaplaceModel<'a> {
    spec: &'a ModelSpec,
    prior: &'a Prior,
    data: &'a Dataset,
    layout: Layout,
    single: SingleFactorSpec,
    pub tol: f64,
    pub max_iter: usize,
}

impl<'a> LaplaceModel<'a> {
    pub fn new(spec: &'a ModelSpec, prior: &'a Prior, data: &'a Dataset) -> Result<Self> {
        let single = reparameterize_single_factor(spec)?;
        Ok(LaplaceModel {
            spec,
            prior,
            data,
            layout: Layout::new(spec),
            single,
            tol: crate::laplace::DEFAULT_TOL,
            max_iter: crate::laplace::DEFAULT_MAX_ITER,
        })
    }
}

impl SequentialModel for LaplaceModel<'_> {
    fn theta_dim(&self) -> usize {
        self.layout.dim()
    }

    fn latent_dim(&self) -> usize {
        1
    }

    fn sample_prior(&self, rng: &mut StreamRng) -> Result<Vec<f64>> {
        let t = self.prior.sample(self.spec, rng)?;
        Ok(self.layout.unconstrain(&t)?.iter().copied().collect())
    }

    fn increment(&self, theta_x: &[f64], row: usize, rng: &mut StreamRng) -> Result<Increment> {
        let r = &self.data.rows()[row];
        let Some(u) = self.layout.unpack(theta_x) else {
            return Ok(Increment {
                log_weight: f64::NEG_INFINITY,
                latent: vec![0.0],
                eta: vec![0.0; self.spec.p_b],
                fallback: false,
            });
        };
        let theta = &u.theta;
        let pc = self.spec.p_c;
        let mut log_weight = 0.0;
        if pc > 0 {
            let cov = self.single.continuous_covariance(theta, r.group);
            log_weight += match ContinuousBlock::new(cov) {
                Ok(b) => {
                    let resid = nalgebra::DVector::from_iterator(pc, (0..pc).map(|j| r.y[j] - theta.alpha[(r.group, j)]));
                    b.logpdf(&resid)
                }
                Err(_) => f64::NEG_INFINITY,
            };
        }
        let prob = self.single.problem(theta, r.group);
        let y_bin = &r.y[pc..];
        let (fit, fallback) = laplace_fit_or_prior(y_bin, &prob, self.tol, self.max_iter);
        let z = fit.sample(rng);
        let z0 = z[0];
        let mut eta = Vec::with_capacity(y_bin.len());
        for (j, &y) in y_bin.iter().enumerate() {
            let e = prob.alpha[j] + prob.beta[(j, 0)] * z0;
            log_weight += bernoulli_logit_lpmf(y, e);
            eta.push(e);
        }
        log_weight += -0.5 * (LN_2PI + z0 * z0) - fit.logpdf(&[z0]);
        Ok(Increment {
            log_weight,
            latent: vec![z0],
            eta,
            fallback,
        })
    }

    fn linear_predictor(&self, theta_x: &[f64], row: usize, latent: &[f64]) -> Vec<f64> {
        let r = &self.data.rows()[row];
        match self.layout.unpack(theta_x) {
            Some(u) => {
                let prob = self.single.problem(&u.theta, r.group);
                (0..prob.alpha.len()).map(|j| prob.alpha[j] + prob.beta[(j, 0)] * latent[0]).collect()
            }
            None => vec![f64::NAN; self.spec.p_b],
        }
    }

    fn jitter_target<'s>(&'s self, rows: &[usize]) -> Box<dyn LogDensity + 's> {
        Box::new(PosteriorTarget::new(self.spec, self.prior, self.data, rows.to_vec()))
    }

    fn constrain(&self, theta_x: &[f64]) -> Option<Theta> {
        self.layout.unpack(theta_x).map(|u| u.theta)
    }

    fn group_of(&self, row: usize) -> usize {
        self.data.rows()[row].group
    }
}

/// y_i ~ N(μ, σ²) with known σ and μ ~ N(m₀, s₀²): a conjugate model with
/// closed-form posterior and evidence, used to check the sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMeanModel {
    pub y: Vec<f64>,
    pub sigma: f64,
    pub prior_mean: f64,
    pub prior_sd: f64,
}

impl NormalMeanModel {
    /// Posterior mean and sd of μ given the first `n` observations.
    pub fn posterior(&self, n: usize) -> (f64, f64) {
        let prec = 1.0 / self.prior_sd.powi(2) + n as f64 / self.sigma.powi(2);
        let sum: f64 = self.y[..n].iter().sum();
        let mean = (self.prior_mean / self.prior_sd.powi(2) + sum / self.sigma.powi(2)) / prec;
        (mean, prec.sqrt().recip())
    }

    /// log f(y_1, …, y_n), computed by the chain rule of predictive densities.
    pub fn log_evidence(&self, n: usize) -> f64 {
        (0..n)
            .map(|i| {
                let (m, s) = self.posterior(i);
                normal_lpdf(self.y[i], m, (s * s + self.sigma * self.sigma).sqrt())
            })
            .sum()
    }

    pub fn simulate(n: usize, mu: f64, sigma: f64, seed: u64) -> Vec<f64> {
        let mut rng = StreamRng::seed_from_u64(seed);
        let d = Normal::new(mu, sigma).expect("valid normal");
        (0..n).map(|_| d.sample(&mut rng)).collect()
    }
}

struct NormalMeanTarget<'a> {
    model: &'a NormalMeanModel,
    rows: Vec<usize>,
}

impl LogDensity for NormalMeanTarget<'_> {
    fn dim(&self) -> usize {
        1
    }

    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let m = self.model;
        let mu = x[0];
        let mut lp = normal_lpdf(mu, m.prior_mean, m.prior_sd);
        grad[0] = -(mu - m.prior_mean) / m.prior_sd.powi(2);
        for &r in &self.rows {
            lp += normal_lpdf(m.y[r], mu, m.sigma);
            grad[0] += (m.y[r] - mu) / m.sigma.powi(2);
        }
        lp
    }
}

impl SequentialModel for NormalMeanModel {
    fn theta_dim(&self) -> usize {
        1
    }

    fn latent_dim(&self) -> usize {
        0
    }

    fn sample_prior(&self, rng: &mut StreamRng) -> Result<Vec<f64>> {
        let d = Normal::new(self.prior_mean, self.prior_sd).map_err(|e| Error::Model(e.to_string()))?;
        Ok(vec![d.sample(rng)])
    }

    fn increment(&self, theta_x: &[f64], row: usize, _rng: &mut StreamRng) -> Result<Increment> {
        Ok(Increment {
            log_weight: normal_lpdf(self.y[row], theta_x[0], self.sigma),
            latent: Vec::new(),
            eta: Vec::new(),
            fallback: false,
        })
    }

    fn jitter_target<'s>(&'s self, rows: &[usize]) -> Box<dyn LogDensity + 's> {
        Box::new(NormalMeanTarget {
            model: self,
            rows: rows.to_vec(),
        })
    }
}

/// The model variants the sequential sampler accepts.
pub fn supports_sequential(spec: &ModelSpec) -> bool {
    matches!(spec.variant, Variant::Sat | Variant::Ind | Variant::Ez1) || spec.p_b == 0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{reference_theta, simulate_dataset};
    use crate::linalg::{log_sum_exp, mvn_lpdf};
    use crate::model::PriorConfig;
    use crate::rng::stream;
    use nalgebra::{DMatrix, DVector};

    fn setup() -> (ModelSpec, Theta, Dataset, Prior) {
        let (spec, theta) = reference_theta();
        let data = simulate_dataset(&spec, &theta, &[5, 5, 5], 3).unwrap();
        let prior = Prior::resolve(&PriorConfig::default(), &spec, &data.pooled_continuous_covariance()).unwrap();
        (spec, theta, data, prior)
    }

    fn continuous_part(theta: &Theta, y: &[f64], g: usize) -> f64 {
        let b = &theta.blocks[0];
        let l = b.lambda.view((0, 0), (2, 1)).into_owned();
        let cov = &l * l.transpose() + DMatrix::from_diagonal(&b.psi);
        let mean = DVector::from_iterator(2, (0..2).map(|j| theta.alpha[(g, j)]));
        mvn_lpdf(&DVector::from_column_slice(&y[..2]), &mean, &cov).unwrap()
    }

    #[test]
    fn vacuous_latent_gives_the_marginal_weight() {
        let (spec, mut theta, data, prior) = setup();
        for j in 2..6 {
            theta.blocks[0].lambda[(j, 1)] = 0.0;
        }
        let model = LaplaceModel::new(&spec, &prior, &data).unwrap();
        let x: Vec<f64> = Layout::new(&spec).unconstrain(&theta).unwrap().iter().copied().collect();
        for row in 0..data.n() {
            let r = &data.rows()[row];
            let inc = model.increment(&x, row, &mut stream(1, &[row as u64])).unwrap();
            let oracle = continuous_part(&theta, &r.y, r.group)
                + (2..6).map(|j| bernoulli_logit_lpmf(r.y[j], theta.alpha[(r.group, j)])).sum::<f64>();
            assert!((inc.log_weight - oracle).abs() < 1e-9, "{} vs {oracle}", inc.log_weight);
            assert!(!inc.fallback);
        }
    }

    #[test]
    fn importance_weights_average_to_the_marginal_likelihood() {
        let (spec, theta, data, prior) = setup();
        let model = LaplaceModel::new(&spec, &prior, &data).unwrap();
        let x: Vec<f64> = Layout::new(&spec).unconstrain(&theta).unwrap().iter().copied().collect();
        for row in [0, 7, 12] {
            let r = &data.rows()[row];
            let lw: Vec<f64> = (0..4000)
                .map(|m| model.increment(&x, row, &mut stream(2, &[row as u64, m])).unwrap().log_weight)
                .collect();
            let estimate = log_sum_exp(&lw) - 4000f64.ln();
            // Midpoint rule over the binary factor.
            let h = 1e-3;
            let mut acc = Vec::new();
            let mut z = -10.0 + h / 2.0;
            while z < 10.0 {
                let bern: f64 = (2..6)
                    .map(|j| bernoulli_logit_lpmf(r.y[j], theta.alpha[(r.group, j)] + theta.blocks[0].lambda[(j, 1)] * z))
                    .sum();
                acc.push(bern + normal_lpdf(z, 0.0, 1.0) + h.ln());
                z += h;
            }
            let oracle = continuous_part(&theta, &r.y, r.group) + log_sum_exp(&acc);
            assert!((estimate - oracle).exp_m1().abs() < 0.01, "{estimate} vs {oracle}");
        }
    }

    #[test]
    fn latent_free_spec_routes_to_marginal() {
        let spec = ModelSpec::parse("IND-p", 2, 4, 3).unwrap();
        let (_, _, data, _) = setup();
        let prior = Prior::resolve(&PriorConfig::default(), &spec, &data.pooled_continuous_covariance()).unwrap();
        let m = sequential_model(&spec, &prior, &data).unwrap();
        assert_eq!(m.latent_dim(), 0);
        assert!(supports_sequential(&spec));
        assert!(!supports_sequential(&ModelSpec::parse("AZ2", 2, 4, 3).unwrap()));
    }
}
