//! Gaussian approximation to a subject's latent-factor posterior.
//!
//! For EZ1 the continuous factor is independent of the binary factor, so
//! it can be integrated out of the continuous block exactly and the only
//! latent that needs a proposal is the scalar factor loading on the binary
//! items. Its log posterior is
//!
//! ```text
//! ℓ(z) = Σ_j [y_j log σ(η_j) + (1 − y_j) log(1 − σ(η_j))] − ½‖z‖²,  η = α + B z,
//! ```
//!
//! and Fisher scoring (which coincides with Newton for the logit link)
//! finds its mode. The covariance of the approximation is the inverse of
//! the full information matrix `I + Σ σ_j(1 − σ_j) b_j b_jᵀ`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use crate::linalg::{bernoulli_logit_lpmf, cholesky, log_det_chol, sigmoid, LN_2PI};
use crate::model::{ContinuousBlock, ModelSpec, Theta, Variant};
use crate::rng::StreamRng;
use crate::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 50;

/// EZ1 rewritten as a one-factor model on the binary items, with the
/// continuous factor absorbed into the continuous marginal likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleFactorSpec {
    base: ModelSpec,
}

pub fn reparameterize_single_factor(spec: &ModelSpec) -> Result<SingleFactorSpec> {
    if spec.variant != Variant::Ez1 {
        return Err(Error::Model(format!(
            "single-factor reparameterisation needs independent factors without residual effects; {} does not qualify",
            spec.name()
        )));
    }
    Ok(SingleFactorSpec { base: spec.clone() })
}

impl SingleFactorSpec {
    pub fn base(&self) -> &ModelSpec {
        &self.base
    }

    /// Dimension of the latent posterior.
    pub fn k(&self) -> usize {
        1
    }

    /// Marginal continuous covariance λ₁λ₁ᵀ + Ψ of `group`.
    pub fn continuous_covariance(&self, theta: &Theta, group: usize) -> DMatrix<f64> {
        let b = theta.block(&self.base, group);
        let pc = self.base.p_c;
        let l = b.lambda.view((0, 0), (pc, 1));
        let mut c = l * l.transpose();
        for j in 0..pc {
            c[(j, j)] += b.psi[j];
        }
        c
    }

    /// Continuous Gaussian blocks per pooling block.
    pub fn continuous_blocks(&self, theta: &Theta) -> Result<Vec<ContinuousBlock>> {
        (0..self.base.n_blocks())
            .map(|b| {
                let group = if self.base.pooled { 0 } else { b };
                ContinuousBlock::new(self.continuous_covariance(theta, group))
            })
            .collect()
    }

    /// Binary intercepts and loadings on the remaining factor.
    pub fn problem(&self, theta: &Theta, group: usize) -> LatentProblem {
        let s = &self.base;
        let b = theta.block(s, group);
        LatentProblem {
            alpha: (s.p_c..s.p()).map(|j| theta.alpha[(group, j)]).collect(),
            beta: DMatrix::from_iterator(s.p_b, 1, (s.p_c..s.p()).map(|j| b.lambda[(j, 1)])),
        }
    }
}

/// Intercepts α (length p_b) and loadings B (p_b × k) defining a subject's
/// latent posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentProblem {
    pub alpha: Vec<f64>,
    pub beta: DMatrix<f64>,
}

impl LatentProblem {
    pub fn k(&self) -> usize {
        self.beta.ncols()
    }

    fn eta(&self, z: &[f64], j: usize) -> f64 {
        self.alpha[j] + (0..self.k()).map(|f| self.beta[(j, f)] * z[f]).sum::<f64>()
    }
}

/// ℓ(z | y, θ): Bernoulli-logit log-likelihood plus the N(0, I) log-kernel.
pub fn latent_log_target(z: &[f64], y_bin: &[f64], prob: &LatentProblem) -> f64 {
    let ll: f64 = y_bin
        .iter()
        .enumerate()
        .map(|(j, &y)| bernoulli_logit_lpmf(y, prob.eta(z, j)))
        .sum();
    ll - 0.5 * z.iter().map(|v| v * v).sum::<f64>()
}

/// Score and (expected) information of ℓ at `z`.
pub fn latent_score_and_info(z: &[f64], y_bin: &[f64], prob: &LatentProblem) -> (DVector<f64>, DMatrix<f64>) {
    let k = prob.k();
    let mut score = DVector::from_iterator(k, z.iter().map(|v| -v));
    let mut info = DMatrix::identity(k, k);
    for (j, &y) in y_bin.iter().enumerate() {
        let s = sigmoid(prob.eta(z, j));
        let w = s * (1.0 - s);
        let b = prob.beta.row(j);
        for f in 0..k {
            score[f] += (y - s) * b[f];
            for g in 0..k {
                info[(f, g)] += w * b[f] * b[g];
            }
        }
    }
    (score, info)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaplaceFit {
    pub mode: DVector<f64>,
    /// Inverse information at the mode.
    pub covariance: DMatrix<f64>,
    pub log_det_info: f64,
    pub iterations: usize,
    chol_cov: DMatrix<f64>,
}

impl LaplaceFit {
    fn from_mode(mode: DVector<f64>, info: &DMatrix<f64>, iterations: usize) -> Result<Self> {
        let ch = cholesky(info).ok_or(Error::NotPositiveDefinite("latent information"))?;
        let covariance = ch.inverse();
        let chol_cov = cholesky(&covariance)
            .ok_or(Error::NotPositiveDefinite("latent covariance"))?
            .l();
        Ok(LaplaceFit {
            log_det_info: log_det_chol(&ch),
            mode,
            covariance,
            iterations,
            chol_cov,
        })
    }

    /// The prior N(0, I), used as the fallback proposal.
    pub fn standard(k: usize) -> Self {
        LaplaceFit {
            mode: DVector::zeros(k),
            covariance: DMatrix::identity(k, k),
            log_det_info: 0.0,
            iterations: 0,
            chol_cov: DMatrix::identity(k, k),
        }
    }

    pub fn k(&self) -> usize {
        self.mode.len()
    }

    pub fn logpdf(&self, z: &[f64]) -> f64 {
        let k = self.k();
        let r = DVector::from_iterator(k, (0..k).map(|i| z[i] - self.mode[i]));
        // Σ⁻¹ = I_info; solve via the covariance factor.
        let w = self
            .chol_cov
            .solve_lower_triangular(&r)
            .expect("triangular factor has positive diagonal");
        -0.5 * (k as f64 * LN_2PI - self.log_det_info + w.norm_squared())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let k = self.k();
        let e = DVector::from_iterator(k, (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)));
        &self.mode + &self.chol_cov * e
    }

    pub fn sample_seeded(&self, seed: u64) -> DVector<f64> {
        self.sample(&mut StreamRng::seed_from_u64(seed))
    }

    /// Laplace estimate of log ∫ exp ℓ(z) dz.
    pub fn log_evidence(&self, y_bin: &[f64], prob: &LatentProblem) -> f64 {
        latent_log_target(self.mode.as_slice(), y_bin, prob) + 0.5 * self.k() as f64 * LN_2PI - 0.5 * self.log_det_info
    }
}

/// Scoring iterations from z = 0; on failure returns the last score norm.
fn scoring(y_bin: &[f64], prob: &LatentProblem, tol: f64, max_iter: usize, damping: f64) -> std::result::Result<(DVector<f64>, DMatrix<f64>, usize), f64> {
    let mut z = DVector::zeros(prob.k());
    let mut norm = f64::INFINITY;
    for it in 0..=max_iter {
        let (score, info) = latent_score_and_info(z.as_slice(), y_bin, prob);
        norm = score.norm();
        if !norm.is_finite() {
            break;
        }
        if norm < tol {
            return Ok((z, info, it));
        }
        if it == max_iter {
            break;
        }
        match cholesky(&info) {
            Some(ch) => z += ch.solve(&score) * damping,
            None => break,
        }
    }
    Err(norm)
}

/// Fisher scoring from z = 0 until the score norm drops below `tol`, with
/// one half-step restart before reporting non-convergence.
pub fn laplace_fit(y_bin: &[f64], prob: &LatentProblem, tol: f64, max_iter: usize) -> Result<LaplaceFit> {
    if y_bin.len() != prob.alpha.len() || prob.beta.nrows() != prob.alpha.len() {
        return Err(Error::Model("binary response and loadings disagree in length".into()));
    }
    let found = scoring(y_bin, prob, tol, max_iter, 1.0).or_else(|_| scoring(y_bin, prob, tol, max_iter, 0.5));
    match found {
        Ok((z, info, it)) => LaplaceFit::from_mode(z, &info, it),
        Err(grad_norm) => Err(Error::LaplaceNonConvergence {
            iterations: 2 * max_iter,
            grad_norm,
        }),
    }
}

/// [`laplace_fit`] falling back to the prior proposal on failure. Returns
/// the fit and whether the fallback was used.
pub fn laplace_fit_or_prior(y_bin: &[f64], prob: &LatentProblem, tol: f64, max_iter: usize) -> (LaplaceFit, bool) {
    match laplace_fit(y_bin, prob, tol, max_iter) {
        Ok(f) => (f, false),
        Err(_) => (LaplaceFit::standard(prob.k()), true),
    }
}
