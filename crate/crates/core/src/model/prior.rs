use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Beta, ChiSquared, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{LoadingKind, ModelSpec, Theta, ThetaGrad, Variant};
use crate::linalg::{cholesky, ln_gamma, ln_multi_gamma, log_det_chol, normal_lpdf};
use crate::{Error, Result};

/// User-facing prior hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    /// Sd of continuous principal loadings; `None` means twice the sample
    /// sd of the anchored item.
    pub loading_sd_continuous: Option<f64>,
    pub loading_sd_binary: f64,
    pub crossloading_sd: f64,
    /// Inverse-gamma shape for idiosyncratic variances.
    pub c0: f64,
    pub lkj_eta: f64,
    /// Residual-covariance degrees of freedom are `p_b + iw_dof_offset`.
    pub iw_dof_offset: f64,
    /// Saturated-covariance degrees of freedom are `p_c + sat_dof_offset`.
    pub sat_dof_offset: f64,
    pub alpha_sd: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            loading_sd_continuous: None,
            loading_sd_binary: 2.0,
            crossloading_sd: 0.1,
            c0: 2.5,
            lkj_eta: 2.0,
            iw_dof_offset: 6.0,
            sat_dof_offset: 2.0,
            alpha_sd: 10.0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("loading_sd_binary", self.loading_sd_binary),
            ("crossloading_sd", self.crossloading_sd),
            ("lkj_eta", self.lkj_eta),
            ("iw_dof_offset", self.iw_dof_offset),
            ("sat_dof_offset", self.sat_dof_offset),
            ("alpha_sd", self.alpha_sd),
            ("loading_sd_continuous", self.loading_sd_continuous.unwrap_or(1.0)),
        ];
        for (name, v) in named {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("prior `{name}` must be positive")));
            }
        }
        if !(self.c0 > 1.0 && self.c0.is_finite()) {
            return Err(Error::Config("prior `c0` must exceed 1".into()));
        }
        Ok(())
    }
}

/// Prior with every data-dependent scale resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct Prior {
    pub config: PriorConfig,
    pub loading_sd_continuous: f64,
    /// Inverse-gamma scale per continuous item.
    pub psi_scale: Vec<f64>,
    pub omega_dof: f64,
    pub sat_dof: f64,
    /// Scale matrix of the saturated-covariance prior.
    pub sat_scale: DMatrix<f64>,
    lkj_log_norm: f64,
}

impl Prior {
    /// Resolves the prior against `s_y`, the pooled within-group sample
    /// covariance of the continuous items.
    pub fn resolve(config: &PriorConfig, spec: &ModelSpec, s_y: &DMatrix<f64>) -> Result<Self> {
        config.validate()?;
        if s_y.shape() != (spec.p_c, spec.p_c) {
            return Err(Error::Model("sample covariance has wrong shape".into()));
        }
        let (psi_scale, default_sd) = if spec.p_c > 0 {
            let ch = cholesky(s_y).ok_or(Error::NotPositiveDefinite("sample covariance"))?;
            let inv = ch.inverse();
            let scale = (0..spec.p_c).map(|j| (config.c0 - 1.0) / inv[(j, j)]).collect();
            (scale, 2.0 * s_y[(0, 0)].sqrt())
        } else {
            (Vec::new(), 1.0)
        };
        Ok(Prior {
            config: config.clone(),
            loading_sd_continuous: config.loading_sd_continuous.unwrap_or(default_sd),
            psi_scale,
            omega_dof: spec.p_b as f64 + config.iw_dof_offset,
            sat_dof: spec.p_c as f64 + config.sat_dof_offset,
            sat_scale: s_y.clone(),
            lkj_log_norm: lkj_log_normalizer(spec.k(), config.lkj_eta),
        })
    }

    /// Prior sd of loading `(item, factor)`, or `None` if it is not free.
    pub fn loading_sd(&self, spec: &ModelSpec, item: usize, factor: usize) -> Option<f64> {
        match spec.loading_kind(item, factor) {
            LoadingKind::Principal if item < spec.p_c => Some(self.loading_sd_continuous),
            LoadingKind::Principal => Some(self.config.loading_sd_binary),
            LoadingKind::Cross => Some(self.config.crossloading_sd),
            _ => None,
        }
    }
}

impl Prior {
    /// Draws θ from the prior.
    pub fn sample<R: Rng + ?Sized>(&self, spec: &ModelSpec, rng: &mut R) -> Result<Theta> {
        let cfg = &self.config;
        let mut theta = Theta::null(spec);
        for a in theta.alpha.iter_mut() {
            *a = cfg.alpha_sd * rng.sample::<f64, _>(StandardNormal);
        }
        let eye_b = DMatrix::identity(spec.p_b, spec.p_b);
        for block in &mut theta.blocks {
            for j in 0..spec.p() {
                for f in 0..spec.k() {
                    if let Some(sd) = self.loading_sd(spec, j, f) {
                        block.lambda[(j, f)] = sd * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
            if spec.variant == Variant::Sat {
                if spec.p_c > 0 {
                    block.sigma = Some(sample_inv_wishart(self.sat_dof, &self.sat_scale, rng)?);
                }
            } else {
                for j in 0..spec.p_c {
                    let g = Gamma::new(cfg.c0, 1.0 / self.psi_scale[j]).map_err(|e| Error::Model(e.to_string()))?;
                    block.psi[j] = 1.0 / g.sample(rng);
                }
            }
            if spec.variant.correlated_factors() && spec.k() == 2 {
                // LKJ(η) on a 2×2 matrix: (ρ + 1) / 2 ~ Beta(η, η).
                let b = Beta::new(cfg.lkj_eta, cfg.lkj_eta).map_err(|e| Error::Model(e.to_string()))?;
                let rho = (2.0 * b.sample(rng) - 1.0).clamp(-1.0 + 1e-12, 1.0 - 1e-12);
                block.phi[(0, 1)] = rho;
                block.phi[(1, 0)] = rho;
            }
            if spec.variant.has_residual_effects() && spec.p_b > 0 {
                block.omega = Some(sample_inv_wishart(self.omega_dof, &eye_b, rng)?);
            }
        }
        Ok(theta)
    }
}

/// Σ = W⁻¹ with W ~ Wishart(dof, scale⁻¹), via the Bartlett decomposition.
fn sample_inv_wishart<R: Rng + ?Sized>(dof: f64, scale: &DMatrix<f64>, rng: &mut R) -> Result<DMatrix<f64>> {
    let p = scale.nrows();
    let prec = cholesky(scale).ok_or(Error::NotPositiveDefinite("prior scale"))?.inverse();
    let l = cholesky(&prec).ok_or(Error::NotPositiveDefinite("prior scale"))?.l();
    let mut a = DMatrix::zeros(p, p);
    for i in 0..p {
        let chi = ChiSquared::new(dof - i as f64).map_err(|e| Error::Model(e.to_string()))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let la = l * a;
    let w = &la * la.transpose();
    let sigma = cholesky(&w).ok_or(Error::NotPositiveDefinite("Wishart draw"))?.inverse();
    Ok((&sigma + sigma.transpose()) * 0.5)
}

/// Log normalising constant of the LKJ density on k×k correlation matrices.
pub fn lkj_log_normalizer(k: usize, eta: f64) -> f64 {
    let mut out = 0.0;
    for i in 1..k {
        let m = (k - i) as f64;
        let a = eta + (m - 1.0) / 2.0;
        out += (2.0 * eta - 2.0 + m) * m * std::f64::consts::LN_2;
        out += m * (2.0 * ln_gamma(a) - ln_gamma(2.0 * a));
    }
    out
}

fn inv_gamma_lpdf(x: f64, a: f64, b: f64) -> (f64, f64) {
    let lp = a * b.ln() - ln_gamma(a) - (a + 1.0) * x.ln() - b / x;
    (lp, -(a + 1.0) / x + b / (x * x))
}

/// Inverse-Wishart log-density and its gradient in the (symmetric) argument.
fn inv_wishart_lpdf(x: &DMatrix<f64>, dof: f64, scale: &DMatrix<f64>, what: &'static str) -> Result<(f64, DMatrix<f64>)> {
    let p = x.nrows();
    let pf = p as f64;
    let ch_x = cholesky(x).ok_or(Error::NotPositiveDefinite(what))?;
    let ch_s = cholesky(scale).ok_or(Error::NotPositiveDefinite("prior scale"))?;
    let x_inv = ch_x.inverse();
    let sx = scale * &x_inv;
    let lp = 0.5 * dof * log_det_chol(&ch_s)
        - 0.5 * dof * pf * std::f64::consts::LN_2
        - ln_multi_gamma(p, 0.5 * dof)
        - 0.5 * (dof + pf + 1.0) * log_det_chol(&ch_x)
        - 0.5 * sx.trace();
    let grad = &x_inv * (-0.5 * (dof + pf + 1.0)) + 0.5 * (&x_inv * scale * &x_inv);
    Ok((lp, grad))
}

/// Log prior density of `theta`, optionally accumulating its gradient.
pub fn log_prior(theta: &Theta, spec: &ModelSpec, prior: &Prior, mut grad: Option<&mut ThetaGrad>) -> Result<f64> {
    let cfg = &prior.config;
    let mut lp = 0.0;
    for (idx, a) in theta.alpha.iter().enumerate() {
        lp += normal_lpdf(*a, 0.0, cfg.alpha_sd);
        if let Some(g) = grad.as_deref_mut() {
            g.alpha[idx] -= a / (cfg.alpha_sd * cfg.alpha_sd);
        }
    }
    let k = spec.k();
    for (b, block) in theta.blocks.iter().enumerate() {
        for j in 0..spec.p() {
            for f in 0..k {
                if let Some(sd) = prior.loading_sd(spec, j, f) {
                    let l = block.lambda[(j, f)];
                    lp += normal_lpdf(l, 0.0, sd);
                    if let Some(g) = grad.as_deref_mut() {
                        g.blocks[b].lambda[(j, f)] -= l / (sd * sd);
                    }
                }
            }
        }
        if spec.variant == Variant::Sat {
            if spec.p_c > 0 {
                let sigma = block.sigma.as_ref().ok_or(Error::Model("missing sigma".into()))?;
                let (l, gs) = inv_wishart_lpdf(sigma, prior.sat_dof, &prior.sat_scale, "sigma")?;
                lp += l;
                if let Some(g) = grad.as_deref_mut() {
                    g.blocks[b].sigma += gs;
                }
            }
        } else {
            for j in 0..spec.p_c {
                let x = block.psi[j];
                if !(x > 0.0) {
                    return Err(Error::NotPositiveDefinite("psi"));
                }
                let (l, d) = inv_gamma_lpdf(x, cfg.c0, prior.psi_scale[j]);
                lp += l;
                if let Some(g) = grad.as_deref_mut() {
                    g.blocks[b].psi[j] += d;
                }
            }
        }
        if spec.variant.correlated_factors() {
            let ch = cholesky(&block.phi).ok_or(Error::NotPositiveDefinite("phi"))?;
            lp += (cfg.lkj_eta - 1.0) * log_det_chol(&ch) - prior.lkj_log_norm;
            if let Some(g) = grad.as_deref_mut() {
                g.blocks[b].phi += ch.inverse() * (cfg.lkj_eta - 1.0);
            }
        }
        if spec.variant.has_residual_effects() && spec.p_b > 0 {
            let omega = block.omega.as_ref().ok_or(Error::Model("missing omega".into()))?;
            let eye = DMatrix::identity(spec.p_b, spec.p_b);
            let (l, go) = inv_wishart_lpdf(omega, prior.omega_dof, &eye, "omega")?;
            lp += l;
            if let Some(g) = grad.as_deref_mut() {
                g.blocks[b].omega += go;
            }
        }
    }
    Ok(lp)
}
