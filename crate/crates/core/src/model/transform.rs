//! Bijection between the constrained parameters and ℝ^d.
//!
//! Variances use a log transform, the factor correlation uses `tanh`, and
//! covariance matrices use a Cholesky factor with log-diagonal.

use nalgebra::{DMatrix, DVector};

use super::{CovBlock, LoadingKind, ModelSpec, Theta, ThetaGrad, Variant};
use crate::data::OutcomeSchema;
use crate::linalg::cholesky;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    spec: ModelSpec,
    free_loadings: Vec<(usize, usize)>,
    per_block: usize,
}

/// Constrained parameters plus the Cholesky factors they were built from.
#[derive(Debug, Clone)]
pub struct Unpacked {
    pub theta: Theta,
    pub sigma_chol: Vec<Option<DMatrix<f64>>>,
    pub omega_chol: Vec<Option<DMatrix<f64>>>,
}

fn tri(p: usize) -> usize {
    p * (p + 1) / 2
}

fn chol_from_unconstrained(y: &[f64], p: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(p, p);
    let mut it = y.iter();
    for i in 0..p {
        for j in 0..=i {
            let v = *it.next().expect("cholesky slice length");
            l[(i, j)] = if i == j { v.exp() } else { v };
        }
    }
    l
}

fn chol_to_unconstrained(m: &DMatrix<f64>, what: &'static str, out: &mut Vec<f64>) -> Result<()> {
    let p = m.nrows();
    if p == 0 {
        return Ok(());
    }
    let l = cholesky(m).ok_or(Error::NotPositiveDefinite(what))?.l();
    for i in 0..p {
        for j in 0..=i {
            out.push(if i == j { l[(i, j)].ln() } else { l[(i, j)] });
        }
    }
    Ok(())
}

/// Log-Jacobian of y ↦ LLᵀ and its gradient in y.
fn chol_log_jacobian(y: &[f64], p: usize, grad: Option<&mut [f64]>) -> f64 {
    let mut lj = p as f64 * std::f64::consts::LN_2;
    let mut idx = 0;
    let mut g = grad;
    for i in 0..p {
        idx += i;
        let w = (p - i + 1) as f64;
        lj += w * y[idx];
        if let Some(g) = g.as_deref_mut() {
            g[idx] += w;
        }
        idx += 1;
    }
    lj
}

/// Maps a gradient in M = LLᵀ (plus a direct gradient in L) to the
/// unconstrained Cholesky coordinates.
fn chol_pullback(l: &DMatrix<f64>, g_m: &DMatrix<f64>, g_l: Option<&DMatrix<f64>>, out: &mut [f64]) {
    let p = l.nrows();
    let sym = (g_m + g_m.transpose()) * 0.5;
    let mut gl = sym * l * 2.0;
    if let Some(d) = g_l {
        gl += d;
    }
    let mut idx = 0;
    for i in 0..p {
        for j in 0..=i {
            out[idx] += if i == j { gl[(i, j)] * l[(i, j)] } else { gl[(i, j)] };
            idx += 1;
        }
    }
}

fn lower_entries(m: &DMatrix<f64>, out: &mut Vec<f64>) {
    for i in 0..m.nrows() {
        for j in 0..=i {
            out.push(m[(i, j)]);
        }
    }
}

impl Layout {
    pub fn new(spec: &ModelSpec) -> Self {
        let mut free_loadings = Vec::new();
        for j in 0..spec.p() {
            for f in 0..spec.k() {
                if matches!(spec.loading_kind(j, f), LoadingKind::Principal | LoadingKind::Cross) {
                    free_loadings.push((j, f));
                }
            }
        }
        let mut per_block = free_loadings.len();
        per_block += if spec.variant == Variant::Sat { tri(spec.p_c) } else { spec.p_c };
        if spec.variant.correlated_factors() {
            per_block += 1;
        }
        if spec.variant.has_residual_effects() {
            per_block += tri(spec.p_b);
        }
        Layout {
            spec: spec.clone(),
            free_loadings,
            per_block,
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.n_groups * self.spec.p() + self.spec.n_blocks() * self.per_block
    }

    pub fn free_loadings(&self) -> &[(usize, usize)] {
        &self.free_loadings
    }

    /// Builds the constrained parameters from the first `dim()` entries of
    /// `x`. Returns `None` if any resulting value is non-finite.
    pub fn unpack(&self, x: &[f64]) -> Option<Unpacked> {
        let s = &self.spec;
        let (p, k, r) = (s.p(), s.k(), s.n_groups);
        let mut pos = 0;
        let mut alpha = DMatrix::zeros(r, p);
        for g in 0..r {
            for j in 0..p {
                alpha[(g, j)] = x[pos];
                pos += 1;
            }
        }
        let mut blocks = Vec::with_capacity(s.n_blocks());
        let mut sigma_chol = Vec::with_capacity(s.n_blocks());
        let mut omega_chol = Vec::with_capacity(s.n_blocks());
        for _ in 0..s.n_blocks() {
            let mut block = CovBlock::null(s);
            for &(j, f) in &self.free_loadings {
                block.lambda[(j, f)] = x[pos];
                pos += 1;
            }
            if s.variant == Variant::Sat {
                let l = chol_from_unconstrained(&x[pos..pos + tri(s.p_c)], s.p_c);
                pos += tri(s.p_c);
                block.sigma = Some(&l * l.transpose());
                sigma_chol.push(Some(l));
            } else {
                for j in 0..s.p_c {
                    block.psi[j] = x[pos].exp();
                    pos += 1;
                }
                sigma_chol.push(None);
            }
            if s.variant.correlated_factors() && k == 2 {
                let rho = x[pos].tanh();
                pos += 1;
                block.phi[(0, 1)] = rho;
                block.phi[(1, 0)] = rho;
            }
            if s.variant.has_residual_effects() {
                let l = chol_from_unconstrained(&x[pos..pos + tri(s.p_b)], s.p_b);
                pos += tri(s.p_b);
                block.omega = Some(&l * l.transpose());
                omega_chol.push(Some(l));
            } else {
                omega_chol.push(None);
            }
            blocks.push(block);
        }
        let theta = Theta { alpha, blocks };
        let finite = theta.alpha.iter().all(|v| v.is_finite())
            && theta.blocks.iter().all(|b| {
                b.lambda.iter().all(|v| v.is_finite())
                    && b.psi.iter().all(|v| v.is_finite() && *v > 0.0)
                    && b.phi.iter().all(|v| v.is_finite() && v.abs() <= 1.0)
                    && b.rho().abs() < 1.0
                    && b.omega.as_ref().is_none_or(|o| o.iter().all(|v| v.is_finite()))
                    && b.sigma.as_ref().is_none_or(|o| o.iter().all(|v| v.is_finite()))
            });
        finite.then_some(Unpacked {
            theta,
            sigma_chol,
            omega_chol,
        })
    }

    pub fn constrain(&self, x: &[f64]) -> Result<Theta> {
        if x.len() < self.dim() {
            return Err(Error::Model("unconstrained vector too short".into()));
        }
        self.unpack(x)
            .map(|u| u.theta)
            .ok_or_else(|| Error::Model("unconstrained vector maps outside the parameter space".into()))
    }

    pub fn unconstrain(&self, theta: &Theta) -> Result<DVector<f64>> {
        theta.validate(&self.spec)?;
        let s = &self.spec;
        let mut out = Vec::with_capacity(self.dim());
        for g in 0..s.n_groups {
            for j in 0..s.p() {
                out.push(theta.alpha[(g, j)]);
            }
        }
        for b in &theta.blocks {
            for &(j, f) in &self.free_loadings {
                out.push(b.lambda[(j, f)]);
            }
            if s.variant == Variant::Sat {
                chol_to_unconstrained(b.sigma.as_ref().expect("validated"), "sigma", &mut out)?;
            } else {
                out.extend(b.psi.iter().map(|v| v.ln()));
            }
            if s.variant.correlated_factors() {
                out.push(b.rho().atanh());
            }
            if s.variant.has_residual_effects() {
                chol_to_unconstrained(b.omega.as_ref().expect("validated"), "omega", &mut out)?;
            }
        }
        Ok(DVector::from_vec(out))
    }

    /// Log absolute Jacobian determinant of the map x ↦ θ, adding its
    /// gradient into `grad` when given.
    pub fn log_jacobian(&self, x: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        let s = &self.spec;
        let mut pos = s.n_groups * s.p();
        let mut lj = 0.0;
        for _ in 0..s.n_blocks() {
            pos += self.free_loadings.len();
            if s.variant == Variant::Sat {
                let n = tri(s.p_c);
                lj += chol_log_jacobian(&x[pos..pos + n], s.p_c, grad.as_deref_mut().map(|g| &mut g[pos..pos + n]));
                pos += n;
            } else {
                for _ in 0..s.p_c {
                    lj += x[pos];
                    if let Some(g) = grad.as_deref_mut() {
                        g[pos] += 1.0;
                    }
                    pos += 1;
                }
            }
            if s.variant.correlated_factors() {
                let rho = x[pos].tanh();
                lj += (1.0 - rho * rho).ln();
                if let Some(g) = grad.as_deref_mut() {
                    g[pos] -= 2.0 * rho;
                }
                pos += 1;
            }
            if s.variant.has_residual_effects() {
                let n = tri(s.p_b);
                lj += chol_log_jacobian(&x[pos..pos + n], s.p_b, grad.as_deref_mut().map(|g| &mut g[pos..pos + n]));
                pos += n;
            }
        }
        lj
    }

    /// Adds the gradient in x implied by `tg` (a gradient in θ) into `out`.
    pub fn pullback(&self, unpacked: &Unpacked, tg: &ThetaGrad, out: &mut [f64]) {
        let s = &self.spec;
        let theta = &unpacked.theta;
        let mut pos = 0;
        for g in 0..s.n_groups {
            for j in 0..s.p() {
                out[pos] += tg.alpha[(g, j)];
                pos += 1;
            }
        }
        for (b, block) in theta.blocks.iter().enumerate() {
            let bg = &tg.blocks[b];
            for &(j, f) in &self.free_loadings {
                out[pos] += bg.lambda[(j, f)];
                pos += 1;
            }
            if s.variant == Variant::Sat {
                let n = tri(s.p_c);
                let l = unpacked.sigma_chol[b].as_ref().expect("SAT factor");
                chol_pullback(l, &bg.sigma, None, &mut out[pos..pos + n]);
                pos += n;
            } else {
                for j in 0..s.p_c {
                    out[pos] += bg.psi[j] * block.psi[j];
                    pos += 1;
                }
            }
            if s.variant.correlated_factors() {
                let rho = block.rho();
                out[pos] += tg.rho_total(b) * (1.0 - rho * rho);
                pos += 1;
            }
            if s.variant.has_residual_effects() {
                let n = tri(s.p_b);
                let l = unpacked.omega_chol[b].as_ref().expect("AZ factor");
                chol_pullback(l, &bg.omega, Some(&bg.omega_chol), &mut out[pos..pos + n]);
                pos += n;
            }
        }
    }

    /// Number of reported (constrained-scale) quantities.
    pub fn n_reported(&self) -> usize {
        let s = &self.spec;
        let mut per = self.free_loadings.len();
        per += if s.variant == Variant::Sat { tri(s.p_c) } else { s.p_c };
        if s.variant.correlated_factors() {
            per += 1;
        }
        if s.variant.has_residual_effects() {
            per += tri(s.p_b);
        }
        s.n_groups * s.p() + s.n_blocks() * per
    }

    /// Constrained-scale quantities in reporting order.
    pub fn reported_values(&self, theta: &Theta) -> Vec<f64> {
        let s = &self.spec;
        let mut out = Vec::with_capacity(self.n_reported());
        for g in 0..s.n_groups {
            for j in 0..s.p() {
                out.push(theta.alpha[(g, j)]);
            }
        }
        for b in &theta.blocks {
            for &(j, f) in &self.free_loadings {
                out.push(b.lambda[(j, f)]);
            }
            match &b.sigma {
                Some(sig) if s.variant == Variant::Sat => lower_entries(sig, &mut out),
                _ => out.extend(b.psi.iter().copied()),
            }
            if s.variant.correlated_factors() {
                out.push(b.rho());
            }
            if let Some(o) = b.omega.as_ref().filter(|_| s.variant.has_residual_effects()) {
                lower_entries(o, &mut out);
            }
        }
        out
    }

    /// Inverse of [`Layout::reported_values`].
    pub fn theta_from_reported(&self, values: &[f64]) -> Result<Theta> {
        let s = &self.spec;
        if values.len() != self.n_reported() {
            return Err(Error::Model(format!(
                "expected {} parameter values for {}, found {}",
                self.n_reported(),
                s.name(),
                values.len()
            )));
        }
        let mut it = values.iter().copied();
        let mut next = || it.next().expect("length checked");
        let mut theta = Theta::null(s);
        for g in 0..s.n_groups {
            for j in 0..s.p() {
                theta.alpha[(g, j)] = next();
            }
        }
        let read_sym = |p: usize, next: &mut dyn FnMut() -> f64| {
            let mut m = DMatrix::zeros(p, p);
            for i in 0..p {
                for j in 0..=i {
                    let v = next();
                    m[(i, j)] = v;
                    m[(j, i)] = v;
                }
            }
            m
        };
        for block in &mut theta.blocks {
            for &(j, f) in &self.free_loadings {
                block.lambda[(j, f)] = next();
            }
            if s.variant == Variant::Sat {
                block.sigma = Some(read_sym(s.p_c, &mut next));
            } else {
                for j in 0..s.p_c {
                    block.psi[j] = next();
                }
            }
            if s.variant.correlated_factors() {
                let rho = next();
                block.phi[(0, 1)] = rho;
                block.phi[(1, 0)] = rho;
            }
            if s.variant.has_residual_effects() {
                block.omega = Some(read_sym(s.p_b, &mut next));
            }
        }
        theta.validate(s)?;
        Ok(theta)
    }

    /// Names matching [`Layout::reported_values`]; unpooled blocks carry
    /// an `@group` suffix.
    pub fn parameter_names(&self, schema: &OutcomeSchema) -> Vec<String> {
        let s = &self.spec;
        let items: Vec<&str> = schema.items().iter().map(|i| i.name.as_str()).collect();
        let groups = schema.group_labels();
        let mut out = Vec::with_capacity(self.n_reported());
        for g in groups.iter().take(s.n_groups) {
            for item in items.iter().take(s.p()) {
                out.push(format!("alpha[{g},{item}]"));
            }
        }
        for b in 0..s.n_blocks() {
            let suffix = if s.pooled { String::new() } else { format!("@{}", groups[b]) };
            for &(j, f) in &self.free_loadings {
                out.push(format!("lambda[{},{}]{suffix}", items[j], f + 1));
            }
            if s.variant == Variant::Sat {
                for i in 0..s.p_c {
                    for j in 0..=i {
                        out.push(format!("sigma[{},{}]{suffix}", items[i], items[j]));
                    }
                }
            } else {
                for item in items.iter().take(s.p_c) {
                    out.push(format!("psi2[{item}]{suffix}"));
                }
            }
            if s.variant.correlated_factors() {
                out.push(format!("rho{suffix}"));
            }
            if s.variant.has_residual_effects() {
                for i in 0..s.p_b {
                    for j in 0..=i {
                        out.push(format!("omega[{},{}]{suffix}", items[s.p_c + i], items[s.p_c + j]));
                    }
                }
            }
        }
        out
    }
}
