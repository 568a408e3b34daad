use nalgebra::{DMatrix, DVector};

use super::{LoadingKind, ModelSpec, Variant};
use crate::linalg::cholesky;
use crate::{Error, Result};

/// Covariance-structure parameters of one pooling block.
#[derive(Debug, Clone, PartialEq)]
pub struct CovBlock {
    /// p×k loadings (p×0 for SAT/IND).
    pub lambda: DMatrix<f64>,
    /// k×k factor correlation.
    pub phi: DMatrix<f64>,
    /// Idiosyncratic variances of the continuous items (factor models and IND).
    pub psi: DVector<f64>,
    /// p_b×p_b residual covariance of the binary items (AZ variants).
    pub omega: Option<DMatrix<f64>>,
    /// p_c×p_c covariance of the continuous items (SAT).
    pub sigma: Option<DMatrix<f64>>,
}

/// Full parameter vector: group intercepts plus one covariance block per
/// pooling block.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    /// R×p intercepts.
    pub alpha: DMatrix<f64>,
    pub blocks: Vec<CovBlock>,
}

impl CovBlock {
    /// Null block: zero free loadings, anchors at their fixed values,
    /// identity correlations and unit variances.
    pub fn null(spec: &ModelSpec) -> Self {
        let (p, k) = (spec.p(), spec.k());
        let mut lambda = DMatrix::zeros(p, k);
        for j in 0..p {
            for f in 0..k {
                if let LoadingKind::Fixed(v) = spec.loading_kind(j, f) {
                    lambda[(j, f)] = v;
                }
            }
        }
        let psi = if spec.variant == Variant::Sat {
            DVector::zeros(0)
        } else {
            DVector::from_element(spec.p_c, 1.0)
        };
        CovBlock {
            lambda,
            phi: DMatrix::identity(k, k),
            psi,
            omega: spec
                .variant
                .has_residual_effects()
                .then(|| DMatrix::identity(spec.p_b, spec.p_b)),
            sigma: (spec.variant == Variant::Sat).then(|| DMatrix::identity(spec.p_c, spec.p_c)),
        }
    }

    pub fn rho(&self) -> f64 {
        if self.phi.nrows() >= 2 {
            self.phi[(0, 1)]
        } else {
            0.0
        }
    }
}

impl Theta {
    pub fn null(spec: &ModelSpec) -> Self {
        Theta {
            alpha: DMatrix::zeros(spec.n_groups, spec.p()),
            blocks: (0..spec.n_blocks()).map(|_| CovBlock::null(spec)).collect(),
        }
    }

    pub fn block(&self, spec: &ModelSpec, group: usize) -> &CovBlock {
        &self.blocks[spec.block_of(group)]
    }

    /// Checks shapes, masks and positive-definiteness against `spec`.
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let (p, k) = (spec.p(), spec.k());
        if self.alpha.shape() != (spec.n_groups, p) {
            return Err(Error::Model(format!(
                "alpha has shape {:?}, expected {:?}",
                self.alpha.shape(),
                (spec.n_groups, p)
            )));
        }
        if self.blocks.len() != spec.n_blocks() {
            return Err(Error::Model(format!(
                "expected {} covariance blocks, found {}",
                spec.n_blocks(),
                self.blocks.len()
            )));
        }
        if self.alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::Model("non-finite intercept".into()));
        }
        for b in &self.blocks {
            if b.lambda.shape() != (p, k) || b.phi.shape() != (k, k) {
                return Err(Error::Model("loading or correlation matrix has wrong shape".into()));
            }
            for j in 0..p {
                for f in 0..k {
                    let v = b.lambda[(j, f)];
                    match spec.loading_kind(j, f) {
                        LoadingKind::Zero if v != 0.0 => {
                            return Err(Error::Model(format!("loading ({j},{f}) must be zero")))
                        }
                        LoadingKind::Fixed(x) if v != x => {
                            return Err(Error::Model(format!("anchor loading ({j},{f}) must be {x}")))
                        }
                        _ if !v.is_finite() => return Err(Error::Model("non-finite loading".into())),
                        _ => {}
                    }
                }
            }
            if k > 0 {
                if (0..k).any(|f| (b.phi[(f, f)] - 1.0).abs() > 1e-12) {
                    return Err(Error::Model("factor correlation must have unit diagonal".into()));
                }
                if !spec.variant.correlated_factors() && b.rho() != 0.0 {
                    return Err(Error::Model(format!("{} has independent factors", spec.name())));
                }
                if cholesky(&b.phi).is_none() {
                    return Err(Error::NotPositiveDefinite("phi"));
                }
            }
            if spec.variant == Variant::Sat {
                match &b.sigma {
                    Some(s) if s.shape() == (spec.p_c, spec.p_c) => {
                        if spec.p_c > 0 && cholesky(s).is_none() {
                            return Err(Error::NotPositiveDefinite("sigma"));
                        }
                    }
                    _ => return Err(Error::Model("SAT needs a continuous covariance".into())),
                }
            } else {
                if b.psi.len() != spec.p_c {
                    return Err(Error::Model("psi has wrong length".into()));
                }
                if b.psi.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                    return Err(Error::NotPositiveDefinite("psi"));
                }
            }
            if spec.variant.has_residual_effects() {
                match &b.omega {
                    Some(o) if o.shape() == (spec.p_b, spec.p_b) => {
                        if spec.p_b > 0 && cholesky(o).is_none() {
                            return Err(Error::NotPositiveDefinite("omega"));
                        }
                    }
                    _ => return Err(Error::Model("AZ variants need a residual covariance".into())),
                }
            }
        }
        Ok(())
    }
}

/// Gradient with respect to one covariance block.
///
/// Matrix-valued gradients of symmetric arguments (`phi`, `sigma`, `omega`)
/// are taken with respect to the full matrix evaluated at a symmetric point;
/// `*_chol` entries hold gradients taken directly with respect to a lower
/// Cholesky factor; `rho` holds direct derivatives in the factor correlation.
#[derive(Debug, Clone)]
pub struct BlockGrad {
    pub lambda: DMatrix<f64>,
    pub phi: DMatrix<f64>,
    pub rho: f64,
    pub psi: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub omega: DMatrix<f64>,
    pub omega_chol: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct ThetaGrad {
    pub alpha: DMatrix<f64>,
    pub blocks: Vec<BlockGrad>,
}

impl ThetaGrad {
    pub fn zeros(spec: &ModelSpec) -> Self {
        let (p, k) = (spec.p(), spec.k());
        let n_psi = if spec.variant == Variant::Sat { 0 } else { spec.p_c };
        let n_sigma = if spec.variant == Variant::Sat { spec.p_c } else { 0 };
        let n_omega = if spec.variant.has_residual_effects() { spec.p_b } else { 0 };
        ThetaGrad {
            alpha: DMatrix::zeros(spec.n_groups, p),
            blocks: (0..spec.n_blocks())
                .map(|_| BlockGrad {
                    lambda: DMatrix::zeros(p, k),
                    phi: DMatrix::zeros(k, k),
                    rho: 0.0,
                    psi: DVector::zeros(n_psi),
                    sigma: DMatrix::zeros(n_sigma, n_sigma),
                    omega: DMatrix::zeros(n_omega, n_omega),
                    omega_chol: DMatrix::zeros(n_omega, n_omega),
                })
                .collect(),
        }
    }

    /// Total derivative in the factor correlation of block `b`.
    pub fn rho_total(&self, b: usize) -> f64 {
        let g = &self.blocks[b];
        if g.phi.nrows() >= 2 {
            g.rho + g.phi[(0, 1)] + g.phi[(1, 0)]
        } else {
            g.rho
        }
    }
}
