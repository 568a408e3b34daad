use nalgebra::{DMatrix, DVector};

use super::{BlockGrad, CovBlock, ModelSpec, Theta, ThetaGrad, Variant};
use crate::data::Dataset;
use crate::linalg::{bernoulli_logit_lpmf, cholesky, log_det_chol, sigmoid, LN_2PI};
use crate::{Error, Result};

/// Covariance of the continuous items with every latent quantity
/// integrated out.
pub fn marginal_covariance(theta: &Theta, spec: &ModelSpec, group: usize) -> DMatrix<f64> {
    block_marginal_covariance(theta.block(spec, group), spec)
}

pub(crate) fn block_marginal_covariance(block: &CovBlock, spec: &ModelSpec) -> DMatrix<f64> {
    let pc = spec.p_c;
    match spec.variant {
        Variant::Sat => block.sigma.clone().unwrap_or_else(|| DMatrix::identity(pc, pc)),
        Variant::Ind => DMatrix::from_diagonal(&block.psi),
        _ => {
            let l = block.lambda.rows(0, pc);
            let mut c = l * &block.phi * l.transpose();
            for j in 0..pc {
                c[(j, j)] += block.psi[j];
            }
            c
        }
    }
}

/// Chain rule from a gradient in the marginal continuous covariance to the
/// block parameters.
pub(crate) fn pull_marginal_cov_grad(spec: &ModelSpec, block: &CovBlock, g_c: &DMatrix<f64>, bg: &mut BlockGrad) {
    let pc = spec.p_c;
    match spec.variant {
        Variant::Sat => bg.sigma += g_c,
        Variant::Ind => {
            for j in 0..pc {
                bg.psi[j] += g_c[(j, j)];
            }
        }
        _ => {
            let l = block.lambda.rows(0, pc).into_owned();
            let dl = g_c * &l * &block.phi * 2.0;
            let mut view = bg.lambda.rows_mut(0, pc);
            view += dl;
            bg.phi += l.transpose() * g_c * &l;
            for j in 0..pc {
                bg.psi[j] += g_c[(j, j)];
            }
        }
    }
}

/// Gaussian density for the continuous items with a fixed covariance.
#[derive(Debug, Clone)]
pub struct ContinuousBlock {
    pub cov: DMatrix<f64>,
    pub inv: DMatrix<f64>,
    pub log_det: f64,
}

impl ContinuousBlock {
    pub fn new(cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() == 0 {
            return Ok(ContinuousBlock {
                inv: cov.clone(),
                cov,
                log_det: 0.0,
            });
        }
        let ch = cholesky(&cov).ok_or(Error::NotPositiveDefinite("continuous covariance"))?;
        Ok(ContinuousBlock {
            log_det: log_det_chol(&ch),
            inv: ch.inverse(),
            cov,
        })
    }

    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    /// Log-density of a residual vector and C⁻¹r.
    pub fn logpdf_with_solve(&self, resid: &DVector<f64>) -> (f64, DVector<f64>) {
        let w = &self.inv * resid;
        let q = resid.dot(&w);
        (-0.5 * (self.dim() as f64 * LN_2PI + self.log_det + q), w)
    }

    pub fn logpdf(&self, resid: &DVector<f64>) -> f64 {
        self.logpdf_with_solve(resid).0
    }

    /// Gradient in the covariance given Σ r rᵀ over `n` residuals.
    pub fn cov_grad(&self, scatter: &DMatrix<f64>, n: f64) -> DMatrix<f64> {
        (&self.inv * scatter * &self.inv - &self.inv * n) * 0.5
    }
}

fn residual(y: &[f64], theta: &Theta, group: usize, pc: usize) -> DVector<f64> {
    DVector::from_iterator(pc, (0..pc).map(|j| y[j] - theta.alpha[(group, j)]))
}

/// Σ_i log N(y_i^cont | α_r^cont, marginal covariance of its block).
pub fn loglik_continuous_marginal(d: &Dataset, theta: &Theta, spec: &ModelSpec, mut grad: Option<&mut ThetaGrad>) -> Result<f64> {
    let pc = spec.p_c;
    if pc == 0 {
        return Ok(0.0);
    }
    let blocks = theta
        .blocks
        .iter()
        .map(|b| ContinuousBlock::new(block_marginal_covariance(b, spec)))
        .collect::<Result<Vec<_>>>()?;
    let nb = blocks.len();
    let mut scatter = vec![DMatrix::<f64>::zeros(pc, pc); nb];
    let mut counts = vec![0.0; nb];
    let mut ll = 0.0;
    for row in d.rows() {
        let b = spec.block_of(row.group);
        let r = residual(&row.y, theta, row.group, pc);
        let (l, w) = blocks[b].logpdf_with_solve(&r);
        ll += l;
        if let Some(g) = grad.as_deref_mut() {
            for j in 0..pc {
                g.alpha[(row.group, j)] += w[j];
            }
            scatter[b].ger(1.0, &r, &r, 1.0);
            counts[b] += 1.0;
        }
    }
    if let Some(g) = grad {
        for b in 0..nb {
            let gc = blocks[b].cov_grad(&scatter[b], counts[b]);
            pull_marginal_cov_grad(spec, &theta.blocks[b], &gc, &mut g.blocks[b]);
        }
    }
    Ok(ll)
}

/// Bernoulli-logit log-likelihood of the binary items given latent factor
/// scores `z` (length k) and optional residual effects `u`.
pub fn loglik_binary_conditional(
    y_bin: &[f64],
    theta: &Theta,
    spec: &ModelSpec,
    group: usize,
    z: &[f64],
    u: Option<&[f64]>,
    grad_z: Option<&mut [f64]>,
) -> f64 {
    let block = theta.block(spec, group);
    let pc = spec.p_c;
    let k = spec.k();
    let mut ll = 0.0;
    let mut gz = grad_z;
    for (j, &y) in y_bin.iter().enumerate() {
        let item = pc + j;
        let mut eta = theta.alpha[(group, item)];
        for f in 0..k.min(z.len()) {
            eta += block.lambda[(item, f)] * z[f];
        }
        if let Some(u) = u {
            eta += u[j];
        }
        ll += bernoulli_logit_lpmf(y, eta);
        if let Some(g) = gz.as_deref_mut() {
            let e = y - sigmoid(eta);
            for f in 0..k.min(g.len()) {
                g[f] += e * block.lambda[(item, f)];
            }
        }
    }
    ll
}

/// Log-likelihood of one row for a model whose latent factors do not
/// touch the binary items (SAT, IND, or no binary items): marginal
/// continuous density times independent Bernoulli terms at the intercepts.
pub fn row_loglik_marginal(y: &[f64], group: usize, theta: &Theta, spec: &ModelSpec, cont: &[ContinuousBlock]) -> f64 {
    let pc = spec.p_c;
    let mut ll = 0.0;
    if pc > 0 {
        ll += cont[spec.block_of(group)].logpdf(&residual(y, theta, group, pc));
    }
    for j in pc..spec.p() {
        ll += bernoulli_logit_lpmf(y[j], theta.alpha[(group, j)]);
    }
    ll
}

/// Marginal continuous blocks for every pooling block of `theta`.
pub fn marginal_blocks(theta: &Theta, spec: &ModelSpec) -> Result<Vec<ContinuousBlock>> {
    theta
        .blocks
        .iter()
        .map(|b| ContinuousBlock::new(block_marginal_covariance(b, spec)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Item, ItemKind, OutcomeSchema, Row};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn cont_schema(pc: usize, groups: usize) -> OutcomeSchema {
        let items = (0..pc)
            .map(|j| Item {
                name: format!("c{j}"),
                kind: ItemKind::Continuous,
            })
            .collect();
        OutcomeSchema::new(items, (0..groups).map(|g| format!("g{g}")).collect()).unwrap()
    }

    #[test]
    fn null_loadings_give_diagonal() {
        let spec = ModelSpec::parse("EZ1", 2, 4, 1).unwrap();
        let mut t = Theta::null(&spec);
        t.blocks[0].lambda[(0, 0)] = 0.0;
        t.blocks[0].psi = DVector::from_vec(vec![0.5, 2.0]);
        let c = marginal_covariance(&t, &spec, 0);
        assert_eq!(c, DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 2.0])));
    }

    #[test]
    fn hand_product_with_reference_loading() {
        let spec = ModelSpec::parse("EZ1-p", 2, 4, 3).unwrap();
        let mut t = Theta::null(&spec);
        t.blocks[0].lambda[(1, 0)] = 1.78;
        let c = marginal_covariance(&t, &spec, 1);
        let expect = DMatrix::from_row_slice(2, 2, &[2.0, 1.78, 1.78, 4.1684]);
        assert_relative_eq!(c, expect, epsilon = 1e-12);
    }

    #[test]
    fn sat_returns_sigma() {
        let spec = ModelSpec::parse("SAT", 2, 0, 1).unwrap();
        let mut t = Theta::null(&spec);
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.4, 0.4, 1.0]);
        t.blocks[0].sigma = Some(s.clone());
        assert_eq!(marginal_covariance(&t, &spec, 0), s);
    }

    #[test]
    fn standard_normal_single_item() {
        let schema = cont_schema(1, 1);
        let d = Dataset::new(
            schema,
            vec![Row {
                subject_id: "a".into(),
                group: 0,
                y: vec![0.0],
            }],
        )
        .unwrap();
        let spec = ModelSpec::parse("IND", 1, 0, 1).unwrap();
        let t = Theta::null(&spec);
        let ll = loglik_continuous_marginal(&d, &t, &spec, None).unwrap();
        assert_relative_eq!(ll, -0.5 * LN_2PI, epsilon = 1e-14);
    }

    #[test]
    fn binary_reference_all_zero_response() {
        let spec = ModelSpec::parse("EZ1-p", 2, 4, 1).unwrap();
        let mut t = Theta::null(&spec);
        let alpha = [-1.87, -2.27, -2.83, -5.19];
        for (j, a) in alpha.iter().enumerate() {
            t.alpha[(0, 2 + j)] = *a;
        }
        let ll = loglik_binary_conditional(&[0.0; 4], &t, &spec, 0, &[0.0, 0.0], None, None);
        let oracle: f64 = alpha.iter().map(|a| (1.0 - 1.0 / (1.0 + (-a).exp())).ln()).sum();
        assert_relative_eq!(ll, oracle, epsilon = 1e-12);
        assert!((ll - -0.304_552).abs() < 1e-5, "{ll}");
    }

    #[test]
    fn binary_limits() {
        let spec = ModelSpec::parse("IND", 0, 1, 1).unwrap();
        let mut t = Theta::null(&spec);
        assert_relative_eq!(
            loglik_binary_conditional(&[1.0], &t, &spec, 0, &[], None, None),
            0.5f64.ln(),
            epsilon = 1e-14
        );
        t.alpha[(0, 0)] = 800.0;
        assert!(loglik_binary_conditional(&[1.0], &t, &spec, 0, &[], None, None).abs() < 1e-300);
    }

    /// MC oracle: average the conditional density of a 2-item EZ1 block
    /// over prior draws of the continuous factor.
    #[test]
    fn marginal_matches_monte_carlo_integration() {
        let schema = cont_schema(2, 1);
        let y = vec![0.7, -1.1];
        let d = Dataset::new(
            schema,
            vec![Row {
                subject_id: "a".into(),
                group: 0,
                y: y.clone(),
            }],
        )
        .unwrap();
        let spec = ModelSpec::parse("EZ1", 2, 0, 1).unwrap();
        let mut t = Theta::null(&spec);
        t.alpha[(0, 0)] = 0.2;
        t.alpha[(0, 1)] = -0.3;
        t.blocks[0].lambda[(1, 0)] = 1.3;
        t.blocks[0].psi = DVector::from_vec(vec![0.6, 0.9]);
        let exact = loglik_continuous_marginal(&d, &t, &spec, None).unwrap().exp();

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 1_000_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            let mut dens = 1.0;
            for j in 0..2 {
                let m = t.alpha[(0, j)] + t.blocks[0].lambda[(j, 0)] * z;
                let v = t.blocks[0].psi[j];
                dens *= (-(y[j] - m).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
            }
            s1 += dens;
            s2 += dens * dens;
        }
        let mean = s1 / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - exact).abs() < 3.0 * se, "mc {mean} exact {exact} se {se}");
    }

    #[test]
    fn pooled_and_unpooled_agree_for_shared_theta() {
        let schema = cont_schema(2, 2);
        let rows = (0..6)
            .map(|i| Row {
                subject_id: i.to_string(),
                group: i % 2,
                y: vec![i as f64 * 0.3 - 0.5, 1.0 - i as f64 * 0.2],
            })
            .collect();
        let d = Dataset::new(schema, rows).unwrap();
        let pooled = ModelSpec::parse("EZ1-p", 2, 0, 2).unwrap();
        let unpooled = ModelSpec::parse("EZ1", 2, 0, 2).unwrap();
        let mut tp = Theta::null(&pooled);
        tp.blocks[0].lambda[(1, 0)] = 0.8;
        tp.blocks[0].psi[1] = 1.7;
        tp.alpha[(1, 0)] = 0.4;
        let tu = Theta {
            alpha: tp.alpha.clone(),
            blocks: vec![tp.blocks[0].clone(), tp.blocks[0].clone()],
        };
        let a = loglik_continuous_marginal(&d, &tp, &pooled, None).unwrap();
        let b = loglik_continuous_marginal(&d, &tu, &unpooled, None).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-12);
    }
}
