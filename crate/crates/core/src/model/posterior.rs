//! Augmented posterior π(θ, latents | y) on the unconstrained scale.
//!
//! Latent factors enter in non-centred form. The continuous factor is
//! integrated out analytically whenever the binary items do not load on
//! it, so each subject carries only the latents the binary items need:
//!
//! | case            | latents per subject       | continuous covariance |
//! |-----------------|---------------------------|-----------------------|
//! | `None`          | none                      | Λ_c Φ Λ_cᵀ + Ψ        |
//! | `BinaryFactor`  | z₂                        | (1−ρ²) l lᵀ + Ψ       |
//! | `Both`          | z = L_Φ z̃                 | Ψ                     |
//!
//! AZ variants add binary residual effects u = L_Ω ũ.

use nalgebra::DMatrix;

use super::likelihood::{block_marginal_covariance, pull_marginal_cov_grad, ContinuousBlock};
use super::{log_prior, LatentFactors, Layout, ModelSpec, Prior, ThetaGrad};
use crate::data::Dataset;
use crate::linalg::{bernoulli_logit_lpmf_grad, LN_2PI};
use crate::mcmc::LogDensity;
use crate::Result;

#[derive(Debug, Clone)]
pub struct PosteriorTarget<'a> {
    spec: &'a ModelSpec,
    layout: Layout,
    prior: &'a Prior,
    data: &'a Dataset,
    rows: Vec<usize>,
}

impl<'a> PosteriorTarget<'a> {
    /// Target over the rows `rows` of `data`; latent block t belongs to
    /// `rows[t]`.
    pub fn new(spec: &'a ModelSpec, prior: &'a Prior, data: &'a Dataset, rows: Vec<usize>) -> Self {
        PosteriorTarget {
            spec,
            layout: Layout::new(spec),
            prior,
            data,
            rows,
        }
    }

    pub fn all_rows(spec: &'a ModelSpec, prior: &'a Prior, data: &'a Dataset) -> Self {
        Self::new(spec, prior, data, (0..data.n()).collect())
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn theta_dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim()
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    /// Per-block continuous covariance given the retained latents.
    fn continuous_blocks(&self, theta: &super::Theta) -> Result<Vec<ContinuousBlock>> {
        let pc = self.spec.p_c;
        theta
            .blocks
            .iter()
            .map(|b| {
                let cov = match self.spec.latent_factors() {
                    LatentFactors::None => block_marginal_covariance(b, self.spec),
                    LatentFactors::BinaryFactor => {
                        let l = b.lambda.view((0, 0), (pc, 1));
                        let rho = b.rho();
                        let mut c = l * l.transpose() * (1.0 - rho * rho);
                        for j in 0..pc {
                            c[(j, j)] += b.psi[j];
                        }
                        c
                    }
                    LatentFactors::Both => DMatrix::from_diagonal(&b.psi),
                };
                ContinuousBlock::new(cov)
            })
            .collect()
    }

    fn evaluate(&self, x: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        let spec = self.spec;
        let d = self.layout.dim();
        let q = spec.latent_dim();
        let Some(unpacked) = self.layout.unpack(&x[..d]) else {
            return f64::NEG_INFINITY;
        };
        let theta = &unpacked.theta;
        let want = grad.is_some();
        let mut tg = ThetaGrad::zeros(spec);
        let mut lp = match log_prior(theta, spec, self.prior, want.then_some(&mut tg)) {
            Ok(v) => v,
            Err(_) => return f64::NEG_INFINITY,
        };
        lp += self.layout.log_jacobian(&x[..d], grad.as_deref_mut().map(|g| &mut g[..d]));
        let Ok(blocks) = self.continuous_blocks(theta) else {
            return f64::NEG_INFINITY;
        };

        let (pc, pb, k) = (spec.p_c, spec.p_b, spec.k());
        let p = pc + pb;
        let case = spec.latent_factors();
        let n_z = match case {
            LatentFactors::None => 0,
            LatentFactors::BinaryFactor => 1,
            LatentFactors::Both => 2,
        };
        let has_u = spec.variant.has_residual_effects() && pb > 0;
        let nb = theta.blocks.len();

        // Flat row-major copies keep the per-subject loop free of
        // allocation and matrix indexing.
        let alpha: Vec<f64> = (0..spec.n_groups).flat_map(|r| (0..p).map(move |j| theta.alpha[(r, j)])).collect();
        let lam: Vec<Vec<f64>> = theta
            .blocks
            .iter()
            .map(|b| (0..p).flat_map(|j| (0..k).map(move |f| b.lambda[(j, f)])).collect())
            .collect();
        let inv: Vec<&[f64]> = blocks.iter().map(|c| c.inv.as_slice()).collect();
        let log_norm: Vec<f64> = blocks.iter().map(|c| -0.5 * (pc as f64 * LN_2PI + c.log_det)).collect();
        let rhos: Vec<f64> = theta.blocks.iter().map(|b| b.rho()).collect();
        let mut g_alpha = vec![0.0; alpha.len()];
        let mut g_lam = vec![vec![0.0; p * k]; nb];
        let mut g_rho = vec![0.0; nb];
        let mut scatter = vec![vec![0.0; pc * pc]; nb];
        let mut counts = vec![0.0; nb];
        let mut resid = vec![0.0; pc];
        let mut w = vec![0.0; pc];
        let mut u = vec![0.0; pb];
        let mut du = vec![0.0; pb];

        for (t, &row_idx) in self.rows.iter().enumerate() {
            let row = &self.data.rows()[row_idx];
            let r = row.group;
            let b = spec.block_of(r);
            let rho = rhos[b];
            let lb = &lam[b];
            let ar = &alpha[r * p..(r + 1) * p];
            let xt = &x[d + t * q..d + (t + 1) * q];

            lp -= 0.5 * (q as f64 * LN_2PI + xt.iter().map(|v| v * v).sum::<f64>());

            let mut z = [0.0; 2];
            let mut dz = [0.0; 2];
            let s = (1.0 - rho * rho).sqrt();
            match case {
                LatentFactors::None => {}
                LatentFactors::BinaryFactor => z[1] = xt[0],
                LatentFactors::Both => {
                    z[0] = xt[0];
                    z[1] = rho * xt[0] + s * xt[1];
                }
            }
            if has_u {
                let l = unpacked.omega_chol[b].as_ref().expect("residual factor");
                for jb in 0..pb {
                    u[jb] = (0..=jb).map(|c| l[(jb, c)] * xt[n_z + c]).sum();
                }
            }

            if pc > 0 {
                for j in 0..pc {
                    let shift = match case {
                        LatentFactors::None => 0.0,
                        LatentFactors::BinaryFactor => rho * z[1] * lb[j * k],
                        LatentFactors::Both => lb[j * k] * z[0] + lb[j * k + 1] * z[1],
                    };
                    resid[j] = row.y[j] - ar[j] - shift;
                }
                let ib = inv[b];
                let mut quad = 0.0;
                for i in 0..pc {
                    let wi: f64 = (0..pc).map(|j| ib[i * pc + j] * resid[j]).sum();
                    w[i] = wi;
                    quad += wi * resid[i];
                }
                lp += log_norm[b] - 0.5 * quad;
                if want {
                    let ga = &mut g_alpha[r * p..r * p + pc];
                    for j in 0..pc {
                        ga[j] += w[j];
                    }
                    let sc = &mut scatter[b];
                    for i in 0..pc {
                        for j in 0..pc {
                            sc[i * pc + j] += resid[i] * resid[j];
                        }
                    }
                    counts[b] += 1.0;
                    let gl = &mut g_lam[b];
                    match case {
                        LatentFactors::None => {}
                        LatentFactors::BinaryFactor => {
                            let lw: f64 = (0..pc).map(|j| lb[j * k] * w[j]).sum();
                            for j in 0..pc {
                                gl[j * k] += rho * z[1] * w[j];
                            }
                            g_rho[b] += z[1] * lw;
                            dz[1] += rho * lw;
                        }
                        LatentFactors::Both => {
                            for j in 0..pc {
                                for f in 0..2 {
                                    gl[j * k + f] += w[j] * z[f];
                                    dz[f] += lb[j * k + f] * w[j];
                                }
                            }
                        }
                    }
                }
            }

            for jb in 0..pb {
                let item = pc + jb;
                let mut eta = ar[item];
                for f in 0..k {
                    eta += lb[item * k + f] * z[f];
                }
                if has_u {
                    eta += u[jb];
                }
                let (lpj, e) = bernoulli_logit_lpmf_grad(row.y[item], eta);
                lp += lpj;
                if want {
                    g_alpha[r * p + item] += e;
                    for f in 0..k {
                        g_lam[b][item * k + f] += e * z[f];
                        dz[f] += e * lb[item * k + f];
                    }
                    du[jb] = e;
                }
            }

            if let Some(g) = grad.as_deref_mut() {
                let gt = &mut g[d + t * q..d + (t + 1) * q];
                for (gi, xi) in gt.iter_mut().zip(xt) {
                    *gi -= xi;
                }
                match case {
                    LatentFactors::None => {}
                    LatentFactors::BinaryFactor => gt[0] += dz[1],
                    LatentFactors::Both => {
                        gt[0] += dz[0] + rho * dz[1];
                        gt[1] += s * dz[1];
                        g_rho[b] += dz[1] * (xt[0] - rho / s * xt[1]);
                    }
                }
                if has_u {
                    let l = unpacked.omega_chol[b].as_ref().expect("residual factor");
                    for c in 0..pb {
                        gt[n_z + c] += (c..pb).map(|jb| l[(jb, c)] * du[jb]).sum::<f64>();
                    }
                    for jb in 0..pb {
                        for c in 0..=jb {
                            tg.blocks[b].omega_chol[(jb, c)] += du[jb] * xt[n_z + c];
                        }
                    }
                }
            }
        }

        if want {
            for r in 0..spec.n_groups {
                for j in 0..p {
                    tg.alpha[(r, j)] += g_alpha[r * p + j];
                }
            }
            for b in 0..nb {
                for j in 0..p {
                    for f in 0..k {
                        tg.blocks[b].lambda[(j, f)] += g_lam[b][j * k + f];
                    }
                }
                tg.blocks[b].rho += g_rho[b];
            }
        }

        if let Some(g) = grad {
            if pc > 0 {
                for b in 0..nb {
                    let gc = blocks[b].cov_grad(&DMatrix::from_row_slice(pc, pc, &scatter[b]), counts[b]);
                    let block = &theta.blocks[b];
                    match case {
                        LatentFactors::None => pull_marginal_cov_grad(spec, block, &gc, &mut tg.blocks[b]),
                        LatentFactors::BinaryFactor => {
                            let rho = block.rho();
                            let l = block.lambda.view((0, 0), (pc, 1)).into_owned();
                            let gl = &gc * &l;
                            for j in 0..pc {
                                tg.blocks[b].lambda[(j, 0)] += 2.0 * (1.0 - rho * rho) * gl[j];
                                tg.blocks[b].psi[j] += gc[(j, j)];
                            }
                            tg.blocks[b].rho -= 2.0 * rho * l.dot(&gl);
                        }
                        LatentFactors::Both => {
                            for j in 0..pc {
                                tg.blocks[b].psi[j] += gc[(j, j)];
                            }
                        }
                    }
                }
            }
            self.layout.pullback(&unpacked, &tg, &mut g[..d]);
        }
        lp
    }
}

impl LogDensity for PosteriorTarget<'_> {
    fn dim(&self) -> usize {
        self.layout.dim() + self.rows.len() * self.spec.latent_dim()
    }

    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let lp = self.evaluate(x, Some(grad));
        if !lp.is_finite() {
            grad.iter_mut().for_each(|g| *g = 0.0);
        }
        lp
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        self.evaluate(x, None)
    }
}
