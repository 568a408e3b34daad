//! Batch posterior fits: several HMC chains on the augmented posterior,
//! mapped back to constrained parameters and sign-aligned.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::linalg::weighted_quantile;
use crate::mcmc::{run_chain, KernelConfig, LogDensity};
use crate::model::{sign_postprocess, Layout, LoadingKind, ModelSpec, PosteriorTarget, Prior, PriorConfig, Theta, Variant};
use crate::rng::{derive_seed, stream, tag};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub chains: usize,
    pub warmup: usize,
    pub samples: usize,
    /// Keep every `thin`-th post-warmup draw.
    pub thin: usize,
    pub kernel: KernelConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            chains: 4,
            warmup: 1000,
            samples: 1000,
            thin: 1,
            kernel: KernelConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainDiagnostics {
    pub step_size: f64,
    pub accept_rate: f64,
    pub divergences: usize,
    pub warmup_divergences: usize,
}

/// Equally weighted posterior draws of θ.
#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    pub spec: ModelSpec,
    pub names: Vec<String>,
    pub thetas: Vec<Theta>,
    /// Chain index of each draw.
    pub chain: Vec<usize>,
    pub diagnostics: Vec<ChainDiagnostics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub median: f64,
    pub q975: f64,
    /// Split-chain potential scale reduction (NaN with fewer than 4 draws per chain).
    pub rhat: f64,
}

/// Data-informed starting point on the unconstrained scale, with small
/// uniform noise so that chains start apart.
pub fn initial_point(spec: &ModelSpec, data: &Dataset, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let layout = Layout::new(spec);
    let mut theta = Theta::null(spec);
    let counts = data.group_counts();
    let mut sums = vec![vec![0.0; spec.p()]; spec.n_groups];
    for row in data.rows() {
        for (j, v) in row.y.iter().enumerate() {
            sums[row.group][j] += v;
        }
    }
    let s_y = data.pooled_continuous_covariance();
    for g in 0..spec.n_groups {
        let n = counts[g].max(1) as f64;
        for j in 0..spec.p() {
            let m = sums[g][j] / n;
            theta.alpha[(g, j)] = if j < spec.p_c {
                m
            } else {
                let p = ((m * n + 0.5) / (n + 1.0)).clamp(0.01, 0.99);
                (p / (1.0 - p)).ln()
            };
        }
    }
    for block in &mut theta.blocks {
        for j in 0..spec.p() {
            for f in 0..spec.k() {
                if spec.loading_kind(j, f) == LoadingKind::Principal {
                    block.lambda[(j, f)] = 0.5;
                }
            }
        }
        if spec.variant == Variant::Sat {
            block.sigma = Some(s_y.clone());
        } else {
            for j in 0..spec.p_c {
                block.psi[j] = 0.5 * s_y[(j, j)].max(1e-6);
            }
        }
    }
    let mut x: Vec<f64> = layout.unconstrain(&theta)?.iter().copied().collect();
    for v in x.iter_mut() {
        *v += rng.random_range(-0.1..0.1);
    }
    x.extend(std::iter::repeat_n(0.0, data.n() * spec.latent_dim()));
    Ok(x)
}

/// Runs `cfg.chains` chains in parallel on the posterior of `spec` given
/// `data`. Deterministic given `seed`, whatever the worker count.
pub fn fit_batch(spec: &ModelSpec, prior_cfg: &PriorConfig, data: &Dataset, cfg: &FitConfig, seed: u64) -> Result<PosteriorDraws> {
    if cfg.chains == 0 || cfg.thin == 0 {
        return Err(Error::Config("chains and thin must be at least 1".into()));
    }
    let prior = Prior::resolve(prior_cfg, spec, &data.pooled_continuous_covariance())?;
    let target = PosteriorTarget::all_rows(spec, &prior, data);
    let layout = target.layout().clone();
    let d = layout.dim();
    let outputs = (0..cfg.chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream(seed, &[tag::INIT, c as u64]);
            let mut init = initial_point(spec, data, &mut rng)?;
            // Retry a few perturbed starts if the first is not finite.
            for _ in 0..10 {
                if target.log_density(&init).is_finite() {
                    break;
                }
                init = initial_point(spec, data, &mut rng)?;
            }
            run_chain(init, &target, &cfg.kernel, cfg.warmup, cfg.samples, derive_seed(seed, &[tag::CHAIN, c as u64]))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut thetas = Vec::new();
    let mut chain = Vec::new();
    let mut diagnostics = Vec::new();
    for (c, out) in outputs.iter().enumerate() {
        for x in out.draws.iter().step_by(cfg.thin) {
            thetas.push(layout.constrain(&x[..d])?);
            chain.push(c);
        }
        diagnostics.push(ChainDiagnostics {
            step_size: out.step_size,
            accept_rate: out.accept_rate,
            divergences: out.divergences,
            warmup_divergences: out.warmup_divergences,
        });
    }
    sign_postprocess(&mut thetas, spec);
    Ok(PosteriorDraws {
        spec: spec.clone(),
        names: layout.parameter_names(data.schema()),
        thetas,
        chain,
        diagnostics,
    })
}

fn split_rhat(per_chain: &[Vec<f64>]) -> f64 {
    let mut halves = Vec::new();
    for c in per_chain {
        let h = c.len() / 2;
        if h < 2 {
            return f64::NAN;
        }
        halves.push(&c[..h]);
        halves.push(&c[c.len() - h..]);
    }
    let n = halves.iter().map(|h| h.len()).min().unwrap_or(0) as f64;
    let m = halves.len() as f64;
    let means: Vec<f64> = halves.iter().map(|h| h.iter().sum::<f64>() / h.len() as f64).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = halves
        .iter()
        .zip(&means)
        .map(|(h, mu)| h.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (h.len() as f64 - 1.0))
        .sum::<f64>()
        / m;
    if w <= 0.0 {
        return 1.0;
    }
    (((n - 1.0) / n * w + b / n) / w).sqrt()
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.spec)
    }

    /// Reported values, one row per draw.
    pub fn values(&self) -> Vec<Vec<f64>> {
        let layout = self.layout();
        self.thetas.iter().map(|t| layout.reported_values(t)).collect()
    }

    pub fn summary(&self) -> Vec<ParamSummary> {
        let values = self.values();
        let n_chains = self.chain.iter().copied().max().map_or(0, |c| c + 1);
        let w = vec![1.0; values.len()];
        (0..self.names.len())
            .map(|p| {
                let col: Vec<f64> = values.iter().map(|v| v[p]).collect();
                let n = col.len() as f64;
                let mean = col.iter().sum::<f64>() / n;
                let sd = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
                let mut per_chain = vec![Vec::new(); n_chains];
                for (i, x) in col.iter().enumerate() {
                    per_chain[self.chain[i]].push(*x);
                }
                ParamSummary {
                    name: self.names[p].clone(),
                    mean,
                    sd,
                    q025: weighted_quantile(&col, &w, 0.025),
                    median: weighted_quantile(&col, &w, 0.5),
                    q975: weighted_quantile(&col, &w, 0.975),
                    rhat: split_rhat(&per_chain),
                }
            })
            .collect()
    }

    /// Writes `chain,draw,<names...>` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["chain".to_string(), "draw".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for (i, v) in self.values().iter().enumerate() {
            let mut rec = vec![self.chain[i].to_string(), i.to_string()];
            rec.extend(v.iter().map(|x| format!("{x:?}")));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<draws>", e))?;
        Ok(())
    }
}

/// Writes a `parameter,q2.5,q97.5,mean,median,sd,rhat` table.
pub fn write_summary_csv<W: Write>(summary: &[ParamSummary], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["parameter", "q2.5", "q97.5", "mean", "median", "sd", "rhat"])?;
    for s in summary {
        w.write_record([
            s.name.clone(),
            format!("{:.6}", s.q025),
            format!("{:.6}", s.q975),
            format!("{:.6}", s.mean),
            format!("{:.6}", s.median),
            format!("{:.6}", s.sd),
            format!("{:.4}", s.rhat),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<summary>", e))?;
    Ok(())
}
