//! Model assessment.
//!
//! Fit is checked with posterior predictive p-values, separately for the
//! two data types: a likelihood-ratio discrepancy between sample and
//! model-implied covariances for continuous items and the G² statistic over
//! binary response patterns. Predictive performance is the k-fold
//! cross-validated log score, with the predictive density estimated by a
//! mixture over posterior draws, again split by type.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{simulate_with_schema, split_folds, Dataset};
use crate::fit::{fit_batch, FitConfig};
use crate::linalg::{cholesky, log_det_chol, log_sum_exp, sample_covariance, sigmoid};
use crate::model::{marginal_blocks, marginal_covariance, ContinuousBlock, ModelSpec, PriorConfig, Theta};
use crate::rng::{derive_seed, stream, tag};
use crate::{Error, Result};

/// Largest binary block whose patterns are enumerated.
pub const MAX_PATTERN_ITEMS: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssessConfig {
    pub folds: usize,
    /// Use every `ppp_thin`-th posterior draw for predictive checks.
    pub ppp_thin: usize,
    /// Latent draws behind the pattern probabilities of the G² check.
    pub n_mc_ppp: usize,
    /// Latent draws per posterior draw in the binary log score.
    pub n_mc_score: usize,
}

impl Default for AssessConfig {
    fn default() -> Self {
        AssessConfig {
            folds: 3,
            ppp_thin: 5,
            n_mc_ppp: 100_000,
            n_mc_score: 1000,
        }
    }
}

impl AssessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 || self.ppp_thin == 0 || self.n_mc_ppp == 0 || self.n_mc_score == 0 {
            return Err(Error::Config("assess: folds ≥ 2 and positive thinning and Monte Carlo sizes required".into()));
        }
        Ok(())
    }
}

/// (n−1)·{log|Σ| + tr(SΣ⁻¹) − log|S| − p}.
pub fn discrepancy_lrt(s: &DMatrix<f64>, sigma: &DMatrix<f64>, n: usize) -> Result<f64> {
    let p = s.nrows() as f64;
    let cs = cholesky(s).ok_or(Error::NotPositiveDefinite("sample covariance"))?;
    let cm = cholesky(sigma).ok_or(Error::NotPositiveDefinite("model covariance"))?;
    let tr = cm.solve(s).trace();
    Ok((n as f64 - 1.0) * (log_det_chol(&cm) + tr - log_det_chol(&cs) - p))
}

/// LRT discrepancy of the continuous block, summed over groups.
pub fn discrepancy_lrt_data(d: &Dataset, theta: &Theta, spec: &ModelSpec) -> Result<f64> {
    let mut total = 0.0;
    for g in 0..spec.n_groups {
        let rows: Vec<&[f64]> = d.rows().iter().filter(|r| r.group == g).map(|r| d.continuous(r)).collect();
        if rows.len() <= spec.p_c {
            return Err(Error::OutOfRange(format!(
                "group {g} has {} rows; the covariance check needs more than {}",
                rows.len(),
                spec.p_c
            )));
        }
        let s = sample_covariance(&rows);
        total += discrepancy_lrt(&s, &marginal_covariance(theta, spec, g), rows.len())?;
    }
    Ok(total)
}

/// Σ_r O_r log(O_r / (n π_r)), with empty cells contributing zero.
pub fn discrepancy_g2(observed: &[usize], probs: &[f64], n: usize) -> Result<f64> {
    if observed.len() != probs.len() {
        return Err(Error::OutOfRange("pattern counts and probabilities differ in length".into()));
    }
    let mut g2 = 0.0;
    for (r, (&o, &p)) in observed.iter().zip(probs).enumerate() {
        if o == 0 {
            continue;
        }
        if !(p > 0.0) {
            return Err(Error::ZeroPatternProbability { pattern: r, observed: o });
        }
        g2 += o as f64 * (o as f64 / (n as f64 * p)).ln();
    }
    Ok(g2)
}

/// Index of a binary response vector: item j sets bit j.
pub fn pattern_index(y_bin: &[f64]) -> usize {
    y_bin.iter().enumerate().fold(0, |acc, (j, &y)| acc | ((y > 0.5) as usize) << j)
}

/// Observed pattern counts per group.
pub fn pattern_counts(d: &Dataset) -> Vec<Vec<usize>> {
    let pb = d.schema().n_binary();
    let mut counts = vec![vec![0; 1 << pb]; d.schema().n_groups()];
    for r in d.rows() {
        counts[r.group][pattern_index(d.binary(r))] += 1;
    }
    counts
}

/// Standard normal draws shared across groups, patterns and parameter
/// draws (common random numbers).
#[derive(Debug, Clone)]
pub struct LatentDraws {
    /// n_mc × (k + p_b).
    xi: DMatrix<f64>,
}

impl LatentDraws {
    pub fn new(spec: &ModelSpec, n_mc: usize, seed: u64) -> Self {
        let width = spec.k() + if spec.variant.has_residual_effects() { spec.p_b } else { 0 };
        if width == 0 {
            return LatentDraws { xi: DMatrix::zeros(1, 0) };
        }
        let mut rng = stream(seed, &[tag::PATTERNS]);
        LatentDraws {
            xi: DMatrix::from_fn(n_mc, width, |_, _| rng.sample(StandardNormal)),
        }
    }

    pub fn len(&self) -> usize {
        self.xi.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.xi.nrows() == 0
    }
}

/// Probabilities of every binary response pattern in `group`, averaging
/// the conditional Bernoulli product over the latent factors and residual
/// effects. Exact when the model has no latent terms. Renormalised to sum
/// to one.
pub fn pattern_probs(theta: &Theta, spec: &ModelSpec, group: usize, draws: &LatentDraws) -> Result<Vec<f64>> {
    let pb = spec.p_b;
    if pb > MAX_PATTERN_ITEMS {
        return Err(Error::OutOfRange(format!("{pb} binary items exceed the enumeration bound {MAX_PATTERN_ITEMS}")));
    }
    let block = theta.block(spec, group);
    let k = spec.k();
    let lphi = if k > 0 {
        cholesky(&block.phi).ok_or(Error::NotPositiveDefinite("phi"))?.l()
    } else {
        DMatrix::zeros(0, 0)
    };
    let lomega = match &block.omega {
        Some(om) => Some(cholesky(om).ok_or(Error::NotPositiveDefinite("omega"))?.l()),
        None => None,
    };
    // Binary loadings composed with the factor Cholesky: η = α + B ξ_z + L_Ω ξ_u.
    let b = block.lambda.rows(spec.p_c, pb) * &lphi;
    let alpha: Vec<f64> = (0..pb).map(|j| theta.alpha[(group, spec.p_c + j)]).collect();

    let n_rows = if draws.xi.ncols() == 0 { 1 } else { draws.len() };
    let n_pat = 1usize << pb;
    let mut total = vec![0.0; n_pat];
    let mut buf = vec![0.0; n_pat];
    let mut p = vec![0.0; pb];
    for i in 0..n_rows {
        for j in 0..pb {
            let mut eta = alpha[j];
            for f in 0..k {
                eta += b[(j, f)] * draws.xi[(i, f)];
            }
            if let Some(lo) = &lomega {
                for c in 0..=j {
                    eta += lo[(j, c)] * draws.xi[(i, k + c)];
                }
            }
            p[j] = sigmoid(eta);
        }
        buf[0] = 1.0;
        for (j, &pj) in p.iter().enumerate() {
            let half = 1usize << j;
            for idx in 0..half {
                let v = buf[idx];
                buf[idx] = v * (1.0 - pj);
                buf[idx | half] = v * pj;
            }
        }
        for (t, v) in total.iter_mut().zip(&buf) {
            *t += v;
        }
    }
    let s: f64 = total.iter().sum();
    Ok(total.into_iter().map(|t| t / s).collect())
}

/// Convenience form of [`pattern_probs`] with fresh latent draws.
pub fn response_pattern_probs(theta: &Theta, spec: &ModelSpec, group: usize, n_mc: usize, seed: u64) -> Result<Vec<f64>> {
    pattern_probs(theta, spec, group, &LatentDraws::new(spec, n_mc, seed))
}

/// G² discrepancy of the binary block, summed over groups.
pub fn discrepancy_g2_data(counts: &[Vec<usize>], probs: &[Vec<f64>]) -> Result<f64> {
    counts
        .iter()
        .zip(probs)
        .map(|(o, p)| discrepancy_g2(o, p, o.iter().sum()))
        .sum()
}

/// Fraction of draws whose replicated discrepancy exceeds the observed
/// one; ties count one half.
pub fn ppp_from_discrepancies(observed: &[f64], replicated: &[f64]) -> f64 {
    let n = observed.len() as f64;
    observed
        .iter()
        .zip(replicated)
        .map(|(o, r)| {
            if o < r {
                1.0
            } else if o == r {
                0.5
            } else {
                0.0
            }
        })
        .sum::<f64>()
        / n
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataType {
    Continuous,
    Binary,
}

/// Posterior predictive p-values for both data types (NaN for a type the
/// model does not have). Replicated datasets keep the observed group sizes.
pub fn ppp_values(draws: &[Theta], data: &Dataset, spec: &ModelSpec, cfg: &AssessConfig, seed: u64) -> Result<(f64, f64)> {
    if draws.len() < 100 {
        return Err(Error::OutOfRange(format!("predictive checks need at least 100 draws, found {}", draws.len())));
    }
    let used: Vec<(usize, &Theta)> = draws.iter().enumerate().step_by(cfg.ppp_thin).collect();
    let counts = data.group_counts();
    let obs_patterns = pattern_counts(data);
    let latents = LatentDraws::new(spec, cfg.n_mc_ppp, seed);
    let pairs = used
        .par_iter()
        .map(|&(m, theta)| -> Result<[(f64, f64); 2]> {
            let rep = simulate_with_schema(data.schema(), spec, theta, &counts, derive_seed(seed, &[tag::PPP, m as u64]))?;
            let cont = if spec.p_c > 0 {
                (discrepancy_lrt_data(data, theta, spec)?, discrepancy_lrt_data(&rep, theta, spec)?)
            } else {
                (f64::NAN, f64::NAN)
            };
            let bin = if spec.p_b > 0 {
                let probs = (0..spec.n_groups)
                    .map(|g| pattern_probs(theta, spec, g, &latents))
                    .collect::<Result<Vec<_>>>()?;
                (discrepancy_g2_data(&obs_patterns, &probs)?, discrepancy_g2_data(&pattern_counts(&rep), &probs)?)
            } else {
                (f64::NAN, f64::NAN)
            };
            Ok([cont, bin])
        })
        .collect::<Result<Vec<_>>>()?;
    let ppp = |t: usize| {
        let (o, r): (Vec<f64>, Vec<f64>) = pairs.iter().map(|p| p[t]).unzip();
        if o.iter().any(|x| x.is_nan()) {
            f64::NAN
        } else {
            ppp_from_discrepancies(&o, &r)
        }
    };
    Ok((ppp(0), ppp(1)))
}

pub fn ppp_value(draws: &[Theta], data: &Dataset, spec: &ModelSpec, which: DataType, cfg: &AssessConfig, seed: u64) -> Result<f64> {
    let (c, b) = ppp_values(draws, data, spec, cfg, seed)?;
    Ok(match which {
        DataType::Continuous => c,
        DataType::Binary => b,
    })
}

/// Negative log predictive densities, by type. Smaller is better.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LogScore {
    pub continuous: f64,
    pub binary: f64,
}

impl LogScore {
    pub fn combined(&self) -> f64 {
        self.continuous + self.binary
    }
}

impl std::ops::AddAssign for LogScore {
    fn add_assign(&mut self, o: LogScore) {
        self.continuous += o.continuous;
        self.binary += o.binary;
    }
}

/// Per-draw quantities reused across test points.
struct DrawCache {
    blocks: Vec<ContinuousBlock>,
    /// Per group, probabilities of every pattern.
    patterns: Vec<Vec<f64>>,
}

fn draw_caches(draws: &[Theta], spec: &ModelSpec, n_mc: usize, seed: u64) -> Result<Vec<DrawCache>> {
    let latents = LatentDraws::new(spec, n_mc, seed);
    draws
        .par_iter()
        .map(|t| {
            Ok(DrawCache {
                blocks: if spec.p_c > 0 { marginal_blocks(t, spec)? } else { Vec::new() },
                patterns: if spec.p_b > 0 {
                    (0..spec.n_groups).map(|g| pattern_probs(t, spec, g, &latents)).collect::<Result<_>>()?
                } else {
                    Vec::new()
                },
            })
        })
        .collect()
}

fn score_row(y: &[f64], group: usize, draws: &[Theta], caches: &[DrawCache], spec: &ModelSpec) -> LogScore {
    let m = draws.len() as f64;
    let mut out = LogScore::default();
    if spec.p_c > 0 {
        let lp: Vec<f64> = draws
            .iter()
            .zip(caches)
            .map(|(t, c)| {
                let resid = DVector::from_iterator(spec.p_c, (0..spec.p_c).map(|j| y[j] - t.alpha[(group, j)]));
                c.blocks[spec.block_of(group)].logpdf(&resid)
            })
            .collect();
        out.continuous = -(log_sum_exp(&lp) - m.ln());
    }
    if spec.p_b > 0 {
        let r = pattern_index(&y[spec.p_c..]);
        let mean = caches.iter().map(|c| c.patterns[group][r]).sum::<f64>() / m;
        out.binary = -mean.ln();
    }
    out
}

/// Mixture-of-parameters log score of one subject: the predictive density
/// is the average over draws of the model density, for each type.
pub fn log_score_mp(y: &[f64], group: usize, draws: &[Theta], spec: &ModelSpec, n_mc: usize, seed: u64) -> Result<LogScore> {
    if draws.is_empty() {
        return Err(Error::OutOfRange("log score needs at least one posterior draw".into()));
    }
    let caches = draw_caches(draws, spec, n_mc, seed)?;
    Ok(score_row(y, group, draws, &caches, spec))
}

/// Summed log scores over every row of `test`.
pub fn log_score_dataset(test: &Dataset, draws: &[Theta], spec: &ModelSpec, n_mc: usize, seed: u64) -> Result<LogScore> {
    if draws.is_empty() {
        return Err(Error::OutOfRange("log score needs at least one posterior draw".into()));
    }
    let caches = draw_caches(draws, spec, n_mc, seed)?;
    let parts: Vec<LogScore> = test
        .rows()
        .par_iter()
        .map(|r| score_row(&r.y, r.group, draws, &caches, spec))
        .collect();
    let mut total = LogScore::default();
    for p in parts {
        total += p;
    }
    Ok(total)
}

/// Scores and checks for one model, in the layout of a comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct AssessmentReport {
    pub model: String,
    pub ls_continuous: f64,
    pub ls_binary: f64,
    pub ls_combined: f64,
    pub ppp_continuous: f64,
    pub ppp_binary: f64,
    pub folds: Vec<LogScore>,
}

/// k-fold cross-validated log scores. The fold split and every fit depend
/// only on `seed` and the fold index, so a model listed twice scores
/// identically. PPP fields are left NaN.
pub fn cv_log_scores(
    data: &Dataset,
    specs: &[ModelSpec],
    prior: &PriorConfig,
    fit: &FitConfig,
    cfg: &AssessConfig,
    seed: u64,
) -> Result<Vec<AssessmentReport>> {
    cfg.validate()?;
    let folds = split_folds(data, cfg.folds, seed)?;
    specs
        .iter()
        .map(|spec| {
            let per_fold = folds
                .par_iter()
                .enumerate()
                .map(|(f, (train, test))| {
                    let fold_seed = derive_seed(seed, &[tag::FOLD, f as u64]);
                    let draws = fit_batch(spec, prior, train, fit, fold_seed)?;
                    log_score_dataset(test, &draws.thetas, spec, cfg.n_mc_score, fold_seed)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut total = LogScore::default();
            for s in &per_fold {
                total += *s;
            }
            Ok(AssessmentReport {
                model: spec.name(),
                ls_continuous: total.continuous,
                ls_binary: total.binary,
                ls_combined: total.combined(),
                ppp_continuous: f64::NAN,
                ppp_binary: f64::NAN,
                folds: per_fold,
            })
        })
        .collect()
}

/// Cross-validated scores plus predictive checks from a full-data fit.
pub fn assess_models(
    data: &Dataset,
    specs: &[ModelSpec],
    prior: &PriorConfig,
    fit: &FitConfig,
    cfg: &AssessConfig,
    seed: u64,
) -> Result<Vec<AssessmentReport>> {
    let mut reports = cv_log_scores(data, specs, prior, fit, cfg, seed)?;
    for (spec, rep) in specs.iter().zip(reports.iter_mut()) {
        let draws = fit_batch(spec, prior, data, fit, seed)?;
        let (c, b) = ppp_values(&draws.thetas, data, spec, cfg, seed)?;
        rep.ppp_continuous = c;
        rep.ppp_binary = b;
    }
    Ok(reports)
}

fn fmt(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x:.4}")
    }
}

/// `model,Continuous-LS,Binary-LS,Combined,Continuous-PPP,Binary-PPP`.
pub fn write_report_csv<W: Write>(reports: &[AssessmentReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["model", "Continuous-LS", "Binary-LS", "Combined", "Continuous-PPP", "Binary-PPP"])?;
    for r in reports {
        w.write_record([
            r.model.clone(),
            fmt(r.ls_continuous),
            fmt(r.ls_binary),
            fmt(r.ls_combined),
            fmt(r.ppp_continuous),
            fmt(r.ppp_binary),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<report>", e))?;
    Ok(())
}

/// Per-fold breakdown: `model,fold,Continuous-LS,Binary-LS,Combined`.
pub fn write_folds_csv<W: Write>(reports: &[AssessmentReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["model", "fold", "Continuous-LS", "Binary-LS", "Combined"])?;
    for r in reports {
        for (f, s) in r.folds.iter().enumerate() {
            w.write_record([
                r.model.clone(),
                (f + 1).to_string(),
                fmt(s.continuous),
                fmt(s.binary),
                fmt(s.combined()),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<folds>", e))?;
    Ok(())
}
