//! Benefit-risk scores: linear partial utilities over pre-specified outcome
//! ranges, combined with swing weights into one score per treatment.
//!
//! Posterior draws (or weighted particles) of θ map to draws of each
//! group's score. Pairwise superiority probabilities compare groups draw by
//! draw, and the sequential trace records when they first cross a threshold.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ItemKind, OutcomeSchema};
use crate::linalg::{gauss_hermite, sigmoid, weighted_quantile};
use crate::model::{ModelSpec, Theta};
use crate::smc::StepRecord;
use crate::{Error, Result};

const QUADRATURE_NODES: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    /// Larger values are better.
    Increasing,
    /// Smaller values are better.
    Decreasing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// Outcome scale of a continuous item.
    Raw,
    /// Event probability of a binary item.
    Probability,
}

/// How binary criteria turn intercepts into an event probability.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryEvaluation {
    /// σ(α), the probability for a subject with all latent terms at zero.
    #[default]
    AtZero,
    /// Population event probability with latent terms integrated out.
    Marginal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Criterion {
    pub name: String,
    pub weight: f64,
    /// `[low, high]` on the outcome scale.
    pub range: [f64; 2],
    pub orientation: Orientation,
    pub scale: Scale,
}

impl Criterion {
    pub fn worst(&self) -> f64 {
        match self.orientation {
            Orientation::Increasing => self.range[0],
            Orientation::Decreasing => self.range[1],
        }
    }

    pub fn best(&self) -> f64 {
        match self.orientation {
            Orientation::Increasing => self.range[1],
            Orientation::Decreasing => self.range[0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McdaConfig {
    pub criteria: Vec<Criterion>,
    #[serde(default)]
    pub binary_evaluation: BinaryEvaluation,
}

impl McdaConfig {
    /// Ranges and weights of the reference diabetes study. All six criteria
    /// are oriented so that smaller values are better.
    pub fn diabetes_reference() -> Self {
        let c = |name: &str, weight, range, scale| Criterion {
            name: name.to_string(),
            weight,
            range,
            orientation: Orientation::Decreasing,
            scale,
        };
        McdaConfig {
            criteria: vec![
                c("haemoglobin", 0.592, [-6.0, 3.0], Scale::Raw),
                c("glucose", 0.118, [-15.0, 7.5], Scale::Raw),
                c("diarrhoea", 0.089, [0.10, 0.35], Scale::Probability),
                c("nausea", 0.178, [0.10, 0.25], Scale::Probability),
                c("vomiting", 0.018, [0.10, 0.20], Scale::Probability),
                c("dyspepsia", 0.005, [0.10, 0.25], Scale::Probability),
            ],
            binary_evaluation: BinaryEvaluation::AtZero,
        }
    }

    /// Equal weights, unit-free ranges: used for schemas without a
    /// configured MCDA block.
    pub fn uniform(schema: &OutcomeSchema) -> Self {
        let w = 1.0 / schema.n_items() as f64;
        McdaConfig {
            criteria: schema
                .items()
                .iter()
                .map(|it| Criterion {
                    name: it.name.clone(),
                    weight: w,
                    range: match it.kind {
                        ItemKind::Continuous => [-5.0, 5.0],
                        ItemKind::Binary => [0.0, 1.0],
                    },
                    orientation: Orientation::Decreasing,
                    scale: match it.kind {
                        ItemKind::Continuous => Scale::Raw,
                        ItemKind::Binary => Scale::Probability,
                    },
                })
                .collect(),
            binary_evaluation: BinaryEvaluation::AtZero,
        }
    }

    pub fn weight_sum(&self) -> f64 {
        self.criteria.iter().map(|c| c.weight).sum()
    }

    /// Weights rescaled to sum to one.
    pub fn normalized(&self) -> Self {
        let s = self.weight_sum();
        let mut out = self.clone();
        out.criteria.iter_mut().for_each(|c| c.weight /= s);
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.criteria.is_empty() {
            return Err(Error::Config("mcda: at least one criterion is required".into()));
        }
        for c in &self.criteria {
            if !(c.weight >= 0.0 && c.weight.is_finite()) {
                return Err(Error::Config(format!("mcda: weight of `{}` must be nonnegative", c.name)));
            }
            if !(c.range[0] < c.range[1]) {
                return Err(Error::Config(format!("mcda: range of `{}` must be increasing and non-empty", c.name)));
            }
            if c.scale == Scale::Probability && (c.range[0] < 0.0 || c.range[1] > 1.0) {
                return Err(Error::Config(format!("mcda: probability range of `{}` must lie in [0, 1]", c.name)));
            }
        }
        if (self.weight_sum() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mcda: weights sum to {}, not 1", self.weight_sum())));
        }
        Ok(())
    }

    /// Checks that criteria match the schema items one to one, in order.
    pub fn validate_for(&self, schema: &OutcomeSchema) -> Result<()> {
        self.validate()?;
        if self.criteria.len() != schema.n_items() {
            return Err(Error::Config(format!(
                "mcda: {} criteria for {} items",
                self.criteria.len(),
                schema.n_items()
            )));
        }
        for (c, it) in self.criteria.iter().zip(schema.items()) {
            if c.name != it.name {
                return Err(Error::Config(format!("mcda: criterion `{}` does not match item `{}`", c.name, it.name)));
            }
            let expected = match it.kind {
                ItemKind::Continuous => Scale::Raw,
                ItemKind::Binary => Scale::Probability,
            };
            if c.scale != expected {
                return Err(Error::Config(format!("mcda: criterion `{}` has the wrong scale for its item kind", c.name)));
            }
        }
        Ok(())
    }
}

/// Linear map sending the worst endpoint to 0 and the best to 1, clamped.
pub fn partial_utility(x: f64, c: &Criterion) -> f64 {
    ((x - c.worst()) / (c.best() - c.worst())).clamp(0.0, 1.0)
}

/// Expected outcome of item `j` in `group`.
pub fn expected_outcome(theta: &Theta, spec: &ModelSpec, group: usize, j: usize, eval: BinaryEvaluation) -> f64 {
    let a = theta.alpha[(group, j)];
    if j < spec.p_c {
        return a;
    }
    match eval {
        BinaryEvaluation::AtZero => sigmoid(a),
        BinaryEvaluation::Marginal => {
            let sd = linear_predictor_variance(theta, spec, group, j).sqrt();
            if sd == 0.0 {
                return sigmoid(a);
            }
            let (x, w) = gauss_hermite(QUADRATURE_NODES);
            x.iter().zip(&w).map(|(x, w)| w * sigmoid(a + sd * x)).sum()
        }
    }
}

/// Variance of the latent part of a binary item's linear predictor:
/// (ΛΦΛᵀ)_jj plus the residual variance Ω_jj when present.
fn linear_predictor_variance(theta: &Theta, spec: &ModelSpec, group: usize, j: usize) -> f64 {
    let b = theta.block(spec, group);
    let l = b.lambda.row(j);
    let mut v = (l * &b.phi * l.transpose())[(0, 0)];
    if let Some(om) = &b.omega {
        let jb = j - spec.p_c;
        v += om[(jb, jb)];
    }
    v.max(0.0)
}

/// Σ_j w_j u_j(E y_j) for one group.
pub fn mcda_score(theta: &Theta, group: usize, cfg: &McdaConfig, spec: &ModelSpec) -> f64 {
    cfg.criteria
        .iter()
        .enumerate()
        .map(|(j, c)| c.weight * partial_utility(expected_outcome(theta, spec, group, j, cfg.binary_evaluation), c))
        .sum()
}

/// Scores of every group for one θ.
pub fn group_scores(theta: &Theta, cfg: &McdaConfig, spec: &ModelSpec) -> Vec<f64> {
    (0..spec.n_groups).map(|g| mcda_score(theta, g, cfg, spec)).collect()
}

/// Weighted draws of the score vector (one entry per group).
#[derive(Debug, Clone, PartialEq)]
pub struct ScorePosterior {
    /// Per draw, the score of each group.
    pub scores: Vec<Vec<f64>>,
    /// Normalised draw weights.
    pub weights: Vec<f64>,
}

impl ScorePosterior {
    pub fn new(scores: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if scores.is_empty() || scores.len() != weights.len() {
            return Err(Error::OutOfRange("score posterior needs one weight per draw".into()));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::OutOfRange("score weights must be nonnegative with a positive sum".into()));
        }
        Ok(ScorePosterior {
            weights: weights.iter().map(|w| w / total).collect(),
            scores,
        })
    }

    /// Equally weighted draws.
    pub fn from_thetas(thetas: &[Theta], cfg: &McdaConfig, spec: &ModelSpec) -> Result<Self> {
        let n = thetas.len();
        Self::from_weighted(thetas, &vec![1.0; n], cfg, spec)
    }

    pub fn from_weighted(thetas: &[Theta], weights: &[f64], cfg: &McdaConfig, spec: &ModelSpec) -> Result<Self> {
        let scores = thetas.par_iter().map(|t| group_scores(t, cfg, spec)).collect();
        Self::new(scores, weights.to_vec())
    }

    pub fn n_groups(&self) -> usize {
        self.scores[0].len()
    }

    pub fn group(&self, g: usize) -> Vec<f64> {
        self.scores.iter().map(|s| s[g]).collect()
    }

    pub fn mean(&self, g: usize) -> f64 {
        self.scores.iter().zip(&self.weights).map(|(s, w)| s[g] * w).sum()
    }

    pub fn quantile(&self, g: usize, q: f64) -> f64 {
        weighted_quantile(&self.group(g), &self.weights, q)
    }

    /// Weighted P(s_a > s_b), pairing draws; ties count one half.
    pub fn superiority_prob(&self, a: usize, b: usize) -> f64 {
        superiority(&self.scores, &self.weights, a, b)
    }

    pub fn summary(&self) -> ScoreSummary {
        summarize_scores(&self.scores, &self.weights)
    }

    /// One row per draw: weight followed by each group's score.
    pub fn write_csv<W: Write>(&self, labels: &[String], writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["draw".to_string(), "weight".to_string()];
        header.extend(labels.iter().cloned());
        w.write_record(&header)?;
        for (i, (s, wt)) in self.scores.iter().zip(&self.weights).enumerate() {
            let mut rec = vec![i.to_string(), wt.to_string()];
            rec.extend(s.iter().map(|x| x.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<scores>", e))?;
        Ok(())
    }
}

fn superiority(scores: &[Vec<f64>], weights: &[f64], a: usize, b: usize) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (s, w) in scores.iter().zip(weights) {
        if s.is_empty() {
            continue;
        }
        den += w;
        if s[a] > s[b] {
            num += w;
        } else if s[a] == s[b] {
            num += 0.5 * w;
        }
    }
    num / den
}

/// Per-group mean and central 95% interval plus all pairwise superiority
/// probabilities (`superiority[a][b]` = P(s_a > s_b), NaN on the diagonal).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSummary {
    pub mean: Vec<f64>,
    pub q025: Vec<f64>,
    pub q975: Vec<f64>,
    pub superiority: Vec<Vec<f64>>,
}

/// Summary of weighted score draws. Draws with an empty score vector
/// (invalid θ) are skipped.
pub fn summarize_scores(scores: &[Vec<f64>], weights: &[f64]) -> ScoreSummary {
    let r = scores.iter().map(|s| s.len()).max().unwrap_or(0);
    let (vals, w): (Vec<&Vec<f64>>, Vec<f64>) = scores
        .iter()
        .zip(weights)
        .filter(|(s, _)| s.len() == r)
        .map(|(s, w)| (s, *w))
        .unzip();
    let total: f64 = w.iter().sum();
    let mut out = ScoreSummary {
        mean: Vec::with_capacity(r),
        q025: Vec::with_capacity(r),
        q975: Vec::with_capacity(r),
        superiority: vec![vec![f64::NAN; r]; r],
    };
    for g in 0..r {
        let col: Vec<f64> = vals.iter().map(|s| s[g]).collect();
        out.mean.push(col.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>() / total);
        out.q025.push(weighted_quantile(&col, &w, 0.025));
        out.q975.push(weighted_quantile(&col, &w, 0.975));
    }
    let owned: Vec<Vec<f64>> = vals.into_iter().cloned().collect();
    for a in 0..r {
        for b in 0..r {
            if a != b {
                out.superiority[a][b] = superiority(&owned, &w, a, b);
            }
        }
    }
    out
}

/// Superiority matrix as CSV: one row per group `a`, one column per `b`.
pub fn write_superiority_csv<W: Write>(summary: &ScoreSummary, labels: &[String], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["group".to_string()];
    header.extend(labels.iter().map(|l| format!("P(>{l})")));
    w.write_record(&header)?;
    for (a, row) in summary.superiority.iter().enumerate() {
        let mut rec = vec![labels[a].clone()];
        rec.extend(row.iter().map(|p| if p.is_nan() { String::new() } else { p.to_string() }));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<scores>", e))?;
    Ok(())
}

/// Per-group score summary as CSV.
pub fn write_score_summary_csv<W: Write>(summary: &ScoreSummary, labels: &[String], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["group", "mean", "q025", "q975"])?;
    for (g, l) in labels.iter().enumerate() {
        w.write_record([
            l.clone(),
            summary.mean[g].to_string(),
            summary.q025[g].to_string(),
            summary.q975[g].to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<scores>", e))?;
    Ok(())
}

/// The sequential monitoring table and the first step at which each
/// ordered pair's superiority probability reaches the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct SequentialTrace {
    pub labels: Vec<String>,
    pub records: Vec<StepRecord>,
    pub threshold: f64,
    /// `(a, b, first i with P(s_a > s_b) ≥ threshold)` for every ordered pair.
    pub first_crossing: Vec<(usize, usize, Option<usize>)>,
}

pub const DEFAULT_THRESHOLD: f64 = 0.99;

pub fn sequential_trace(records: &[StepRecord], labels: &[String], threshold: f64) -> SequentialTrace {
    let r = labels.len();
    let mut first_crossing = Vec::new();
    for a in 0..r {
        for b in 0..r {
            if a == b {
                continue;
            }
            let hit = records.iter().find_map(|rec| {
                let s = rec.scores.as_ref()?;
                (s.superiority[a][b] >= threshold).then_some(rec.i)
            });
            first_crossing.push((a, b, hit));
        }
    }
    SequentialTrace {
        labels: labels.to_vec(),
        records: records.to_vec(),
        threshold,
        first_crossing,
    }
}

impl SequentialTrace {
    pub fn crossing(&self, a: usize, b: usize) -> Option<usize> {
        self.first_crossing
            .iter()
            .find(|(x, y, _)| *x == a && *y == b)
            .and_then(|(_, _, i)| *i)
    }

    /// One row per absorbed subject.
    pub fn write_csv<W: Write>(&self, subject_ids: &[String], writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = [
            "i",
            "subject_id",
            "group",
            "ess",
            "log_increment",
            "log_evidence",
            "rejuvenated",
            "accept_rate",
            "fallbacks",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let with_scores = self.records.iter().any(|r| r.scores.is_some());
        if with_scores {
            for l in &self.labels {
                header.push(format!("mean_{l}"));
                header.push(format!("q025_{l}"));
                header.push(format!("q975_{l}"));
            }
            for &(a, b, _) in &self.first_crossing {
                header.push(format!("P({}>{})", self.labels[a], self.labels[b]));
            }
        }
        w.write_record(&header)?;
        for rec in &self.records {
            let mut row = vec![
                rec.i.to_string(),
                subject_ids.get(rec.row).cloned().unwrap_or_else(|| rec.row.to_string()),
                self.labels.get(rec.group).cloned().unwrap_or_else(|| rec.group.to_string()),
                rec.ess.to_string(),
                rec.log_increment.to_string(),
                rec.log_evidence.to_string(),
                (rec.rejuvenated as u8).to_string(),
                if rec.accept_rate.is_nan() { String::new() } else { rec.accept_rate.to_string() },
                rec.fallbacks.to_string(),
            ];
            if with_scores {
                match &rec.scores {
                    Some(s) => {
                        for g in 0..self.labels.len() {
                            row.extend([s.mean[g].to_string(), s.q025[g].to_string(), s.q975[g].to_string()]);
                        }
                        for &(a, b, _) in &self.first_crossing {
                            row.push(s.superiority[a][b].to_string());
                        }
                    }
                    None => row.extend(std::iter::repeat_n(String::new(), 3 * self.labels.len() + self.first_crossing.len())),
                }
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<scores>", e))?;
        Ok(())
    }

    /// First-crossing report as CSV; unreached pairs read `never`.
    pub fn write_crossings_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["a", "b", "threshold", "first_crossing", "final_probability"])?;
        let last = self.records.iter().rev().find_map(|r| r.scores.as_ref());
        for &(a, b, i) in &self.first_crossing {
            w.write_record([
                self.labels[a].clone(),
                self.labels[b].clone(),
                self.threshold.to_string(),
                i.map_or_else(|| "never".to_string(), |i| i.to_string()),
                last.map_or_else(String::new, |s| s.superiority[a][b].to_string()),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<scores>", e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::reference_theta;
    use crate::model::{ModelSpec, Variant};
    use approx::assert_relative_eq;

    fn reference() -> (ModelSpec, McdaConfig) {
        (ModelSpec::new(Variant::Ez1, true, 2, 4, 3).unwrap(), McdaConfig::diabetes_reference())
    }

    #[test]
    fn reference_weights_sum_to_one() {
        let cfg = McdaConfig::diabetes_reference();
        assert!((cfg.weight_sum() - 1.0).abs() < 1e-12);
        cfg.validate().unwrap();
        cfg.validate_for(&OutcomeSchema::diabetes_reference()).unwrap();
    }

    #[test]
    fn haemoglobin_utility() {
        let c = &McdaConfig::diabetes_reference().criteria[0];
        assert_eq!(partial_utility(-6.0, c), 1.0);
        assert_eq!(partial_utility(3.0, c), 0.0);
        assert_relative_eq!(partial_utility(-1.5, c), 0.5, epsilon = 1e-15);
        assert_eq!(partial_utility(-60.0, c), 1.0);
        assert_eq!(partial_utility(30.0, c), 0.0);
        assert_relative_eq!(partial_utility(-2.30, c), 5.3 / 9.0, epsilon = 1e-15);
    }

    #[test]
    fn nausea_utility() {
        let c = &McdaConfig::diabetes_reference().criteria[3];
        assert_eq!(partial_utility(0.10, c), 1.0);
        assert_eq!(partial_utility(0.25, c), 0.0);
    }

    #[test]
    fn best_endpoints_score_one_and_degenerate_weights() {
        let (spec, cfg) = reference();
        let mut theta = Theta::null(&spec);
        for (j, c) in cfg.criteria.iter().enumerate() {
            theta.alpha[(0, j)] = match c.scale {
                Scale::Raw => c.best(),
                Scale::Probability => (c.best() / (1.0 - c.best())).ln(),
            };
        }
        assert_relative_eq!(mcda_score(&theta, 0, &cfg, &spec), 1.0, epsilon = 1e-12);

        let mut one = cfg.clone();
        for (j, c) in one.criteria.iter_mut().enumerate() {
            c.weight = if j == 0 { 1.0 } else { 0.0 };
        }
        theta.alpha[(1, 0)] = -1.5;
        assert_relative_eq!(mcda_score(&theta, 1, &one, &spec), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn reference_score_by_hand() {
        let (spec, cfg) = reference();
        let mut theta = Theta::null(&spec);
        let avm = [-2.30, -4.05, -1.87, -2.27, -2.83, -5.19];
        for (j, a) in avm.iter().enumerate() {
            theta.alpha[(0, j)] = *a;
        }
        // Spreadsheet-style: each term written out separately.
        let p = |a: f64| 1.0 / (1.0 + (-a).exp());
        let terms = [
            0.592 * (3.0 - -2.30) / 9.0,
            0.118 * (7.5 - -4.05) / 22.5,
            0.089 * (0.35 - p(-1.87)) / 0.25,
            0.178 * ((0.25 - p(-2.27)) / 0.15).min(1.0),
            0.018 * ((0.20 - p(-2.83)) / 0.10).min(1.0),
            0.005 * ((0.25 - p(-5.19)) / 0.15).min(1.0),
        ];
        assert_relative_eq!(terms[0], 0.348_622_2, epsilon = 1e-6);
        assert_relative_eq!(mcda_score(&theta, 0, &cfg, &spec), terms.iter().sum::<f64>(), epsilon = 1e-12);
    }

    #[test]
    fn marginal_evaluation_shrinks_toward_half() {
        let (spec, theta) = reference_theta();
        let j = spec.p_c + 2;
        let at0 = expected_outcome(&theta, &spec, 0, j, BinaryEvaluation::AtZero);
        let marg = expected_outcome(&theta, &spec, 0, j, BinaryEvaluation::Marginal);
        assert!(at0 < marg && marg < 0.5);
        // Independent check by midpoint integration over z.
        let a = theta.alpha[(0, j)];
        let l = theta.blocks[0].lambda[(j, 1)];
        let h = 1e-3;
        let mut oracle = 0.0;
        let mut z: f64 = -10.0;
        while z < 10.0 {
            let zm = z + h / 2.0;
            oracle += h * (-0.5 * zm * zm).exp() / (2.0 * std::f64::consts::PI).sqrt() * sigmoid(a + l * zm);
            z += h;
        }
        assert_relative_eq!(marg, oracle, epsilon = 1e-6);
        // Continuous items are unaffected.
        assert_eq!(expected_outcome(&theta, &spec, 0, 0, BinaryEvaluation::Marginal), theta.alpha[(0, 0)]);
    }

    #[test]
    fn score_is_monotone_and_weight_scale_free() {
        let (spec, theta) = reference_theta();
        let cfg = McdaConfig::diabetes_reference();
        let base = mcda_score(&theta, 1, &cfg, &spec);
        for j in 0..spec.p() {
            let mut t = theta.clone();
            t.alpha[(1, j)] += 0.05;
            assert!(mcda_score(&t, 1, &cfg, &spec) <= base + 1e-15);
        }
        let mut scaled = cfg.clone();
        scaled.criteria.iter_mut().for_each(|c| c.weight *= 7.3);
        assert_relative_eq!(mcda_score(&theta, 1, &scaled.normalized(), &spec), base, epsilon = 1e-14);
    }

    #[test]
    fn superiority_conventions() {
        let same = ScorePosterior::new(vec![vec![0.3, 0.3]; 4], vec![1.0; 4]).unwrap();
        assert_eq!(same.superiority_prob(0, 1), 0.5);
        let scores: Vec<Vec<f64>> = (0..50).map(|i| vec![0.2 + i as f64 / 100.0 + 0.1, 0.2 + i as f64 / 100.0]).collect();
        let sp = ScorePosterior::new(scores, vec![1.0; 50]).unwrap();
        assert_eq!(sp.superiority_prob(0, 1), 1.0);
        assert_eq!(sp.superiority_prob(1, 0), 0.0);
        // Disjoint but unpaired orderings: paired comparison still exact.
        let mixed = ScorePosterior::new(vec![vec![0.9, 0.1], vec![0.2, 0.4], vec![0.5, 0.3]], vec![1.0, 2.0, 1.0]).unwrap();
        assert_relative_eq!(mixed.superiority_prob(0, 1), 0.5, epsilon = 1e-15);
        assert_relative_eq!(mixed.superiority_prob(0, 1) + mixed.superiority_prob(1, 0), 1.0, epsilon = 1e-15);
        // Rank statistic: invariant under a common increasing transform.
        let t = ScorePosterior::new(
            mixed.scores.iter().map(|s| s.iter().map(|x| x.powi(3)).collect()).collect(),
            vec![1.0, 2.0, 1.0],
        )
        .unwrap();
        assert_eq!(t.superiority_prob(0, 1), mixed.superiority_prob(0, 1));
    }

    #[test]
    fn point_mass_and_bounds() {
        let (spec, theta) = reference_theta();
        let cfg = McdaConfig::diabetes_reference();
        let sp = ScorePosterior::from_thetas(std::slice::from_ref(&theta), &cfg, &spec).unwrap();
        let s = sp.summary();
        for g in 0..3 {
            assert_eq!(s.q025[g], s.q975[g]);
            assert_eq!(s.mean[g], mcda_score(&theta, g, &cfg, &spec));
        }
        let mut wild = theta.clone();
        wild.alpha.iter_mut().enumerate().for_each(|(i, a)| *a = if i % 2 == 0 { 1e6 } else { -1e6 });
        for g in 0..3 {
            let x = mcda_score(&wild, g, &cfg, &spec);
            assert!((0.0..=1.0).contains(&x));
        }
    }

    #[test]
    fn weighted_mean_and_quantile_oracle() {
        let sp = ScorePosterior::new(vec![vec![0.1], vec![0.4], vec![0.2], vec![0.8]], vec![1.0, 1.0, 2.0, 4.0]).unwrap();
        assert_relative_eq!(sp.mean(0), (0.1 + 0.4 + 0.4 + 3.2) / 8.0, epsilon = 1e-15);
        // Sorted: 0.1 (1/8), 0.2 (3/8), 0.4 (4/8), 0.8 (1).
        assert_eq!(sp.quantile(0, 0.1), 0.1);
        assert_eq!(sp.quantile(0, 0.3), 0.2);
        assert_eq!(sp.quantile(0, 0.5), 0.4);
        assert_eq!(sp.quantile(0, 0.975), 0.8);
    }

    fn record(i: usize, p: f64) -> StepRecord {
        StepRecord {
            i,
            row: i - 1,
            group: 0,
            ess: 10.0,
            log_increment: -1.0,
            log_evidence: -(i as f64),
            rejuvenated: false,
            accept_rate: f64::NAN,
            fallbacks: 0,
            scores: Some(ScoreSummary {
                mean: vec![0.5, 0.4],
                q025: vec![0.4, 0.3],
                q975: vec![0.6, 0.5],
                superiority: vec![vec![f64::NAN, p], vec![1.0 - p, f64::NAN]],
            }),
        }
    }

    #[test]
    fn first_crossing() {
        let labels = vec!["A".to_string(), "B".to_string()];
        let recs: Vec<StepRecord> = [0.5, 0.9, 0.995, 0.98, 1.0].iter().enumerate().map(|(k, p)| record(k + 1, *p)).collect();
        let tr = sequential_trace(&recs, &labels, DEFAULT_THRESHOLD);
        assert_eq!(tr.crossing(0, 1), Some(3));
        assert_eq!(tr.crossing(1, 0), None);
        let strict = sequential_trace(&recs[..4], &labels, 1.0);
        assert_eq!(strict.crossing(0, 1), None);
        let mut buf = Vec::new();
        strict.write_crossings_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("never"));
        let mut buf = Vec::new();
        tr.write_csv(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 6);
    }

    #[test]
    fn constant_system_gives_flat_trace() {
        let labels = vec!["A".to_string(), "B".to_string()];
        let recs: Vec<StepRecord> = (1..=5).map(|i| record(i, 0.7)).collect();
        let tr = sequential_trace(&recs, &labels, 0.99);
        let first = tr.records[0].scores.as_ref().unwrap();
        for r in &tr.records {
            let s = r.scores.as_ref().unwrap();
            assert_eq!((&s.mean, &s.q025, &s.q975), (&first.mean, &first.q025, &first.q975));
            assert_eq!(s.superiority[0][1], first.superiority[0][1]);
        }
        assert_eq!(tr.crossing(0, 1), None);
    }
}
