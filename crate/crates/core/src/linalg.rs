//! Small numeric helpers shared across modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without overflow for large `|x|`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Bernoulli log-mass of `y` under success probability `sigmoid(eta)`.
pub fn bernoulli_logit_lpmf(y: f64, eta: f64) -> f64 {
    if y > 0.5 {
        log_sigmoid(eta)
    } else {
        log_sigmoid(-eta)
    }
}

/// Bernoulli log-mass and its derivative `y - sigmoid(eta)` in one pass.
pub fn bernoulli_logit_lpmf_grad(y: f64, eta: f64) -> (f64, f64) {
    let s = if y > 0.5 { eta } else { -eta };
    let e = (-s.abs()).exp();
    let lp = s.min(0.0) - e.ln_1p();
    // 1 - sigmoid(s), signed back to the eta scale.
    let tail = if s >= 0.0 { e / (1.0 + e) } else { 1.0 / (1.0 + e) };
    (lp, if y > 0.5 { tail } else { -tail })
}

pub fn normal_lpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let r = (x - mean) / sd;
    -0.5 * LN_2PI - sd.ln() - 0.5 * r * r
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

/// Log of the multivariate gamma function Γ_p(a).
pub fn ln_multi_gamma(p: usize, a: f64) -> f64 {
    let pf = p as f64;
    let mut s = pf * (pf - 1.0) / 4.0 * std::f64::consts::PI.ln();
    for j in 0..p {
        s += ln_gamma(a - j as f64 / 2.0);
    }
    s
}

/// Cholesky factor of a symmetric matrix, or `None` when it is not positive definite.
pub fn cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    if m.nrows() == 0 {
        return Cholesky::new(m.clone());
    }
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Cholesky::new(m.clone())
}

pub fn log_det_chol(ch: &Cholesky<f64, Dyn>) -> f64 {
    ch.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum()
}

/// Multivariate normal log-density.
pub fn mvn_lpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Option<f64> {
    let ch = cholesky(cov)?;
    let r = x - mean;
    let sol = ch.solve(&r);
    let k = x.len() as f64;
    Some(-0.5 * (k * LN_2PI + log_det_chol(&ch) + r.dot(&sol)))
}

/// Sample covariance with divisor `n - 1`.
pub fn sample_covariance(rows: &[&[f64]]) -> DMatrix<f64> {
    let n = rows.len();
    let p = rows.first().map_or(0, |r| r.len());
    let mut mean = vec![0.0; p];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut s = DMatrix::zeros(p, p);
    for r in rows {
        for a in 0..p {
            for b in 0..=a {
                s[(a, b)] += (r[a] - mean[a]) * (r[b] - mean[b]);
            }
        }
    }
    let denom = (n as f64 - 1.0).max(1.0);
    for a in 0..p {
        for b in 0..=a {
            s[(a, b)] /= denom;
            s[(b, a)] = s[(a, b)];
        }
    }
    s
}

/// Weighted quantile: the smallest value whose cumulative normalised weight
/// reaches `q`.
pub fn weighted_quantile(values: &[f64], weights: &[f64], q: f64) -> f64 {
    assert_eq!(values.len(), weights.len());
    let mut idx: Vec<usize> = (0..values.len()).filter(|&i| weights[i] > 0.0).collect();
    if idx.is_empty() {
        return f64::NAN;
    }
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let total: f64 = idx.iter().map(|&i| weights[i]).sum();
    let mut cum = 0.0;
    for &i in &idx {
        cum += weights[i] / total;
        if cum >= q - 1e-12 {
            return values[i];
        }
    }
    values[*idx.last().unwrap()]
}

/// Gauss–Hermite rule for a standard normal: nodes and weights with
/// Σ w_k f(x_k) ≈ E f(Z), Z ~ N(0, 1). Golub–Welsch on the Jacobi matrix
/// of the probabilists' Hermite polynomials.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0);
    let mut j = DMatrix::zeros(n, n);
    for k in 1..n {
        let b = (k as f64).sqrt();
        j[(k - 1, k)] = b;
        j[(k, k - 1)] = b;
    }
    let eig = j.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}
