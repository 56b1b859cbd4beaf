//! Regression fits with classical inference, confidence intervals and the
//! five qualitative indicators.
//!
//! Distribution functions are computed in-crate: the normal tail through the
//! regularized incomplete gamma function, Student's t through the
//! continued-fraction incomplete beta function.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::PIECEWISE_THRESHOLD;

pub const ALPHA: f64 = 0.05;
pub const IRLS_TOLERANCE: f64 = 1e-10;
pub const IRLS_MAX_ITERATIONS: usize = 100;
pub const SEPARATION_BOUND: f64 = 30.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("complete or quasi-complete separation: {0}")]
    Separation(String),
    #[error("rank-deficient design: column {column:?} is a linear combination of {depends_on:?}")]
    Collinear { column: String, depends_on: Vec<String> },
}

// ---------------------------------------------------------------------------
// Special functions

const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// ln Γ(x) for x > 0 (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + 7.5;
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

const EPS: f64 = 1e-16;
const TINY: f64 = 1e-300;

/// Regularized upper incomplete gamma Q(a, x).
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let lead = -x + a * x.ln() - ln_gamma(a);
    if x < a + 1.0 {
        // series for P
        let (mut ap, mut sum, mut del) = (a, 1.0 / a, 1.0 / a);
        for _ in 0..10_000 {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if del.abs() < sum.abs() * EPS {
                break;
            }
        }
        1.0 - sum * lead.exp()
    } else {
        // Lentz continued fraction for Q
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / TINY;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < TINY {
                d = TINY;
            }
            c = b + an / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < EPS {
                break;
            }
        }
        lead.exp() * h
    }
}

pub fn erfc(x: f64) -> f64 {
    if x >= 0.0 {
        gamma_q(0.5, x * x)
    } else {
        2.0 - gamma_q(0.5, x * x)
    }
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// P(|Z| ≥ |z|).
pub fn normal_two_sided_p(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    erfc(z.abs() / std::f64::consts::SQRT_2)
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b).
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let bt = (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        bt * beta_cf(a, b, x) / a
    } else {
        1.0 - bt * beta_cf(b, a, 1.0 - x) / b
    }
}

/// P(|T| ≥ |t|) for Student's t with `df` degrees of freedom.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    if t.is_infinite() {
        return 0.0;
    }
    incomplete_beta(0.5 * df, 0.5, df / (df + t * t))
}

pub fn t_cdf(t: f64, df: f64) -> f64 {
    let tail = 0.5 * t_two_sided_p(t, df);
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Inverts a continuous increasing CDF by bracketing and bisection.
fn invert_cdf(p: f64, cdf: impl Fn(f64) -> f64) -> f64 {
    let (mut lo, mut hi) = (-1.0, 1.0);
    while cdf(lo) > p {
        lo *= 2.0;
    }
    while cdf(hi) < p {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * mid.abs().max(1.0) {
            break;
        }
    }
    0.5 * (lo + hi)
}

pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile level must lie in (0, 1)");
    invert_cdf(p, normal_cdf)
}

pub fn t_quantile(p: f64, df: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile level must lie in (0, 1)");
    invert_cdf(p, |t| t_cdf(t, df))
}

// ---------------------------------------------------------------------------
// Intervals

/// Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: u64, n: u64, level: f64) -> Result<(f64, f64), StatsError> {
    if n == 0 || successes > n {
        return Err(StatsError::Degenerate(format!("wilson interval needs 0 <= {successes} <= n, n = {n} >= 1")));
    }
    let z = normal_quantile(1.0 - (1.0 - level) / 2.0);
    let (nf, p) = (n as f64, successes as f64 / n as f64);
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z / denom * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    let lo = if successes == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if successes == n { 1.0 } else { (center + half).min(1.0) };
    Ok((lo, hi))
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// mean ± t_{(1+level)/2, n−1} · s/√n.
pub fn t_interval(sample: &[f64], level: f64) -> Result<(f64, f64), StatsError> {
    let n = sample.len();
    if n < 2 {
        return Err(StatsError::Degenerate(format!("t interval needs at least 2 values, got {n}")));
    }
    let m = mean(sample);
    let var = sample.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let q = t_quantile(1.0 - (1.0 - level) / 2.0, n as f64 - 1.0);
    let half = q * (var / n as f64).sqrt();
    Ok((m - half, m + half))
}

// ---------------------------------------------------------------------------
// Regression

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitKind {
    Logistic,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub term: String,
    pub estimate: f64,
    pub std_error: f64,
    /// z for logistic fits, t for linear fits.
    pub statistic: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub kind: FitKind,
    pub n: usize,
    /// Residual degrees of freedom (linear fits only).
    pub df: Option<usize>,
    pub iterations: usize,
    pub coefficients: Vec<Coefficient>,
}

impl RegressionFit {
    pub fn coefficient(&self, term: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.term == term)
    }

    pub fn estimates(&self) -> Vec<f64> {
        self.coefficients.iter().map(|c| c.estimate).collect()
    }
}

pub const LOGISTIC_TERMS: [&str; 3] = ["intercept", "h", "dv"];
pub const LINEAR_TERMS: [&str; 4] = ["intercept", "abs_h", "abs_dv", "h_dv"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticRow {
    /// Left vehicle merged first.
    pub merge_first: bool,
    pub h: f64,
    pub dv: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapRow {
    pub gap: f64,
    pub h: f64,
    pub dv: f64,
}

fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

fn information(x: &DMatrix<f64>, beta: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let p = (x * beta).map(sigmoid);
    let w = p.map(|pi| pi * (1.0 - pi));
    let mut xw = x.clone();
    for (mut row, wi) in xw.row_iter_mut().zip(w.iter()) {
        row *= *wi;
    }
    (x.transpose() * xw, p)
}

/// Maximum-likelihood logistic regression of `y` (0/1) on design `x` by
/// iteratively reweighted least squares, with Wald inference.
pub fn logistic_fit_design(x: &DMatrix<f64>, y: &[f64], terms: &[&str]) -> Result<RegressionFit, StatsError> {
    let (n, k) = x.shape();
    assert_eq!(terms.len(), k, "one term name per design column");
    if n != y.len() {
        return Err(StatsError::Degenerate("response length differs from design rows".into()));
    }
    if n < 10 {
        return Err(StatsError::Degenerate(format!("logistic fit needs at least 10 rows, got {n}")));
    }
    let ones = y.iter().filter(|v| **v == 1.0).count();
    if ones == 0 || ones == n {
        return Err(StatsError::Degenerate("outcome has a single class".into()));
    }
    let yv = DVector::from_column_slice(y);
    let mut beta = DVector::zeros(k);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < IRLS_MAX_ITERATIONS {
        iterations += 1;
        let (info, p) = information(x, &beta);
        let grad = x.transpose() * (&yv - p);
        let step = info
            .cholesky()
            .map(|c| c.solve(&grad))
            .ok_or_else(|| StatsError::Separation("information matrix became singular".into()))?;
        beta += &step;
        if beta.amax() > SEPARATION_BOUND {
            return Err(StatsError::Separation(format!(
                "coefficient magnitude exceeded {SEPARATION_BOUND} after {iterations} iterations"
            )));
        }
        if step.amax() < IRLS_TOLERANCE {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(StatsError::Separation(format!("no convergence in {IRLS_MAX_ITERATIONS} iterations")));
    }
    let (info, _) = information(x, &beta);
    let cov = info
        .try_inverse()
        .ok_or_else(|| StatsError::Separation("information matrix is singular at the optimum".into()))?;
    let coefficients = (0..k)
        .map(|j| {
            let se = cov[(j, j)].sqrt();
            let z = beta[j] / se;
            Coefficient {
                term: terms[j].to_string(),
                estimate: beta[j],
                std_error: se,
                statistic: z,
                p_value: normal_two_sided_p(z),
            }
        })
        .collect();
    Ok(RegressionFit {
        kind: FitKind::Logistic,
        n,
        df: None,
        iterations,
        coefficients,
    })
}

/// logit P(left merges first) = β0 + β1·h + β2·Δv.
pub fn logistic_fit(rows: &[LogisticRow]) -> Result<RegressionFit, StatsError> {
    let x = DMatrix::from_fn(rows.len(), 3, |i, j| match j {
        0 => 1.0,
        1 => rows[i].h,
        _ => rows[i].dv,
    });
    let y: Vec<f64> = rows.iter().map(|r| if r.merge_first { 1.0 } else { 0.0 }).collect();
    logistic_fit_design(&x, &y, &LOGISTIC_TERMS)
}

/// Thin QR by twice-iterated modified Gram–Schmidt; reports the first column
/// that adds no new direction.
fn thin_qr(x: &DMatrix<f64>, terms: &[&str]) -> Result<(DMatrix<f64>, DMatrix<f64>), StatsError> {
    let (n, k) = x.shape();
    let mut q: DMatrix<f64> = DMatrix::zeros(n, k);
    let mut r: DMatrix<f64> = DMatrix::zeros(k, k);
    for j in 0..k {
        let original = x.column(j).norm();
        let mut v = x.column(j).into_owned();
        for _ in 0..2 {
            for i in 0..j {
                let proj = q.column(i).dot(&v);
                r[(i, j)] += proj;
                v -= q.column(i) * proj;
            }
        }
        let norm = v.norm();
        if original == 0.0 || norm <= 1e-10 * original {
            let depends_on = (0..j)
                .filter(|&i| original > 0.0 && r[(i, j)].abs() > 1e-12 * original)
                .map(|i| terms[i].to_string())
                .collect();
            return Err(StatsError::Collinear {
                column: terms[j].to_string(),
                depends_on,
            });
        }
        r[(j, j)] = norm;
        q.set_column(j, &(v / norm));
    }
    Ok((q, r))
}

/// Ordinary least squares with classical standard errors and t tests.
pub fn linear_fit_design(x: &DMatrix<f64>, y: &[f64], terms: &[&str]) -> Result<RegressionFit, StatsError> {
    let (n, k) = x.shape();
    assert_eq!(terms.len(), k, "one term name per design column");
    if n != y.len() {
        return Err(StatsError::Degenerate("response length differs from design rows".into()));
    }
    if n < 6 || n <= k {
        return Err(StatsError::Degenerate(format!("linear fit needs at least {} rows, got {n}", 6.max(k + 1))));
    }
    let (q, r) = thin_qr(x, terms)?;
    let yv = DVector::from_column_slice(y);
    let qty = q.transpose() * &yv;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| StatsError::Degenerate("triangular solve failed".into()))?;
    let resid = &yv - x * &beta;
    let df = n - k;
    let sigma2 = resid.norm_squared() / df as f64;
    let rinv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or_else(|| StatsError::Degenerate("triangular inverse failed".into()))?;
    let xtx_inv = &rinv * rinv.transpose();
    let coefficients = (0..k)
        .map(|j| {
            let se = (sigma2 * xtx_inv[(j, j)]).sqrt();
            let (t, p) = if se > 0.0 {
                let t = beta[j] / se;
                (t, t_two_sided_p(t, df as f64))
            } else if beta[j] == 0.0 {
                (0.0, 1.0)
            } else {
                (beta[j].signum() * f64::INFINITY, 0.0)
            };
            Coefficient {
                term: terms[j].to_string(),
                estimate: beta[j],
                std_error: se,
                statistic: t,
                p_value: p,
            }
        })
        .collect();
    Ok(RegressionFit {
        kind: FitKind::Linear,
        n,
        df: Some(df),
        iterations: 1,
        coefficients,
    })
}

/// g = α0 + α1·|h| + α2·|Δv| + α3·h·Δv.
pub fn linear_fit(rows: &[GapRow]) -> Result<RegressionFit, StatsError> {
    let x = DMatrix::from_fn(rows.len(), 4, |i, j| {
        let r = rows[i];
        match j {
            0 => 1.0,
            1 => r.h.abs(),
            2 => r.dv.abs(),
            _ => r.h * r.dv,
        }
    });
    let y: Vec<f64> = rows.iter().map(|r| r.gap).collect();
    linear_fit_design(&x, &y, &LINEAR_TERMS)
}

// ---------------------------------------------------------------------------
// Qualitative indicators

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IndicatorScore {
    /// Merge-first probability rises with headway advantage.
    pub i1: bool,
    /// Merge-first probability falls with relative velocity.
    pub i2: bool,
    /// Gap grows with |h|.
    pub i3: bool,
    /// Gap does not depend on |Δv|.
    pub i4: bool,
    /// Intermittent (piecewise-linear) velocity profiles.
    pub i5: bool,
    pub total: u8,
}

impl IndicatorScore {
    pub fn new(i1: bool, i2: bool, i3: bool, i4: bool, i5: bool) -> Self {
        let total = [i1, i2, i3, i4, i5].iter().filter(|b| **b).count() as u8;
        Self { i1, i2, i3, i4, i5, total }
    }

    pub fn flags(&self) -> [bool; 5] {
        [self.i1, self.i2, self.i3, self.i4, self.i5]
    }
}

fn signed_significant(c: Option<&Coefficient>, positive: bool, alpha: f64) -> bool {
    c.is_some_and(|c| (if positive { c.estimate > 0.0 } else { c.estimate < 0.0 }) && c.p_value < alpha)
}

/// Scores I1–I5. A missing fit fails the indicators that depend on it.
pub fn score_indicators(
    logit: Option<&RegressionFit>,
    gap: Option<&RegressionFit>,
    mean_piecewise: Option<f64>,
    alpha: f64,
) -> IndicatorScore {
    let lc = |t| logit.and_then(|f| f.coefficient(t));
    let gc = |t| gap.and_then(|f| f.coefficient(t));
    IndicatorScore::new(
        signed_significant(lc("h"), true, alpha),
        signed_significant(lc("dv"), false, alpha),
        signed_significant(gc("abs_h"), true, alpha),
        gc("abs_dv").is_some_and(|c| c.p_value >= alpha),
        mean_piecewise.is_some_and(|s| s >= PIECEWISE_THRESHOLD),
    )
}
