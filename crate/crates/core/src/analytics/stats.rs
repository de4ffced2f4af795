//! Two-group and k-group tests used in the cohort report.
//!
//! Tail probabilities go through the regularized incomplete beta function:
//! for Student's t with `v` degrees of freedom the two-sided p-value is
//! `I_{v/(v+t²)}(v/2, 1/2)`, and the upper tail of F(d1, d2) at `f` is
//! `I_{d2/(d2+d1·f)}(d2/2, d1/2)`.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("need at least {need} observations, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("samples have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("zero within-group variance with unequal means (mean difference {mean_difference}); the statistic is infinite")]
    InfiniteStatistic { mean_difference: f64 },
    #[error("correlation is undefined for a constant sample")]
    ConstantSample,
    #[error("non-finite observation")]
    NonFinite,
    #[error("standard deviation must be >= 0, got {0}")]
    NegativeSd(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator); absent when n < 2.
    pub sd: Option<f64>,
}

impl GroupStats {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let sd = (xs.len() >= 2).then(|| sample_variance(xs).sqrt());
        Some(Self {
            n: xs.len(),
            mean: mean(xs),
            sd,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub df: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub df2: Option<f64>,
    pub p_value: f64,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Two-pass sample variance.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

fn check(xs: &[f64], need: usize) -> Result<(), StatsError> {
    if xs.len() < need {
        return Err(StatsError::TooFew {
            need,
            got: xs.len(),
        });
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    Ok(())
}

/// Two-sided p-value of Student's t.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    beta_reg(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

/// Upper-tail probability of F(d1, d2).
pub fn f_upper_p(f: f64, d1: f64, d2: f64) -> f64 {
    if f <= 0.0 {
        return 1.0;
    }
    if f.is_infinite() {
        return 0.0;
    }
    beta_reg(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f)).clamp(0.0, 1.0)
}

fn pooled_t(
    (m1, v1, n1): (f64, f64, usize),
    (m2, v2, n2): (f64, f64, usize),
) -> Result<TestResult, StatsError> {
    let df = (n1 + n2 - 2) as f64;
    let pooled = ((n1 - 1) as f64 * v1 + (n2 - 1) as f64 * v2) / df;
    let diff = m1 - m2;
    if pooled == 0.0 {
        if diff == 0.0 {
            return Ok(TestResult {
                statistic: 0.0,
                df,
                df2: None,
                p_value: 1.0,
            });
        }
        return Err(StatsError::InfiniteStatistic {
            mean_difference: diff,
        });
    }
    let se = (pooled * (1.0 / n1 as f64 + 1.0 / n2 as f64)).sqrt();
    let t = diff / se;
    Ok(TestResult {
        statistic: t,
        df,
        df2: None,
        p_value: t_two_sided_p(t, df),
    })
}

/// Independent-samples t-test with pooled variance, two-sided.
pub fn student_t(a: &[f64], b: &[f64]) -> Result<TestResult, StatsError> {
    check(a, 2)?;
    check(b, 2)?;
    pooled_t(
        (mean(a), sample_variance(a), a.len()),
        (mean(b), sample_variance(b), b.len()),
    )
}

/// Pooled t-test from group means, standard deviations and sizes.
pub fn t_from_summary(
    m1: f64,
    sd1: f64,
    n1: usize,
    m2: f64,
    sd2: f64,
    n2: usize,
) -> Result<TestResult, StatsError> {
    for n in [n1, n2] {
        if n < 2 {
            return Err(StatsError::TooFew { need: 2, got: n });
        }
    }
    for sd in [sd1, sd2] {
        if sd.is_nan() || sd < 0.0 {
            return Err(StatsError::NegativeSd(sd));
        }
    }
    pooled_t((m1, sd1 * sd1, n1), (m2, sd2 * sd2, n2))
}

/// Average ranks (1-based), ties share the mean of their positions.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut out = vec![0.0; xs.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && xs[order[end]] == xs[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            out[i] = avg;
        }
        start = end;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::ConstantSample);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation. The p-value uses the t approximation
/// `t = ρ·sqrt((n−2)/(1−ρ²))` on n − 2 degrees of freedom.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<TestResult, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    check(x, 3)?;
    check(y, 3)?;
    let rho = pearson(&ranks(x), &ranks(y))?;
    let df = (x.len() - 2) as f64;
    let p_value = if rho.abs() >= 1.0 {
        0.0
    } else {
        t_two_sided_p(rho * (df / (1.0 - rho * rho)).sqrt(), df)
    };
    Ok(TestResult {
        statistic: rho,
        df,
        df2: None,
        p_value,
    })
}

/// One-way ANOVA F test.
pub fn oneway_anova(groups: &[&[f64]]) -> Result<TestResult, StatsError> {
    if groups.len() < 2 {
        return Err(StatsError::TooFew {
            need: 2,
            got: groups.len(),
        });
    }
    for g in groups {
        check(g, 2)?;
    }
    let k = groups.len();
    let n: usize = groups.iter().map(|g| g.len()).sum();
    let grand = groups.iter().flat_map(|g| g.iter()).sum::<f64>() / n as f64;
    let mut ss_between = 0.0;
    let mut ss_within = 0.0;
    for g in groups {
        let m = mean(g);
        ss_between += g.len() as f64 * (m - grand).powi(2);
        ss_within += g.iter().map(|x| (x - m).powi(2)).sum::<f64>();
    }
    let (d1, d2) = ((k - 1) as f64, (n - k) as f64);
    let means: Vec<f64> = groups.iter().map(|g| mean(g)).collect();
    if ss_within == 0.0 {
        if means.iter().all(|&m| m == means[0]) {
            return Ok(TestResult {
                statistic: 0.0,
                df: d1,
                df2: Some(d2),
                p_value: 1.0,
            });
        }
        let spread = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - means.iter().cloned().fold(f64::INFINITY, f64::min);
        return Err(StatsError::InfiniteStatistic {
            mean_difference: spread,
        });
    }
    let f = (ss_between / d1) / (ss_within / d2);
    Ok(TestResult {
        statistic: f,
        df: d1,
        df2: Some(d2),
        p_value: f_upper_p(f, d1, d2),
    })
}
