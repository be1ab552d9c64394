//! Effect sizes and significance tests.
//!
//! Degenerate inputs never produce NaN or infinity: they come back as
//! [`StatsError::Undefined`], which [`estimate_effect`] turns into an
//! explicit `undefined_zero_variance` estimate.

mod estimate;
pub mod special;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use estimate::{estimate_effect, EffectEstimate, EstimateError, EstimateState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degeneracy {
    ZeroVariance,
    ZeroExpectedCount,
    ZeroPooledProportion,
    PerfectCorrelation,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("need at least {needed} observations per group, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("paired inputs differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("statistic undefined: {0:?}")]
    Undefined(Degeneracy),
}

pub type Result<T> = std::result::Result<T, StatsError>;

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased (n − 1) sample variance, two-pass.
pub fn sample_variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

fn need(n: usize, needed: usize) -> Result<()> {
    if n < needed {
        Err(StatsError::TooFew { needed, got: n })
    } else {
        Ok(())
    }
}

/// Cohen's d with pooled standard deviation: (mean(x) − mean(y)) / s_pooled.
pub fn cohens_d(x: &[f64], y: &[f64]) -> Result<f64> {
    need(x.len().min(y.len()), 2)?;
    let (n1, n2) = (x.len() as f64, y.len() as f64);
    let pooled =
        ((n1 - 1.0) * sample_variance(x) + (n2 - 1.0) * sample_variance(y)) / (n1 + n2 - 2.0);
    if !(pooled > 0.0) {
        return Err(StatsError::Undefined(Degeneracy::ZeroVariance));
    }
    Ok((mean(x) - mean(y)) / pooled.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

/// Welch's two-sample t-test, two-sided.
pub fn t_test(x: &[f64], y: &[f64]) -> Result<TTest> {
    need(x.len().min(y.len()), 2)?;
    let (n1, n2) = (x.len() as f64, y.len() as f64);
    let (a, b) = (sample_variance(x) / n1, sample_variance(y) / n2);
    let se2 = a + b;
    if !(se2 > 0.0) {
        return Err(StatsError::Undefined(Degeneracy::ZeroVariance));
    }
    let t = (mean(x) - mean(y)) / se2.sqrt();
    let df = se2 * se2 / (a * a / (n1 - 1.0) + b * b / (n2 - 1.0));
    Ok(TTest { t, df, p_value: special::student_t_two_sided_p(t, df) })
}

/// 2×2 contingency table; rows are conditions, columns success/failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TwoByTwo {
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
}

impl TwoByTwo {
    pub fn new(a: u64, b: u64, c: u64, d: u64) -> Self {
        Self { a, b, c, d }
    }

    pub fn total(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }

    /// Same table with the two rows exchanged.
    pub fn swap_rows(&self) -> Self {
        Self { a: self.c, b: self.d, c: self.a, d: self.b }
    }
}

/// Odds ratio (a·d)/(b·c), with 0.5 added to every cell when any is zero.
pub fn odds_ratio(t: &TwoByTwo) -> Result<f64> {
    if t.total() == 0 {
        return Err(StatsError::InvalidInput("empty 2x2 table".into()));
    }
    let [a, b, c, d] = [t.a, t.b, t.c, t.d].map(|v| v as f64);
    let k = if [a, b, c, d].contains(&0.0) { 0.5 } else { 0.0 };
    Ok(((a + k) * (d + k)) / ((b + k) * (c + k)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquared {
    pub statistic: f64,
    pub p_value: f64,
}

/// Pearson χ² on a 2×2 table (df = 1, no continuity correction).
pub fn chi_squared_test(t: &TwoByTwo) -> Result<ChiSquared> {
    let n = t.total() as f64;
    if n == 0.0 {
        return Err(StatsError::InvalidInput("empty 2x2 table".into()));
    }
    let rows = [(t.a + t.b) as f64, (t.c + t.d) as f64];
    let cols = [(t.a + t.c) as f64, (t.b + t.d) as f64];
    let observed = [[t.a as f64, t.b as f64], [t.c as f64, t.d as f64]];
    let mut stat = 0.0;
    for (i, row) in rows.iter().enumerate() {
        for (j, col) in cols.iter().enumerate() {
            let expected = row * col / n;
            if expected <= 0.0 {
                return Err(StatsError::Undefined(Degeneracy::ZeroExpectedCount));
            }
            let diff = observed[i][j] - expected;
            stat += diff * diff / expected;
        }
    }
    Ok(ChiSquared { statistic: stat, p_value: special::chi_squared_sf(stat, 1.0) })
}

/// Sample Pearson correlation.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    need(x.len(), 3)?;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if !(sxx > 0.0 && syy > 0.0) {
        return Err(StatsError::Undefined(Degeneracy::ZeroVariance));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

fn fisher_z(r: f64) -> Result<f64> {
    if !r.is_finite() {
        return Err(StatsError::InvalidInput(format!("correlation {r} is not finite")));
    }
    if r.abs() >= 1.0 {
        return Err(StatsError::Undefined(Degeneracy::PerfectCorrelation));
    }
    Ok(r.atanh())
}

/// Cohen's q = atanh(r1) − atanh(r2).
pub fn cohens_q(r1: f64, r2: f64) -> Result<f64> {
    Ok(fisher_z(r1)? - fisher_z(r2)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZTest {
    pub z: f64,
    pub p_value: f64,
}

/// Two-sided test of equal correlations via Fisher's z transform.
pub fn fisher_z_test(r1: f64, n1: usize, r2: f64, n2: usize) -> Result<ZTest> {
    need(n1.min(n2), 4)?;
    let q = cohens_q(r1, r2)?;
    let se = (1.0 / (n1 as f64 - 3.0) + 1.0 / (n2 as f64 - 3.0)).sqrt();
    let z = q / se;
    Ok(ZTest { z, p_value: special::normal_two_sided_p(z) })
}

/// Two-sided pooled two-proportion z test.
pub fn two_proportion_z(s1: u64, n1: u64, s2: u64, n2: u64) -> Result<ZTest> {
    if n1 == 0 || n2 == 0 {
        return Err(StatsError::TooFew { needed: 1, got: 0 });
    }
    if s1 > n1 || s2 > n2 {
        return Err(StatsError::InvalidInput("successes exceed group size".into()));
    }
    let (n1f, n2f) = (n1 as f64, n2 as f64);
    let pooled = (s1 + s2) as f64 / (n1f + n2f);
    if pooled <= 0.0 || pooled >= 1.0 {
        return Err(StatsError::Undefined(Degeneracy::ZeroPooledProportion));
    }
    let se = (pooled * (1.0 - pooled) * (1.0 / n1f + 1.0 / n2f)).sqrt();
    let z = (s1 as f64 / n1f - s2 as f64 / n2f) / se;
    Ok(ZTest { z, p_value: special::normal_two_sided_p(z) })
}
