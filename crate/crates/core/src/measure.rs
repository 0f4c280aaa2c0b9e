//! Finite probability measures, random vectors on them, and the
//! entropy-adjusted mean.
//!
//! A [`Measure`] is a strictly positive weight vector summing to one. Every
//! random variable is a vector of outcome values aligned with the weights.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numeric::{ln_sum_exp, sum};

/// Tolerance on the weight sum accepted by [`Measure::new`].
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Below `SMALL_ALPHA / range` the entropy-adjusted mean switches to its
/// second-order cumulant expansion.
pub const SMALL_ALPHA: f64 = 1e-8;

/// Strictly positive probability weights over a finite outcome set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Measure {
    weights: Vec<f64>,
}

impl Measure {
    /// Validates positivity and that the weights sum to one.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        check_positive(&weights)?;
        let total = sum(&weights);
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return invalid(format!("weights sum to {total}, expected 1"));
        }
        Ok(Self { weights })
    }

    /// Normalises a strictly positive (but unnormalised) weight vector.
    pub fn from_unnormalised(weights: Vec<f64>) -> Result<Self> {
        check_positive(&weights)?;
        let total = sum(&weights);
        if !total.is_finite() {
            return invalid("weight sum is not finite");
        }
        Ok(Self {
            weights: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    /// Builds `w_i ∝ exp(log_weights_i)` without overflow.
    pub fn from_log_weights(log_weights: &[f64]) -> Result<Self> {
        if log_weights.is_empty() {
            return invalid("measure needs at least one outcome");
        }
        if log_weights.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::NonNormalisableTilt(
                "log-weight is NaN or +inf".into(),
            ));
        }
        let top = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if top == f64::NEG_INFINITY {
            return Err(Error::NonNormalisableTilt("all weights vanish".into()));
        }
        let raw: Vec<f64> = log_weights.iter().map(|v| (v - top).exp()).collect();
        let total = sum(&raw);
        let weights: Vec<f64> = raw.into_iter().map(|w| w / total).collect();
        if let Some(i) = weights.iter().position(|w| *w <= 0.0) {
            return Err(Error::NonNormalisableTilt(format!(
                "weight of outcome {i} underflows to zero"
            )));
        }
        Ok(Self { weights })
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "uniform measure needs at least one outcome");
        Self {
            weights: vec![1.0 / n as f64; n],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn log_weights(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w.ln()).collect()
    }

    pub fn mean(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.len());
        let terms: Vec<f64> = self.weights.iter().zip(x).map(|(w, v)| w * v).collect();
        sum(&terms)
    }

    pub fn variance(&self, x: &[f64]) -> f64 {
        self.covariance(x, x)
    }

    pub fn covariance(&self, x: &[f64], y: &[f64]) -> f64 {
        let mx = self.mean(x);
        let my = self.mean(y);
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(x.iter().zip(y))
            .map(|(w, (a, b))| w * (a - mx) * (b - my))
            .collect();
        sum(&terms)
    }

    /// Expectation of an indicator.
    pub fn probability(&self, event: impl Fn(usize) -> bool) -> f64 {
        let terms: Vec<f64> = (0..self.len())
            .filter(|i| event(*i))
            .map(|i| self.weights[i])
            .collect();
        sum(&terms)
    }

    pub(crate) fn check_len(&self, what: &'static str, got: usize) -> Result<()> {
        if got != self.len() {
            return Err(Error::DimensionMismatch {
                what,
                expected: self.len(),
                got,
            });
        }
        Ok(())
    }
}

impl TryFrom<Vec<f64>> for Measure {
    type Error = Error;
    fn try_from(weights: Vec<f64>) -> Result<Self> {
        Measure::new(weights)
    }
}

impl From<Measure> for Vec<f64> {
    fn from(m: Measure) -> Self {
        m.weights
    }
}

fn check_positive(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return invalid("measure needs at least one outcome");
    }
    for (i, w) in weights.iter().enumerate() {
        if !w.is_finite() || *w <= 0.0 {
            return invalid(format!("weight {i} = {w} is not strictly positive"));
        }
    }
    Ok(())
}

/// Outcome-by-component matrix of a vector-valued random variable.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomVector {
    values: DMatrix<f64>,
}

impl RandomVector {
    pub fn new(values: DMatrix<f64>) -> Self {
        Self { values }
    }

    pub fn scalar(values: &[f64]) -> Self {
        Self {
            values: DMatrix::from_column_slice(values.len(), 1, values),
        }
    }

    /// Builds from one vector of outcome values per component.
    pub fn from_components(components: &[Vec<f64>]) -> Result<Self> {
        let n = components.first().map_or(0, Vec::len);
        if components.iter().any(|c| c.len() != n) {
            return invalid("components have different numbers of outcomes");
        }
        Ok(Self {
            values: DMatrix::from_fn(n, components.len(), |i, j| components[j][i]),
        })
    }

    pub fn outcomes(&self) -> usize {
        self.values.nrows()
    }

    pub fn components(&self) -> usize {
        self.values.ncols()
    }

    pub fn component(&self, j: usize) -> Vec<f64> {
        self.values.column(j).iter().copied().collect()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.values
    }
}

/// Non-negative risk aversion, possibly infinite.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct RiskAversion(f64);

impl RiskAversion {
    pub const INFINITE: RiskAversion = RiskAversion(f64::INFINITY);
    pub const NEUTRAL: RiskAversion = RiskAversion(0.0);

    pub fn new(alpha: f64) -> Result<Self> {
        if alpha.is_nan() || alpha < 0.0 {
            return invalid(format!("risk aversion {alpha} must be non-negative"));
        }
        Ok(Self(alpha))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_infinite(self) -> bool {
        self.0.is_infinite()
    }
}

impl TryFrom<f64> for RiskAversion {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        RiskAversion::new(v)
    }
}

impl From<RiskAversion> for f64 {
    fn from(a: RiskAversion) -> f64 {
        a.0
    }
}

/// First and second moments of `X` (and optionally its covariance with `Y`).
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean_x: DVector<f64>,
    pub cov_x: DMatrix<f64>,
    pub mean_y: Option<DVector<f64>>,
    pub cross: Option<DMatrix<f64>>,
}

pub fn moments(m: &Measure, x: &RandomVector, y: Option<&RandomVector>) -> Result<Moments> {
    m.check_len("outcomes of X", x.outcomes())?;
    if let Some(y) = y {
        m.check_len("outcomes of Y", y.outcomes())?;
    }
    let mean = |v: &RandomVector| {
        DVector::from_fn(v.components(), |j, _| {
            m.mean(v.values.column(j).as_slice())
        })
    };
    let centred = |v: &RandomVector, mu: &DVector<f64>| {
        DMatrix::from_fn(v.outcomes(), v.components(), |i, j| {
            (v.values[(i, j)] - mu[j]) * m.weights[i].sqrt()
        })
    };
    let mean_x = mean(x);
    let cx = centred(x, &mean_x);
    let cov_x = cx.transpose() * &cx;
    let (mean_y, cross) = match y {
        Some(y) => {
            let mean_y = mean(y);
            let cy = centred(y, &mean_y);
            (Some(mean_y), Some(cx.transpose() * cy))
        }
        None => (None, None),
    };
    Ok(Moments {
        mean_x,
        cov_x,
        mean_y,
        cross,
    })
}

/// Essential infimum and supremum.
pub fn ess_bounds(x: &[f64]) -> (f64, f64) {
    x.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(*v), hi.max(*v))
        })
}

/// `-(1/α) log E[exp(-α X)]`, with `α = 0` the mean, `α = +∞` the essential
/// infimum and `α = -∞` the essential supremum.
pub fn entropy_adjusted_mean(m: &Measure, x: &[f64], alpha: f64) -> Result<f64> {
    m.check_len("outcomes of X", x.len())?;
    if alpha.is_nan() {
        return invalid("risk aversion is NaN");
    }
    if x.iter().any(|v| !v.is_finite()) {
        return invalid("random variable has non-finite values");
    }
    let (lo, hi) = ess_bounds(x);
    if alpha == f64::INFINITY {
        return Ok(lo);
    }
    if alpha == f64::NEG_INFINITY {
        return Ok(hi);
    }
    let mean = m.mean(x);
    let range = hi - lo;
    if alpha == 0.0 || alpha.abs() * range < SMALL_ALPHA {
        return Ok(mean - 0.5 * alpha * m.variance(x));
    }
    let exponents: Vec<f64> = x.iter().map(|v| -alpha * (v - mean)).collect();
    let lw = m.log_weights();
    if alpha.abs() * range <= 0.5 {
        let terms: Vec<f64> = m
            .weights
            .iter()
            .zip(&exponents)
            .map(|(w, y)| w * y.exp_m1())
            .collect();
        return Ok(mean - sum(&terms).ln_1p() / alpha);
    }
    let shifted: Vec<f64> = lw.iter().zip(&exponents).map(|(a, b)| a + b).collect();
    Ok(mean - ln_sum_exp(&shifted) / alpha)
}

/// Measure with weights `∝ m · exp(-α X - ζ X² / 2)`.
pub fn exponential_tilt(m: &Measure, x: &[f64], alpha: f64, zeta: f64) -> Result<Measure> {
    m.check_len("outcomes of X", x.len())?;
    if !alpha.is_finite() || !zeta.is_finite() {
        return invalid("tilt parameters must be finite");
    }
    let log_w: Vec<f64> = m
        .weights
        .iter()
        .zip(x)
        .map(|(w, v)| w.ln() - alpha * v - 0.5 * zeta * v * v)
        .collect();
    Measure::from_log_weights(&log_w)
}

/// `S[m̄ | m] = Σ m̄ log(m̄ / m)`.
pub fn relative_entropy(mbar: &Measure, m: &Measure) -> Result<f64> {
    m.check_len("outcomes of the reference measure", mbar.len())?;
    let terms: Vec<f64> = mbar
        .weights
        .iter()
        .zip(&m.weights)
        .map(|(a, b)| a * (a / b).ln())
        .collect();
    Ok(sum(&terms))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_weights() {
        assert!(Measure::new(vec![0.5, 0.49]).is_err());
        assert!(Measure::new(vec![1.0, 0.0]).is_err());
        assert!(Measure::new(vec![1.5, -0.5]).is_err());
        assert!(Measure::new(vec![]).is_err());
        assert!(Measure::new(vec![0.25, 0.75]).is_ok());
    }

    #[test]
    fn symmetric_two_point() {
        let m = Measure::uniform(2);
        let v = entropy_adjusted_mean(&m, &[-1.0, 1.0], 1.0).unwrap();
        assert!((v + 1f64.cosh().ln()).abs() < 1e-15);
        assert!((v + 0.433_780_830_483_027).abs() < 1e-12);
    }

    #[test]
    fn infinite_aversion_is_essential_bound() {
        let m = Measure::new(vec![0.2, 0.3, 0.5]).unwrap();
        let x = [3.0, -2.0, 7.0];
        assert_eq!(entropy_adjusted_mean(&m, &x, f64::INFINITY).unwrap(), -2.0);
        assert_eq!(entropy_adjusted_mean(&m, &x, f64::NEG_INFINITY).unwrap(), 7.0);
        assert!((entropy_adjusted_mean(&m, &x, 0.0).unwrap() - m.mean(&x)).abs() < 1e-15);
    }

    #[test]
    fn tilt_of_fair_coin() {
        let m = Measure::uniform(2);
        let t = exponential_tilt(&m, &[0.0, 1.0], 3f64.ln(), 0.0).unwrap();
        assert!((t.weights()[0] - 0.75).abs() < 1e-15);
        assert!((t.weights()[1] - 0.25).abs() < 1e-15);
        let s = relative_entropy(&t, &m).unwrap();
        let expected = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((s - expected).abs() < 1e-15);
        assert!((s - 0.130_812).abs() < 1e-6);
    }

    #[test]
    fn tilt_underflow_is_reported() {
        let m = Measure::uniform(2);
        let err = exponential_tilt(&m, &[0.0, 1.0], 1e4, 0.0).unwrap_err();
        assert!(matches!(err, Error::NonNormalisableTilt(_)));
    }

    #[test]
    fn moments_of_pair() {
        let m = Measure::new(vec![0.25, 0.25, 0.5]).unwrap();
        let x = RandomVector::from_components(&[vec![1.0, 2.0, 3.0], vec![0.0, 1.0, 1.0]]).unwrap();
        let y = RandomVector::scalar(&[2.0, 4.0, 6.0]);
        let mo = moments(&m, &x, Some(&y)).unwrap();
        assert!((mo.mean_x[0] - 2.25).abs() < 1e-15);
        let var0 = 0.25 * 1.0 + 0.25 * 4.0 + 0.5 * 9.0 - 2.25 * 2.25;
        assert!((mo.cov_x[(0, 0)] - var0).abs() < 1e-14);
        assert!((mo.cross.unwrap()[(0, 0)] - 2.0 * var0).abs() < 1e-14);
    }
}
