//! Calibration of the price measure and the funding rate.
//!
//! The price measure is the exponential tilt `γ ∝ m · exp(-φ · dq)` that
//! reprices every traded asset at the common funding rate `r`, with the
//! self-funding constraint `φ · q = 0`.

use nalgebra::{DMatrix, DVector};
use serde::ser::{Serialize, Serializer};

use crate::engine::{calibrate_family, SampleFamily, Structure};
use crate::error::{invalid, Error, Result};
use crate::measure::{relative_entropy, Measure};
use crate::numeric::{bisect, newton_polish};

pub use crate::engine::SolverConfig;

/// Traded assets with current prices `q` and final prices per outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMarket {
    q: DVector<f64>,
    /// Outcomes by assets.
    finals: DMatrix<f64>,
    dt: f64,
}

impl SampleMarket {
    pub fn new(q: Vec<f64>, finals: DMatrix<f64>, dt: f64) -> Result<Self> {
        if q.is_empty() {
            return invalid("market needs at least one asset");
        }
        if finals.ncols() != q.len() {
            return Err(Error::DimensionMismatch {
                what: "assets in final prices",
                expected: q.len(),
                got: finals.ncols(),
            });
        }
        if finals.nrows() == 0 {
            return invalid("market needs at least one outcome");
        }
        if q.iter().chain(finals.iter()).any(|v| !v.is_finite()) {
            return invalid("market prices must be finite");
        }
        if q.iter().all(|v| *v == 0.0) {
            return invalid("at least one asset must have a non-zero price");
        }
        if !(dt.is_finite() && dt > 0.0) {
            return invalid(format!("time step {dt} must be positive"));
        }
        Ok(Self {
            q: DVector::from_vec(q),
            finals,
            dt,
        })
    }

    /// Builds from one vector of final prices per outcome.
    pub fn from_rows(q: Vec<f64>, rows: &[Vec<f64>], dt: f64) -> Result<Self> {
        let n = q.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(Error::DimensionMismatch {
                what: "assets in an outcome row",
                expected: n,
                got: bad.len(),
            });
        }
        let finals = DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]);
        Self::new(q, finals, dt)
    }

    pub fn q(&self) -> &DVector<f64> {
        &self.q
    }

    pub fn finals(&self) -> &DMatrix<f64> {
        &self.finals
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn assets(&self) -> usize {
        self.q.len()
    }

    pub fn outcomes(&self) -> usize {
        self.finals.nrows()
    }

    /// Price increments `Q - q`, outcomes by assets.
    pub fn dq(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.finals.nrows(), self.q.len(), |i, j| {
            self.finals[(i, j)] - self.q[j]
        })
    }

    /// Final price of one asset across outcomes.
    pub fn asset(&self, j: usize) -> Vec<f64> {
        self.finals.column(j).iter().copied().collect()
    }
}

/// Calibrated price measure.
#[derive(Debug, Clone)]
pub struct CalibrationResult {
    pub phi: DVector<f64>,
    pub r: f64,
    pub gamma: Measure,
    /// `E^φ[dq] - q r dt`.
    pub residual: DVector<f64>,
    pub iterations: usize,
    pub(crate) structure: Structure,
}

impl CalibrationResult {
    pub fn residual_norm(&self) -> f64 {
        self.residual.norm()
    }
}

impl Serialize for CalibrationResult {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(serde::Serialize)]
        struct Report<'a> {
            phi: &'a [f64],
            r: f64,
            gamma: &'a [f64],
            residual_norm: f64,
            iterations: usize,
        }
        Report {
            phi: self.phi.as_slice(),
            r: self.r,
            gamma: self.gamma.weights(),
            residual_norm: self.residual_norm(),
            iterations: self.iterations,
        }
        .serialize(s)
    }
}

/// Solves `E^φ[dq] = q r dt`, `φ · q = 0` for a sample market.
pub fn calibrate(market: &SampleMarket, m: &Measure, cfg: &SolverConfig) -> Result<CalibrationResult> {
    m.check_len("outcomes of the market", market.outcomes())?;
    let dq = market.dq();
    let family = SampleFamily {
        base: m.log_weights(),
        dq: &dq,
    };
    let cal = calibrate_family(&family, market.q(), cfg)?;
    let gamma = Measure::from_log_weights(&family.log_weights(&(-&cal.phi)))?;
    Ok(CalibrationResult {
        phi: cal.phi,
        r: cal.rate_dt / market.dt(),
        gamma,
        residual: cal.residual,
        iterations: cal.iterations,
        structure: cal.structure,
    })
}

/// Funding parameters of a jointly normal market.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct NormalCalibration {
    pub phi: Vec<f64>,
    pub r: f64,
}

/// Closed-form calibration when `dq` is normal with the given mean and
/// (positive definite) covariance.
pub fn calibrate_normal(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    q: &DVector<f64>,
    dt: f64,
) -> Result<NormalCalibration> {
    let n = q.len();
    if mean.len() != n || cov.nrows() != n || cov.ncols() != n {
        return Err(Error::DimensionMismatch {
            what: "normal market moments",
            expected: n,
            got: mean.len(),
        });
    }
    let ch = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("covariance is not positive definite".into()))?;
    let vq = ch.solve(q);
    let rate_dt = vq.dot(mean) / vq.dot(q);
    let phi = ch.solve(&(mean - q * rate_dt));
    Ok(NormalCalibration {
        phi: phi.iter().copied().collect(),
        r: rate_dt / dt,
    })
}

/// One asset of a market whose assets are independent.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AssetSpec {
    /// Price increment normal with mean `q μ dt` and variance `q² σ² dt`.
    Normal { q: f64, mu: f64, sigma: f64 },
    /// Final price `0` with probability `w`, else `1 + c dt`.
    Binomial { q: f64, coupon: f64, default_prob: f64 },
}

/// Funding rate and tilts of an independent-asset market.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct IndependentFunding {
    pub r: f64,
    pub phi: Vec<f64>,
}

impl AssetSpec {
    fn validate(&self) -> Result<()> {
        match *self {
            AssetSpec::Normal { q, mu, sigma } => {
                if !(q.is_finite() && q != 0.0 && mu.is_finite() && sigma.is_finite() && sigma >= 0.0) {
                    return invalid(format!("invalid normal asset {self:?}"));
                }
            }
            AssetSpec::Binomial { q, coupon, default_prob } => {
                if !(q.is_finite() && q > 0.0 && coupon.is_finite()) {
                    return invalid(format!("invalid binomial asset {self:?}"));
                }
                if !(default_prob > 0.0 && default_prob < 1.0) {
                    return invalid(format!("default probability {default_prob} must lie in (0, 1)"));
                }
            }
        }
        Ok(())
    }

    /// Tilt of this asset at funding rate `r`, and its derivative in `r`.
    fn tilt(&self, r: f64, dt: f64) -> (f64, f64) {
        match *self {
            AssetSpec::Normal { q, mu, sigma } => {
                let s2 = sigma * sigma;
                ((mu - r) / (q * s2), -1.0 / (q * s2))
            }
            AssetSpec::Binomial { q, coupon, default_prob: w } => {
                let u = 1.0 + coupon * dt;
                let a = q * (1.0 + r * dt);
                let inner = u / a - 1.0;
                let phi = (((1.0 - w) / w) * inner).ln() / u;
                let dinner = -u * q * dt / (a * a);
                (phi, dinner / (inner * u))
            }
        }
    }

    fn price(&self) -> f64 {
        match *self {
            AssetSpec::Normal { q, .. } | AssetSpec::Binomial { q, .. } => q,
        }
    }

    /// Open interval of funding rates with a finite tilt.
    fn rate_window(&self, dt: f64) -> (f64, f64) {
        match *self {
            AssetSpec::Normal { .. } => (f64::NEG_INFINITY, f64::INFINITY),
            AssetSpec::Binomial { q, coupon, .. } => {
                (-1.0 / dt, ((1.0 + coupon * dt) / q - 1.0) / dt)
            }
        }
    }
}

/// Funding rate of a market of independent assets: each asset's tilt
/// `φ_i(r)` is known in closed form and `r` solves `Σ q_i φ_i(r) = 0`.
pub fn funding_rate_independent(assets: &[AssetSpec], dt: f64) -> Result<IndependentFunding> {
    if assets.is_empty() {
        return invalid("market needs at least one asset");
    }
    if !(dt.is_finite() && dt > 0.0) {
        return invalid(format!("time step {dt} must be positive"));
    }
    for a in assets {
        a.validate()?;
    }

    // A riskless normal asset fixes the rate outright.
    let riskless: Vec<(usize, f64)> = assets
        .iter()
        .enumerate()
        .filter_map(|(i, a)| match *a {
            AssetSpec::Normal { mu, sigma, .. } if sigma == 0.0 => Some((i, mu)),
            _ => None,
        })
        .collect();
    if let Some(&(first, r)) = riskless.first() {
        if riskless.iter().any(|(_, mu)| (mu - r).abs() > 1e-15 * (1.0 + r.abs())) {
            return Err(Error::Infeasible("riskless assets with different drifts".into()));
        }
        let mut phi: Vec<f64> = assets.iter().map(|a| if is_riskless(a) { 0.0 } else { a.tilt(r, dt).0 }).collect();
        for (i, a) in assets.iter().enumerate() {
            if let AssetSpec::Binomial { .. } = a {
                let (lo, hi) = a.rate_window(dt);
                if !(r > lo && r < hi) {
                    return Err(Error::Infeasible(format!(
                        "riskless rate {r} is outside the admissible window of asset {i}"
                    )));
                }
            }
        }
        let balance: f64 = assets.iter().zip(&phi).map(|(a, p)| a.price() * p).sum();
        phi[first] = -balance / assets[first].price();
        return Ok(IndependentFunding { r, phi });
    }

    let (mut lo, mut hi) = assets.iter().fold((f64::NEG_INFINITY, f64::INFINITY), |(lo, hi), a| {
        let (l, h) = a.rate_window(dt);
        (lo.max(l), hi.min(h))
    });
    if !(lo < hi) {
        return Err(Error::Infeasible("assets admit no common funding rate".into()));
    }
    let drifts: Vec<f64> = assets
        .iter()
        .filter_map(|a| match *a {
            AssetSpec::Normal { mu, .. } => Some(mu),
            _ => None,
        })
        .collect();
    let balance = |r: f64| -> f64 {
        assets.iter().map(|a| a.price() * a.tilt(r, dt).0).sum()
    };
    let slope = |r: f64| -> f64 {
        assets.iter().map(|a| a.price() * a.tilt(r, dt).1).sum()
    };
    let width = |l: f64, h: f64| (h - l).abs().max(1.0);
    if lo == f64::NEG_INFINITY {
        lo = drifts.iter().cloned().fold(f64::INFINITY, f64::min) - 1.0;
        while balance(lo) <= 0.0 {
            lo -= width(lo, hi);
        }
    } else {
        lo = inner_edge(lo, hi, |r| balance(r) > 0.0)?;
    }
    if hi == f64::INFINITY {
        hi = drifts.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1.0;
        while balance(hi) >= 0.0 {
            hi += width(lo, hi);
        }
    } else {
        hi = inner_edge(hi, lo, |r| balance(r) < 0.0)?;
    }
    let root = bisect(balance, lo, hi, 1e-15 * (1.0 + lo.abs().max(hi.abs())))?;
    let r = newton_polish(|r| (balance(r), slope(r)), root, lo, hi, 5);
    let phi = assets.iter().map(|a| a.tilt(r, dt).0).collect();
    Ok(IndependentFunding { r, phi })
}

fn is_riskless(a: &AssetSpec) -> bool {
    matches!(a, AssetSpec::Normal { sigma, .. } if *sigma == 0.0)
}

/// Steps in from an open-interval `edge` towards `other` until `ok` holds.
fn inner_edge(edge: f64, other: f64, ok: impl Fn(f64) -> bool) -> Result<f64> {
    let finite_other = if other.is_finite() { other } else { edge + (other.signum()) };
    let span = finite_other - edge;
    let mut eps = 1e-3;
    for _ in 0..60 {
        let r = edge + span * eps;
        if r != edge && ok(r) {
            return Ok(r);
        }
        eps *= 0.25;
    }
    Err(Error::NoBracket(format!("no sign change near the funding window edge {edge}")))
}

/// Relative-entropy gap `S[Ē | m] - S[γ | m]` for a calibrated `Ē`.
///
/// `Ē` must reprice the market at the calibrated rate to within `tol`;
/// the gap is non-negative because `γ` has minimal relative entropy among
/// calibrated measures.
pub fn min_entropy_check(
    market: &SampleMarket,
    m: &Measure,
    result: &CalibrationResult,
    ebar: &Measure,
    tol: f64,
) -> Result<f64> {
    m.check_len("outcomes of the market", market.outcomes())?;
    m.check_len("outcomes of the candidate measure", ebar.len())?;
    let dq = market.dq();
    let target = market.q() * (result.r * market.dt());
    let mean = DVector::from_fn(market.assets(), |j, _| ebar.mean(dq.column(j).as_slice()));
    let miss = (&mean - &target).norm();
    if miss > tol {
        return invalid(format!(
            "candidate measure is not calibrated (pricing error {miss:.3e})"
        ));
    }
    Ok(relative_entropy(ebar, m)? - relative_entropy(&result.gamma, m)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coin_market() -> SampleMarket {
        SampleMarket::from_rows(vec![1.0, 1.0], &[vec![1.0, 0.0], vec![1.0, 2.0]], 1.0).unwrap()
    }

    #[test]
    fn fair_coin_needs_no_tilt() {
        let cal = calibrate(&coin_market(), &Measure::uniform(2), &SolverConfig::default()).unwrap();
        assert!(cal.phi.amax() < 1e-15);
        assert!(cal.r.abs() < 1e-15);
    }

    #[test]
    fn biased_coin_is_tilted_back() {
        let m = Measure::new(vec![1.0 / 3.0, 2.0 / 3.0]).unwrap();
        let cal = calibrate(&coin_market(), &m, &SolverConfig::default()).unwrap();
        assert!((cal.phi[1] - 2f64.ln() / 2.0).abs() < 1e-12);
        assert!(cal.phi.dot(coin_market().q()).abs() < 1e-14);
        assert!(cal.r.abs() < 1e-14);
        assert!((cal.gamma.weights()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn deterministic_assets_with_different_rates_are_infeasible() {
        let market = SampleMarket::from_rows(
            vec![1.0, 1.0, 1.0],
            &[vec![1.01, 1.02, 0.5], vec![1.01, 1.02, 1.5]],
            1.0,
        )
        .unwrap();
        let err = calibrate(&market, &Measure::uniform(2), &SolverConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)), "{err:?}");
    }

    #[test]
    fn dominated_asset_is_infeasible() {
        // The risky asset never beats the riskless one.
        let market = SampleMarket::from_rows(vec![1.0, 1.0], &[vec![1.0, 0.5], vec![1.0, 0.9]], 1.0).unwrap();
        let err = calibrate(&market, &Measure::uniform(2), &SolverConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)), "{err:?}");
    }

    #[test]
    fn single_normal_asset_earns_its_drift() {
        let q = DVector::from_vec(vec![2.0]);
        let (mu, sigma, dt) = (0.07, 0.3, 0.5);
        let mean = DVector::from_vec(vec![2.0 * mu * dt]);
        let cov = DMatrix::from_element(1, 1, 4.0 * sigma * sigma * dt);
        let cal = calibrate_normal(&mean, &cov, &q, dt).unwrap();
        assert!((cal.r - mu).abs() < 1e-15);
        assert!(cal.phi[0].abs() < 1e-15);
    }

    #[test]
    fn binomial_twins_fund_at_survival_yield() {
        let b = AssetSpec::Binomial { q: 1.0, coupon: 0.10, default_prob: 0.01 };
        let f = funding_rate_independent(&[b, b], 1.0).unwrap();
        assert!((f.r - 0.089).abs() < 1e-12, "{}", f.r);
    }
}
