//! Entropic hedging and pricing of a payoff against the traded assets.
//!
//! An investor with risk aversion `α` who holds `λ P` chooses the hedge `δ`
//! that makes the hedged position `P - δ · dq` price-neutral under the
//! hedging measure `∝ γ · exp(-α (P - δ · dq))`. The price is the cost of the
//! hedge, `p = δ · q`, and equals the entropy-adjusted value of the hedged
//! position under the price measure `γ`.

use nalgebra::{DMatrix, DVector};
use serde::ser::{Serialize, Serializer};

use crate::calibrate::{CalibrationResult, SampleMarket, SolverConfig};
use crate::engine::{funded_solve, hedge_family, HedgeTarget, SampleFamily};
use crate::error::{invalid, Error, Result};
use crate::measure::Measure;

/// Final payoff per outcome, scaled by a notional.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Payoff {
    pub values: Vec<f64>,
    #[serde(default = "unit_notional")]
    pub notional: f64,
}

fn unit_notional() -> f64 {
    1.0
}

impl Payoff {
    pub fn new(values: Vec<f64>) -> Self {
        Self {
            values,
            notional: 1.0,
        }
    }

    pub fn with_notional(mut self, notional: f64) -> Self {
        self.notional = notional;
        self
    }

    /// `(Q_asset - strike)⁺`.
    pub fn call(market: &SampleMarket, asset: usize, strike: f64) -> Result<Self> {
        Ok(Self::new(
            column(market, asset)?
                .into_iter()
                .map(|x| (x - strike).max(0.0))
                .collect(),
        ))
    }

    /// `1{Q_asset > strike}`.
    pub fn digital(market: &SampleMarket, asset: usize, strike: f64) -> Result<Self> {
        Ok(Self::new(
            column(market, asset)?
                .into_iter()
                .map(|x| if x > strike { 1.0 } else { 0.0 })
                .collect(),
        ))
    }

    /// `Q_asset - strike`.
    pub fn linear(market: &SampleMarket, asset: usize, strike: f64) -> Result<Self> {
        Ok(Self::new(
            column(market, asset)?.into_iter().map(|x| x - strike).collect(),
        ))
    }

    /// Payoff values including the notional.
    pub fn scaled(&self) -> Vec<f64> {
        self.values.iter().map(|v| v * self.notional).collect()
    }
}

fn column(market: &SampleMarket, asset: usize) -> Result<Vec<f64>> {
    if asset >= market.assets() {
        return invalid(format!(
            "asset index {asset} out of range for {} assets",
            market.assets()
        ));
    }
    Ok(market.asset(asset))
}

/// Hedge and price of a payoff.
#[derive(Debug, Clone)]
pub struct HedgeResult {
    pub delta: DVector<f64>,
    /// Risk spread: the hedging measure funds at `r + α s`.
    pub s: f64,
    pub p: f64,
    /// `λ P - δ · dq` per outcome.
    pub residual_payoff: Vec<f64>,
    /// Variance of the residual payoff under the price measure.
    pub residual_variance: f64,
    pub iterations: usize,
    /// Norm of the hedge-condition residual at the solution.
    pub residual: f64,
}

impl Serialize for HedgeResult {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(serde::Serialize)]
        struct Report<'a> {
            delta: &'a [f64],
            s: f64,
            p: f64,
            residual_variance: f64,
            iterations: usize,
        }
        Report {
            delta: self.delta.as_slice(),
            s: self.s,
            p: self.p,
            residual_variance: self.residual_variance,
            iterations: self.iterations,
        }
        .serialize(s)
    }
}

/// Mid price, half-spread and mid hedge to first order in risk aversion.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderBook {
    pub p0: f64,
    pub half_spread: f64,
    pub delta: DVector<f64>,
}

impl OrderBook {
    pub fn bid(&self) -> f64 {
        self.p0 - self.half_spread
    }

    pub fn offer(&self) -> f64 {
        self.p0 + self.half_spread
    }
}

impl Serialize for OrderBook {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(serde::Serialize)]
        struct Report<'a> {
            p0: f64,
            half_spread: f64,
            bid: f64,
            offer: f64,
            delta: &'a [f64],
        }
        Report {
            p0: self.p0,
            half_spread: self.half_spread,
            bid: self.bid(),
            offer: self.offer(),
            delta: self.delta.as_slice(),
        }
        .serialize(s)
    }
}

fn check_payoff(market: &SampleMarket, payoff: &Payoff) -> Result<Vec<f64>> {
    if payoff.values.len() != market.outcomes() {
        return Err(Error::DimensionMismatch {
            what: "outcomes of the payoff",
            expected: market.outcomes(),
            got: payoff.values.len(),
        });
    }
    if !payoff.notional.is_finite() {
        return invalid("notional must be finite");
    }
    let p = payoff.scaled();
    if p.iter().any(|v| !v.is_finite()) {
        return invalid("payoff values must be finite");
    }
    Ok(p)
}

fn cross_moments(gamma: &Measure, dq: &DMatrix<f64>, x: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    let n = dq.ncols();
    let cols: Vec<Vec<f64>> = (0..n).map(|j| dq.column(j).iter().copied().collect()).collect();
    let cov = DMatrix::from_fn(n, n, |j, k| gamma.covariance(&cols[j], &cols[k]));
    let cross = DVector::from_fn(n, |j, _| gamma.covariance(&cols[j], x));
    (cov, cross)
}

fn residual_of(p: &[f64], dq: &DMatrix<f64>, delta: &DVector<f64>) -> Vec<f64> {
    (0..dq.nrows())
        .map(|i| p[i] - dq.row(i).transpose().dot(delta))
        .collect()
}

/// Risk-neutral (`α = 0`) price and hedge: returns `(δ, s dt, p0)`.
fn mid_hedge(
    market: &SampleMarket,
    calib: &CalibrationResult,
    p: &[f64],
) -> Result<(DVector<f64>, f64, f64)> {
    let dq = market.dq();
    let rate_dt = calib.r * market.dt();
    let p0 = calib.gamma.mean(p) / (1.0 + rate_dt);
    let (cov, cross) = cross_moments(&calib.gamma, &dq, p);
    let (delta, s_dt) = funded_solve(&calib.structure, &cov, &cross, p0)?;
    Ok((delta, s_dt, p0))
}

/// Solves the hedge and price conditions for `λ P` at risk aversion `α`.
///
/// `α = 0` gives the risk-neutral mid price and mid hedge. A negative `α`
/// prices the opposite side of the trade.
pub fn solve_hedge(
    market: &SampleMarket,
    calib: &CalibrationResult,
    payoff: &Payoff,
    alpha: f64,
    cfg: &SolverConfig,
) -> Result<HedgeResult> {
    calib.gamma.check_len("outcomes of the price measure", market.outcomes())?;
    let p = check_payoff(market, payoff)?;
    if !alpha.is_finite() {
        return invalid("risk aversion must be finite for hedging");
    }
    let dq = market.dq();
    let dt = market.dt();
    let rate_dt = calib.r * dt;
    let (mid_delta, mid_s_dt, mid_p) = mid_hedge(market, calib, &p)?;
    let (delta, s, price, iterations, residual) = if alpha == 0.0 {
        (mid_delta, mid_s_dt / dt, mid_p, 0, 0.0)
    } else {
        let base: Vec<f64> = calib
            .gamma
            .log_weights()
            .iter()
            .zip(&p)
            .map(|(lw, pi)| lw - alpha * pi)
            .collect();
        let family = SampleFamily { base, dq: &dq };
        let h = hedge_family(
            &family,
            0.0,
            &calib.structure,
            market.q(),
            rate_dt,
            alpha,
            HedgeTarget::Price,
            Some(&mid_delta),
            cfg,
        )?;
        let s = (h.kappa - rate_dt) / (alpha * dt);
        (h.delta, s, h.value, h.iterations, h.residual)
    };
    let residual_payoff = residual_of(&p, &dq, &delta);
    let residual_variance = calib.gamma.variance(&residual_payoff);
    Ok(HedgeResult {
        delta,
        s,
        p: price,
        residual_payoff,
        residual_variance,
        iterations,
        residual,
    })
}

/// Mid price `E^φ[P] / (1 + r dt)` and the first-order price impact of risk
/// aversion, `α V^φ[P - δ · dq] / (1 + r dt)` with the mid hedge `δ`.
pub fn order_book(
    market: &SampleMarket,
    calib: &CalibrationResult,
    payoff: &Payoff,
    alpha: f64,
) -> Result<OrderBook> {
    let p = check_payoff(market, payoff)?;
    if !(alpha.is_finite() && alpha >= 0.0) {
        return invalid("risk aversion must be finite and non-negative");
    }
    let (delta, _, p0) = mid_hedge(market, calib, &p)?;
    let resid = residual_of(&p, &market.dq(), &delta);
    let rate_dt = calib.r * market.dt();
    Ok(OrderBook {
        p0,
        half_spread: alpha * calib.gamma.variance(&resid) / (1.0 + rate_dt),
        delta,
    })
}

/// Closed-form hedge when `(dq, P)` is jointly normal.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct NormalHedge {
    pub delta: Vec<f64>,
    pub s: f64,
    pub p: f64,
}

/// `mean` and `cov` describe `(dq_1, …, dq_n, P)` under the expectation
/// measure; `r` is the calibrated funding rate.
pub fn hedge_normal(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    q: &DVector<f64>,
    dt: f64,
    alpha: f64,
    r: f64,
) -> Result<NormalHedge> {
    let n = q.len();
    if mean.len() != n + 1 || cov.nrows() != n + 1 || cov.ncols() != n + 1 {
        return Err(Error::DimensionMismatch {
            what: "joint moments of increments and payoff",
            expected: n + 1,
            got: mean.len(),
        });
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return invalid("risk aversion must be finite and non-negative");
    }
    let v = cov.view((0, 0), (n, n)).into_owned();
    let v_dp = cov.view((0, n), (n, 1)).column(0).into_owned();
    let var_p = cov[(n, n)];
    let mean_dq = mean.rows(0, n).into_owned();
    let ch = v
        .cholesky()
        .ok_or_else(|| Error::Singular("increment covariance is not positive definite".into()))?;
    let beta = ch.solve(&v_dp);
    let u = ch.solve(q);
    let k = u.dot(q);
    let growth = 1.0 + r * dt;
    // P - β · Q is normal with this mean and variance.
    let resid_mean = mean[n] - beta.dot(&(&mean_dq + q));
    let resid_var = (var_p - beta.dot(&v_dp)).max(0.0);
    let adjusted = resid_mean - 0.5 * alpha * resid_var;
    let x = 2.0 * alpha * adjusted / (k * growth * growth);
    if 1.0 + x < 0.0 {
        return Err(Error::Infeasible(
            "risk aversion too large: the hedge spread equation has no real root".into(),
        ));
    }
    let s_dt = 2.0 * adjusted / (k * growth * (1.0 + (1.0 + x).sqrt()));
    let delta = &beta + &u * s_dt;
    Ok(NormalHedge {
        p: delta.dot(q),
        delta: delta.iter().copied().collect(),
        s: s_dt / dt,
    })
}

/// One point of a per-unit price curve.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct CurvePoint {
    pub lambda: f64,
    /// Price of `λ P` divided by `λ` (the mid price at `λ = 0`).
    pub price: f64,
    /// Hedge of `λ P` divided by `λ`.
    pub delta: Vec<f64>,
    pub iterations: usize,
}

/// Per-unit prices over a grid of notionals; negative notionals give the
/// offer side.
pub fn price_curve(
    market: &SampleMarket,
    calib: &CalibrationResult,
    payoff: &Payoff,
    alpha: f64,
    lambdas: &[f64],
    cfg: &SolverConfig,
) -> Result<Vec<CurvePoint>> {
    lambdas
        .iter()
        .map(|&lambda| {
            if lambda == 0.0 {
                let h = solve_hedge(market, calib, &payoff.clone().with_notional(1.0), 0.0, cfg)?;
                return Ok(CurvePoint {
                    lambda,
                    price: h.p,
                    delta: h.delta.iter().copied().collect(),
                    iterations: 0,
                });
            }
            let scaled = payoff.clone().with_notional(payoff.notional * lambda);
            let h = solve_hedge(market, calib, &scaled, alpha, cfg)?;
            Ok(CurvePoint {
                lambda,
                price: h.p / lambda,
                delta: h.delta.iter().map(|d| d / lambda).collect(),
                iterations: h.iterations,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrate::calibrate;

    fn three_state() -> (SampleMarket, CalibrationResult) {
        let market = SampleMarket::from_rows(
            vec![1.0, 1.0],
            &[vec![1.0, 0.0], vec![1.0, 1.0], vec![1.0, 2.0]],
            1.0,
        )
        .unwrap();
        let cal = calibrate(&market, &Measure::uniform(3), &SolverConfig::default()).unwrap();
        (market, cal)
    }

    #[test]
    fn three_state_call() {
        let (market, cal) = three_state();
        let call = Payoff::call(&market, 1, 1.0).unwrap();
        let h = solve_hedge(&market, &cal, &call, 1.0, &SolverConfig::default()).unwrap();
        let expected = -((1.0 + 2.0 * (-0.5f64).exp()) / 3.0).ln();
        assert!((h.p - expected).abs() < 1e-12, "{} vs {expected}", h.p);
        assert!((h.delta[1] - 0.5).abs() < 1e-12);
        assert!((h.delta[0] - (expected - 0.5)).abs() < 1e-12);
        assert!(h.s.abs() < 1e-15);
    }

    #[test]
    fn three_state_order_book() {
        let (market, cal) = three_state();
        let call = Payoff::call(&market, 1, 1.0).unwrap();
        let ob = order_book(&market, &cal, &call, 1.0).unwrap();
        assert!((ob.p0 - 1.0 / 3.0).abs() < 1e-15);
        assert!((ob.half_spread - 1.0 / 18.0).abs() < 1e-15);
        assert!((ob.delta[1] - 0.5).abs() < 1e-15);
        let mid = solve_hedge(&market, &cal, &call, 0.0, &SolverConfig::default()).unwrap();
        assert!((mid.p - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn independent_normal_payoff_costs_its_variance() {
        let q = DVector::from_vec(vec![1.0]);
        let mean = DVector::from_vec(vec![0.0, 0.0]);
        let cov = DMatrix::from_row_slice(2, 2, &[0.04, 0.0, 0.0, 0.5]);
        let h = hedge_normal(&mean, &cov, &q, 1.0, 1e-4, 0.0).unwrap();
        assert!((h.p + 0.5e-4 * 0.5).abs() < 1e-9);
    }
}
