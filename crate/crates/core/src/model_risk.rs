//! First-order sensitivity of calibration and prices to the expectation
//! measure.
//!
//! The expectation measure is perturbed along a direction `W` as
//! `m_ε ∝ m · exp(ε W)`. The derivatives below are exact at `ε = 0` and can
//! be checked against a full recalibration and rehedge at `±ε`.

use nalgebra::DVector;

use crate::calibrate::{calibrate, CalibrationResult, SampleMarket, SolverConfig};
use crate::engine::funded_solve;
use crate::error::{invalid, Error, Result};
use crate::hedge::{solve_hedge, HedgeResult, Payoff};
use crate::measure::Measure;
use crate::numeric::ln_sum_exp;

/// Derivatives of the funding rate and the price-measure tilt.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSensitivity {
    pub dr: f64,
    pub dphi: DVector<f64>,
}

fn check_direction(market: &SampleMarket, w: &[f64]) -> Result<()> {
    if w.len() != market.outcomes() {
        return Err(Error::DimensionMismatch {
            what: "outcomes of the perturbation",
            expected: market.outcomes(),
            got: w.len(),
        });
    }
    if w.iter().any(|v| !v.is_finite()) {
        return invalid("perturbation must be finite");
    }
    Ok(())
}

/// `∂r` and `∂φ` from `V^φ ∂φ = V^φ[dq, W] - q ∂r dt` and `∂φ · q = 0`.
pub fn perturb_calibration(
    market: &SampleMarket,
    calib: &CalibrationResult,
    w: &[f64],
) -> Result<CalibrationSensitivity> {
    check_direction(market, w)?;
    let dq = market.dq();
    let n = market.assets();
    let cols: Vec<Vec<f64>> = (0..n).map(|j| dq.column(j).iter().copied().collect()).collect();
    let g = &calib.gamma;
    let cov = nalgebra::DMatrix::from_fn(n, n, |j, k| g.covariance(&cols[j], &cols[k]));
    let cross = DVector::from_fn(n, |j, _| g.covariance(&cols[j], w));
    let (dphi, t) = funded_solve(&calib.structure, &cov, &cross, 0.0)?;
    Ok(CalibrationSensitivity {
        dr: -t / market.dt(),
        dphi,
    })
}

/// `∂p = V^φ[W - ∂φ · dq, -K / α] / (1 + (r + α s) dt)` where `K` is the
/// normalised hedging density `exp(-α Z) / E^φ[exp(-α Z)]` of the residual
/// payoff `Z`; at `α = 0` the covariance is taken with `Z` itself.
pub fn price_sensitivity(
    market: &SampleMarket,
    calib: &CalibrationResult,
    hedge: &HedgeResult,
    w: &[f64],
    alpha: f64,
) -> Result<f64> {
    check_direction(market, w)?;
    let sens = perturb_calibration(market, calib, w)?;
    let dq = market.dq();
    let g = &calib.gamma;
    let u: Vec<f64> = (0..market.outcomes())
        .map(|i| w[i] - dq.row(i).transpose().dot(&sens.dphi))
        .collect();
    let z = &hedge.residual_payoff;
    let dt = market.dt();
    let kappa = (calib.r + alpha * hedge.s) * dt;
    if alpha == 0.0 {
        return Ok(g.covariance(&u, z) / (1.0 + kappa));
    }
    let logs: Vec<f64> = g
        .log_weights()
        .iter()
        .zip(z)
        .map(|(lw, zi)| lw - alpha * zi)
        .collect();
    let lz = ln_sum_exp(&logs);
    let kernel: Vec<f64> = z
        .iter()
        .map(|zi| -(-alpha * zi - lz).exp() / alpha)
        .collect();
    Ok(g.covariance(&u, &kernel) / (1.0 + kappa))
}

/// `m_ε ∝ m · exp(ε W)`; fails if a weight underflows to zero.
pub fn perturbed_measure(m: &Measure, w: &[f64], eps: f64) -> Result<Measure> {
    m.check_len("outcomes of the perturbation", w.len())?;
    let logs: Vec<f64> = m
        .weights()
        .iter()
        .zip(w)
        .map(|(mi, wi)| mi.ln() + eps * wi)
        .collect();
    Measure::from_log_weights(&logs).map_err(|e| {
        Error::InvalidInput(format!("perturbation of size {eps} leaves the measure invalid: {e}"))
    })
}

/// Recalibrates and rehedges under `m_ε`.
pub fn reweighted_reprice(
    market: &SampleMarket,
    m: &Measure,
    w: &[f64],
    eps: f64,
    payoff: &Payoff,
    alpha: f64,
    cfg: &SolverConfig,
) -> Result<(CalibrationResult, HedgeResult)> {
    let me = perturbed_measure(m, w, eps)?;
    let cal = calibrate(market, &me, cfg)?;
    let hedge = solve_hedge(market, &cal, payoff, alpha, cfg)?;
    Ok((cal, hedge))
}

/// Analytic sensitivities next to their central finite differences.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ModelRiskReport {
    pub dr: f64,
    pub dphi: Vec<f64>,
    pub dp: f64,
    pub fd_check: FiniteDifference,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct FiniteDifference {
    pub eps: f64,
    pub dr: f64,
    pub dp: f64,
}

/// Central differences `(x(ε) - x(-ε)) / 2ε` of the funding rate and price.
pub fn central_difference(
    market: &SampleMarket,
    m: &Measure,
    w: &[f64],
    eps: f64,
    payoff: &Payoff,
    alpha: f64,
    cfg: &SolverConfig,
) -> Result<FiniteDifference> {
    if !(eps.is_finite() && eps > 0.0) {
        return invalid("finite-difference step must be positive");
    }
    let (cu, hu) = reweighted_reprice(market, m, w, eps, payoff, alpha, cfg)?;
    let (cd, hd) = reweighted_reprice(market, m, w, -eps, payoff, alpha, cfg)?;
    Ok(FiniteDifference {
        eps,
        dr: (cu.r - cd.r) / (2.0 * eps),
        dp: (hu.p - hd.p) / (2.0 * eps),
    })
}

/// Full report for one perturbation direction.
pub fn model_risk(
    market: &SampleMarket,
    m: &Measure,
    payoff: &Payoff,
    w: &[f64],
    alpha: f64,
    eps: f64,
    cfg: &SolverConfig,
) -> Result<ModelRiskReport> {
    let cal = calibrate(market, m, cfg)?;
    let hedge = solve_hedge(market, &cal, payoff, alpha, cfg)?;
    let sens = perturb_calibration(market, &cal, w)?;
    let dp = price_sensitivity(market, &cal, &hedge, w, alpha)?;
    let fd_check = central_difference(market, m, w, eps, payoff, alpha, cfg)?;
    Ok(ModelRiskReport {
        dr: sens.dr,
        dphi: sens.dphi.iter().copied().collect(),
        dp,
        fd_check,
    })
}
