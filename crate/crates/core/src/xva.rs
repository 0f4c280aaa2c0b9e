//! Bilateral margined trades.
//!
//! The buyer deploys capital `c1` and the seller `c2`; both are pooled in a
//! margin account returning `db/b`. The derivative settles out of the pool,
//! so the buyer's return on the derivative is floored at `-c1 R` and capped
//! at `c2 R` with `R = 1 + db/b`. A counterparty defaults when its side of
//! the pool cannot cover its obligation.
//!
//! Infinite capital is allowed and removes the corresponding floor or cap.
//! The funding of an infinite amount of capital is taken to cancel against
//! its return in the margin account, so it drops out of the valuation.

use nalgebra::DVector;

use crate::calibrate::{calibrate, CalibrationResult, SampleMarket, SolverConfig};
use crate::engine::{hedge_family, HedgeTarget, SampleFamily};
use crate::error::{invalid, Error, Result};
use crate::measure::{entropy_adjusted_mean, Measure};

/// Capital, payoff and margin-account return of one trade.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MarginSetup {
    pub c1: f64,
    pub c2: f64,
    /// Final derivative price per outcome.
    pub payoff: Vec<f64>,
    /// `db/b` per outcome.
    pub b_return: Vec<f64>,
    pub dt: f64,
}

impl MarginSetup {
    pub fn new(c1: f64, c2: f64, payoff: Vec<f64>, b_return: Vec<f64>, dt: f64) -> Result<Self> {
        let setup = Self { c1, c2, payoff, b_return, dt };
        setup.validate()?;
        Ok(setup)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, c) in [("c1", self.c1), ("c2", self.c2)] {
            if c.is_nan() || c < 0.0 {
                return invalid(format!("capital {name} = {c} must be non-negative"));
            }
        }
        if self.payoff.is_empty() || self.payoff.len() != self.b_return.len() {
            return Err(Error::DimensionMismatch {
                what: "outcomes of the margin-account return",
                expected: self.payoff.len(),
                got: self.b_return.len(),
            });
        }
        if self.payoff.iter().any(|v| !v.is_finite()) {
            return invalid("payoff must be finite");
        }
        if let Some(i) = self.b_return.iter().position(|r| !(r.is_finite() && 1.0 + r > 0.0)) {
            return invalid(format!("margin account must keep a positive price (outcome {i})"));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return invalid("time step must be positive");
        }
        Ok(())
    }

    pub fn outcomes(&self) -> usize {
        self.payoff.len()
    }

    fn check_price(&self, p: f64) -> Result<()> {
        if !p.is_finite() || p < -self.c2 || p > self.c1 {
            return invalid(format!(
                "price {p} outside the admissible window [{}, {}]",
                -self.c2, self.c1
            ));
        }
        Ok(())
    }

    /// Buyer's funded derivative return `P - p R`, floored at `-c1 R` and
    /// capped at `c2 R`.
    fn clipped_return(&self, p: f64) -> Vec<f64> {
        self.payoff
            .iter()
            .zip(&self.b_return)
            .map(|(pay, rb)| {
                let r = 1.0 + rb;
                (pay - p * r).max(-self.c1 * r).min(self.c2 * r)
            })
            .collect()
    }
}

/// Capital changes and default flags per outcome.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Settlement {
    pub dc1: Vec<f64>,
    pub dc2: Vec<f64>,
    pub buyer_default: Vec<bool>,
    pub seller_default: Vec<bool>,
}

fn default_flags(setup: &MarginSetup, p: f64) -> (Vec<bool>, Vec<bool>) {
    let mut buyer = Vec::with_capacity(setup.outcomes());
    let mut seller = Vec::with_capacity(setup.outcomes());
    for (pay, rb) in setup.payoff.iter().zip(&setup.b_return) {
        let r = 1.0 + rb;
        let x = pay - p * r;
        // x1 = c1 R + x and x2 = c2 R - x; zero counts as performing, and so
        // does a shortfall within rounding of the terms that produced it.
        let slack = 8.0 * f64::EPSILON * (pay.abs() + (p * r).abs());
        buyer.push(setup.c1.is_finite() && setup.c1 * r + x < -slack * (1.0 + setup.c1 * r));
        seller.push(setup.c2.is_finite() && setup.c2 * r - x < -slack * (1.0 + setup.c2 * r));
    }
    (buyer, seller)
}

/// Pooled settlement `c1 + dc1 = x1⁺ - (-x2)⁺` and `c2 + dc2 = x2⁺ - (-x1)⁺`.
pub fn settle(setup: &MarginSetup, p: f64) -> Result<Settlement> {
    setup.validate()?;
    if !(setup.c1.is_finite() && setup.c2.is_finite()) {
        return invalid("settlement needs finite capital on both sides");
    }
    setup.check_price(p)?;
    let n = setup.outcomes();
    let (mut dc1, mut dc2) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for (pay, rb) in setup.payoff.iter().zip(&setup.b_return) {
        let r = 1.0 + rb;
        let x = pay - p * r;
        let x1 = setup.c1 * r + x;
        let x2 = setup.c2 * r - x;
        dc1.push(x1.max(0.0) - (-x2).max(0.0) - setup.c1);
        dc2.push(x2.max(0.0) - (-x1).max(0.0) - setup.c2);
    }
    let (buyer_default, seller_default) = default_flags(setup, p);
    Ok(Settlement {
        dc1,
        dc2,
        buyer_default,
        seller_default,
    })
}

/// One counterparty's model of the trade.
#[derive(Debug, Clone)]
pub struct CounterpartyView {
    pub measure: Measure,
    pub market: SampleMarket,
    pub alpha: f64,
    /// Default aversion; infinite demands full protection.
    pub beta: f64,
}

/// Buyer and seller threshold prices.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ThresholdPrices {
    pub p1: f64,
    pub p2: f64,
    pub viable: bool,
}

impl ThresholdPrices {
    fn new(p1: f64, p2: f64) -> Self {
        Self { p1, p2, viable: p2 <= p1 }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Side {
    Buyer,
    Seller,
}

/// Calibrated view ready to value settlements.
struct Valuer<'a> {
    view: &'a CounterpartyView,
    setup: &'a MarginSetup,
    cal: CalibrationResult,
    side: Side,
}

impl<'a> Valuer<'a> {
    fn new(view: &'a CounterpartyView, setup: &'a MarginSetup, side: Side, cfg: &SolverConfig) -> Result<Self> {
        setup.validate()?;
        if view.market.outcomes() != setup.outcomes() {
            return Err(Error::DimensionMismatch {
                what: "outcomes of the counterparty market",
                expected: setup.outcomes(),
                got: view.market.outcomes(),
            });
        }
        if (view.market.dt() - setup.dt).abs() > 1e-12 * setup.dt {
            return invalid("counterparty market and margin setup use different time steps");
        }
        if !(view.alpha.is_finite() && view.alpha >= 0.0) {
            return invalid("risk aversion must be finite and non-negative");
        }
        let cal = calibrate(&view.market, &view.measure, cfg)?;
        Ok(Self { view, setup, cal, side })
    }

    /// `max_{δ·q = c} E^φ[α][c db/b ± clipped return - δ · dq]`.
    fn value(&self, p: f64, cfg: &SolverConfig) -> Result<f64> {
        let capital = match self.side {
            Side::Buyer => self.setup.c1,
            Side::Seller => self.setup.c2,
        };
        let sign = match self.side {
            Side::Buyer => 1.0,
            Side::Seller => -1.0,
        };
        let funded = if capital.is_finite() { capital } else { 0.0 };
        let y: Vec<f64> = self
            .setup
            .clipped_return(p)
            .iter()
            .zip(&self.setup.b_return)
            .map(|(x, rb)| funded * rb + sign * x)
            .collect();
        let alpha = self.view.alpha;
        let rate_dt = self.cal.r * self.view.market.dt();
        if alpha == 0.0 {
            return Ok(self.cal.gamma.mean(&y) - funded * rate_dt);
        }
        let base: Vec<f64> = self
            .cal
            .gamma
            .log_weights()
            .iter()
            .zip(&y)
            .map(|(lw, yi)| lw - alpha * yi)
            .collect();
        let dq = self.view.market.dq();
        let family = SampleFamily { base, dq: &dq };
        let h = hedge_family(
            &family,
            0.0,
            &self.cal.structure,
            self.view.market.q(),
            rate_dt,
            alpha,
            HedgeTarget::Funding(funded),
            None::<&DVector<f64>>,
            cfg,
        )?;
        Ok(h.value)
    }
}

/// Window of admissible prices `[-c2, c1]`, cut to a finite search range.
fn search_window(setup: &MarginSetup) -> (f64, f64) {
    let scale = setup
        .payoff
        .iter()
        .fold(1.0f64, |a, v| a.max(v.abs()))
        * 4.0;
    let lo = if setup.c2.is_finite() { -setup.c2 } else { -scale };
    let hi = if setup.c1.is_finite() { setup.c1 } else { scale };
    (lo, hi)
}

/// Root of a non-increasing function on the admissible window, widening the
/// search range on sides where capital is infinite.
fn threshold_root(
    setup: &MarginSetup,
    f: &dyn Fn(f64) -> Result<f64>,
    who: &str,
) -> Result<f64> {
    let (mut lo, mut hi) = search_window(setup);
    let mut f_lo = f(lo)?;
    let mut f_hi = f(hi)?;
    let mut widen = 0;
    while f_lo < 0.0 && !setup.c2.is_finite() && widen < 60 {
        lo *= 2.0;
        f_lo = f(lo)?;
        widen += 1;
    }
    while f_hi > 0.0 && !setup.c1.is_finite() && widen < 120 {
        hi *= 2.0;
        f_hi = f(hi)?;
        widen += 1;
    }
    if f_lo == 0.0 {
        return Ok(lo);
    }
    if f_hi == 0.0 {
        return Ok(hi);
    }
    if f_lo < 0.0 || f_hi > 0.0 {
        return Err(Error::NoBracket(format!(
            "{who} threshold: no admissible price in [{lo}, {hi}] zeroes the valuation"
        )));
    }
    // Spot-check monotonicity across the bracket.
    let mut prev = f_lo;
    for i in 1..8 {
        let v = f(lo + (hi - lo) * i as f64 / 8.0)?;
        if v > prev + 1e-9 * (1.0 + prev.abs()) {
            return Err(Error::Numerical(format!(
                "{who} valuation is not monotone in the price"
            )));
        }
        prev = v;
    }
    let tol = 1e-15 * (1.0 + lo.abs().max(hi.abs()));
    let (mut a, mut b) = (lo, hi);
    let mut err = None;
    for _ in 0..400 {
        if b - a <= tol {
            break;
        }
        let m = 0.5 * (a + b);
        match f(m) {
            Ok(v) if v > 0.0 => a = m,
            Ok(v) if v < 0.0 => b = m,
            Ok(_) => return Ok(m),
            Err(e) => {
                err = Some(e);
                break;
            }
        }
    }
    match err {
        Some(e) => Err(e),
        None => Ok(0.5 * (a + b)),
    }
}

fn check_shared_capital(a: &MarginSetup, b: &MarginSetup) -> Result<()> {
    if a.c1 != b.c1 || a.c2 != b.c2 {
        return invalid("buyer and seller setups must deploy the same capital");
    }
    Ok(())
}

/// Threshold prices from the full hedged valuation of each counterparty.
///
/// Each side is described on its own outcome space; `buyer` and `seller`
/// must agree on the deployed capital.
pub fn threshold_prices(
    buyer: &MarginSetup,
    view1: &CounterpartyView,
    seller: &MarginSetup,
    view2: &CounterpartyView,
    cfg: &SolverConfig,
) -> Result<ThresholdPrices> {
    check_shared_capital(buyer, seller)?;
    let v1 = Valuer::new(view1, buyer, Side::Buyer, cfg)?;
    let v2 = Valuer::new(view2, seller, Side::Seller, cfg)?;
    let p1 = threshold_root(buyer, &|p| v1.value(p, cfg), "buyer")?;
    let p2 = threshold_root(seller, &|p| v2.value(p, cfg).map(|v| -v), "seller")?;
    Ok(ThresholdPrices::new(p1, p2))
}

/// Entropy-adjusted value of the trade to each side at a given price.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ViabilityPoint {
    pub price: f64,
    pub buyer: f64,
    pub seller: f64,
}

pub fn viability_curve(
    buyer: &MarginSetup,
    view1: &CounterpartyView,
    seller: &MarginSetup,
    view2: &CounterpartyView,
    prices: &[f64],
    cfg: &SolverConfig,
) -> Result<Vec<ViabilityPoint>> {
    check_shared_capital(buyer, seller)?;
    let v1 = Valuer::new(view1, buyer, Side::Buyer, cfg)?;
    let v2 = Valuer::new(view2, seller, Side::Seller, cfg)?;
    prices
        .iter()
        .map(|p| {
            buyer.check_price(*p)?;
            Ok(ViabilityPoint {
                price: *p,
                buyer: v1.value(*p, cfg)?,
                seller: v2.value(*p, cfg)?,
            })
        })
        .collect()
}

/// Predictable funding and no hedging: rates of the two funding securities
/// and of the margin account.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SimplifiedModel {
    pub payoff: Vec<f64>,
    pub r1: f64,
    pub r2: f64,
    pub r: f64,
    pub c1: f64,
    pub c2: f64,
    pub dt: f64,
}

impl SimplifiedModel {
    /// Equivalent general setup with a constant margin-account return.
    pub fn setup(&self) -> Result<MarginSetup> {
        MarginSetup::new(
            self.c1,
            self.c2,
            self.payoff.clone(),
            vec![self.r * self.dt; self.payoff.len()],
            self.dt,
        )
    }

    /// `P` floored at `-(c1 - p) R` and capped at `(c2 + p) R`.
    pub fn capped_payoff(&self, p: f64) -> Vec<f64> {
        let r = 1.0 + self.r * self.dt;
        let floor = -(self.c1 - p) * r;
        let cap = (self.c2 + p) * r;
        self.payoff.iter().map(|v| v.max(floor).min(cap)).collect()
    }
}

/// Threshold prices solving `p (1 + r dt) = E1[α1][P̂] - c1 (r1 - r) dt` and
/// `p (1 + r dt) = E2[-α2][P̂] + c2 (r2 - r) dt`.
pub fn simplified_thresholds(
    model: &SimplifiedModel,
    buyer: &Measure,
    alpha1: f64,
    seller: &Measure,
    alpha2: f64,
) -> Result<ThresholdPrices> {
    let setup = model.setup()?;
    for (m, name) in [(buyer, "buyer"), (seller, "seller")] {
        if m.len() != setup.outcomes() {
            return Err(Error::DimensionMismatch {
                what: if name == "buyer" { "outcomes of the buyer measure" } else { "outcomes of the seller measure" },
                expected: setup.outcomes(),
                got: m.len(),
            });
        }
    }
    for a in [alpha1, alpha2] {
        if !(a.is_finite() && a >= 0.0) {
            return invalid("risk aversion must be finite and non-negative");
        }
    }
    let funding = |c: f64, ri: f64| -> Result<f64> {
        if c.is_finite() {
            Ok(c * (ri - model.r) * model.dt)
        } else if ri == model.r {
            Ok(0.0)
        } else {
            invalid("infinite capital needs its funding rate to match the margin account")
        }
    };
    let fva1 = funding(model.c1, model.r1)?;
    let fva2 = funding(model.c2, model.r2)?;
    let growth = 1.0 + model.r * model.dt;
    let g1 = |p: f64| -> Result<f64> {
        Ok(entropy_adjusted_mean(buyer, &model.capped_payoff(p), alpha1)? - fva1 - p * growth)
    };
    let g2 = |p: f64| -> Result<f64> {
        Ok(entropy_adjusted_mean(seller, &model.capped_payoff(p), -alpha2)? + fva2 - p * growth)
    };
    let p1 = threshold_root(&setup, &g1, "buyer")?;
    let p2 = threshold_root(&setup, &g2, "seller")?;
    Ok(ThresholdPrices::new(p1, p2))
}

/// `m1 = (-E1[β1][P / R])⁺` and `m2 = (E2[-β2][P / R])⁺`.
pub fn entropic_margin(
    payoff: &[f64],
    b_return: &[f64],
    buyer: &Measure,
    beta1: f64,
    seller: &Measure,
    beta2: f64,
) -> Result<(f64, f64)> {
    if payoff.len() != b_return.len() {
        return Err(Error::DimensionMismatch {
            what: "outcomes of the margin-account return",
            expected: payoff.len(),
            got: b_return.len(),
        });
    }
    if beta1.is_nan() || beta2.is_nan() || beta1 < 0.0 || beta2 < 0.0 {
        return invalid("default aversion must be non-negative");
    }
    let discounted: Vec<f64> = payoff
        .iter()
        .zip(b_return)
        .map(|(p, rb)| p / (1.0 + rb))
        .collect();
    let m1 = (-entropy_adjusted_mean(buyer, &discounted, beta1)?).max(0.0);
    let m2 = entropy_adjusted_mean(seller, &discounted, -beta2)?.max(0.0);
    Ok((m1, m2))
}

/// Default probabilities under both measures.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct DefaultStats {
    /// Buyer default under the buyer's and the seller's measure.
    pub buyer_default: [f64; 2],
    /// Seller default under the buyer's and the seller's measure.
    pub seller_default: [f64; 2],
}

pub fn default_stats(setup: &MarginSetup, p: f64, buyer: &Measure, seller: &Measure) -> Result<DefaultStats> {
    setup.validate()?;
    setup.check_price(p)?;
    for m in [buyer, seller] {
        m.check_len("outcomes of the default measure", setup.outcomes())?;
    }
    let (b, s) = default_flags(setup, p);
    if b.iter().zip(&s).any(|(x, y)| *x && *y) {
        return Err(Error::Numerical("both counterparties default on one outcome".into()));
    }
    Ok(DefaultStats {
        buyer_default: [buyer.probability(|i| b[i]), seller.probability(|i| b[i])],
        seller_default: [buyer.probability(|i| s[i]), seller.probability(|i| s[i])],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn settlement_on_the_cap_boundary() {
        let setup = MarginSetup::new(0.5, 0.5, vec![1.0], vec![0.0], 1.0).unwrap();
        let s = settle(&setup, 0.5).unwrap();
        assert_eq!((s.dc1[0], s.dc2[0]), (0.5, -0.5));
        assert!(!s.buyer_default[0] && !s.seller_default[0]);
    }

    #[test]
    fn price_outside_capital_window() {
        let setup = MarginSetup::new(0.5, 0.5, vec![1.0], vec![0.0], 1.0).unwrap();
        assert!(settle(&setup, 0.6).unwrap_err().is_validation());
        assert!(settle(&setup, -0.6).unwrap_err().is_validation());
    }
}
