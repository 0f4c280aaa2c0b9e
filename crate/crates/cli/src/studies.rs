//! Study runners. Each returns a table in grid order together with a
//! sidecar report of parameters and solver diagnostics; sampled studies draw
//! from a seeded generator, so equal seeds give identical output.

use entropic::calibrate::{calibrate, funding_rate_independent, AssetSpec, SampleMarket, SolverConfig};
use entropic::hedge::{solve_hedge, HedgeResult, Payoff};
use entropic::measure::Measure;
use entropic::quantum::{
    implied_distribution, solve_quantum, spread_payoff, two_state_market, two_state_model, two_state_operators,
    SpreadPayoff, TwoStateSpec,
};
use entropic::xva::{threshold_prices, viability_curve, CounterpartyView, MarginSetup};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, Uniform};
use serde_json::{json, Value};
use statrs::distribution::{ContinuousCDF, Normal as NormalDist};

use crate::output::{number, SolverLog, Table};
use crate::CliError;

pub const STUDIES: [&str; 5] = ["funding-rate-normal", "funding-rate-binomial", "options", "quantum", "xva"];

#[derive(Debug, Clone)]
pub struct StudyOutput {
    pub table: Table,
    pub meta: Value,
}

fn meta(study: &str, parameters: Value, rows: usize, log: &SolverLog) -> Value {
    json!({ "study": study, "parameters": parameters, "rows": rows, "solver": log.to_json() })
}

fn numbers(v: &[f64]) -> Vec<Value> {
    v.iter().map(|x| number(*x)).collect()
}

/// `|E^φ[dq] - q r dt|` for an independent asset.
fn asset_residual(asset: &AssetSpec, phi: f64, r: f64, dt: f64) -> f64 {
    match *asset {
        AssetSpec::Normal { q, mu, sigma } => (q * mu * dt - phi * q * q * sigma * sigma * dt - q * r * dt).abs(),
        AssetSpec::Binomial { q, coupon, default_prob: w } => {
            let (down, up) = (-q, 1.0 + coupon * dt - q);
            let (a, b) = (w.ln() - phi * down, (1.0 - w).ln() - phi * up);
            let top = a.max(b);
            let (ea, eb) = ((a - top).exp(), (b - top).exp());
            ((ea * down + eb * up) / (ea + eb) - q * r * dt).abs()
        }
    }
}

fn funding_point(assets: &[AssetSpec], log: &mut SolverLog) -> Result<f64, CliError> {
    let f = funding_rate_independent(assets, 1.0)?;
    let balance: f64 = assets
        .iter()
        .zip(&f.phi)
        .map(|(a, p)| match a {
            AssetSpec::Normal { q, .. } | AssetSpec::Binomial { q, .. } => q * p,
        })
        .sum();
    let residual = assets
        .iter()
        .zip(&f.phi)
        .map(|(a, p)| asset_residual(a, *p, f.r, 1.0))
        .fold(balance.abs(), f64::max);
    log.record(residual, 0);
    Ok(f.r)
}

/// Funding rate of two independent normal assets with unit prices and
/// `dt = 1`, swept over the volatility of the second (whose drift is
/// `mu2`).
pub fn funding_rate_normal(mu1s: &[f64], sigma1s: &[f64], mu2: f64, sigma2s: &[f64]) -> Result<StudyOutput, CliError> {
    let mut table = Table::new(&["mu1", "sigma1", "sigma2", "r"]);
    let mut log = SolverLog::default();
    for &mu1 in mu1s {
        for &sigma1 in sigma1s {
            for &sigma2 in sigma2s {
                let assets = [
                    AssetSpec::Normal { q: 1.0, mu: mu1, sigma: sigma1 },
                    AssetSpec::Normal { q: 1.0, mu: mu2, sigma: sigma2 },
                ];
                table.push(vec![mu1, sigma1, sigma2, funding_point(&assets, &mut log)?]);
            }
        }
    }
    let params = json!({ "mu1": numbers(mu1s), "sigma1": numbers(sigma1s), "mu2": mu2, "sigma2": numbers(sigma2s), "dt": 1.0 });
    let meta = meta("funding-rate-normal", params, table.rows.len(), &log);
    Ok(StudyOutput { table, meta })
}

/// Funding rate of two independent defaultable bonds paying `1 + c` or
/// nothing, swept over the default probability of the second.
pub fn funding_rate_binomial(c1s: &[f64], w1s: &[f64], c2: f64, w2s: &[f64]) -> Result<StudyOutput, CliError> {
    let mut table = Table::new(&["c1", "w1", "w2", "r"]);
    let mut log = SolverLog::default();
    for &c1 in c1s {
        for &w1 in w1s {
            for &w2 in w2s {
                let assets = [
                    AssetSpec::Binomial { q: 1.0, coupon: c1, default_prob: w1 },
                    AssetSpec::Binomial { q: 1.0, coupon: c2, default_prob: w2 },
                ];
                table.push(vec![c1, w1, w2, funding_point(&assets, &mut log)?]);
            }
        }
    }
    let params = json!({ "c1": numbers(c1s), "w1": numbers(w1s), "c2": c2, "w2": numbers(w2s), "dt": 1.0 });
    let meta = meta("funding-rate-binomial", params, table.rows.len(), &log);
    Ok(StudyOutput { table, meta })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SampleDist {
    Uniform,
    Normal,
    Poisson,
}

impl SampleDist {
    fn name(self) -> &'static str {
        match self {
            SampleDist::Uniform => "uniform",
            SampleDist::Normal => "normal",
            SampleDist::Poisson => "poisson",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum OptionKind {
    Call,
    Digital,
}

/// Samples standardised to zero mean and unit standard deviation.
pub fn standardised_samples(dist: SampleDist, n: usize, seed: u64) -> Result<Vec<f64>, CliError> {
    if n < 2 {
        return Err(CliError::Validation("need at least two samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = match dist {
        SampleDist::Uniform => {
            let u = Uniform::new(0.0, 1.0).expect("unit interval");
            (0..n).map(|_| u.sample(&mut rng)).collect()
        }
        SampleDist::Normal => {
            let z = Normal::new(0.0, 1.0).expect("standard normal");
            (0..n).map(|_| z.sample(&mut rng)).collect()
        }
        SampleDist::Poisson => {
            let p = Poisson::new(10.0).expect("ten expected jumps");
            (0..n).map(|_| p.sample(&mut rng)).collect()
        }
    };
    let mean = raw.iter().sum::<f64>() / n as f64;
    let sd = (raw.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    if sd == 0.0 {
        return Err(CliError::Validation("samples have no dispersion".into()));
    }
    Ok(raw.iter().map(|x| (x - mean) / sd).collect())
}

#[derive(Debug, Clone)]
pub struct OptionsStudy {
    pub dist: SampleDist,
    pub payoff: OptionKind,
    pub alpha: f64,
    pub r: f64,
    pub strikes: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
}

/// Delta and per-unit price of a call or digital on a standardised
/// underlying, with the bid and offer for each notional size.
///
/// The market holds a riskless funding asset growing at `r` and the
/// underlying with zero initial price, so the expectation measure is
/// already calibrated.
pub fn options(study: &OptionsStudy, cfg: &SolverConfig) -> Result<StudyOutput, CliError> {
    if study.strikes.is_empty() || study.lambdas.is_empty() {
        return Err(CliError::Validation("strike and notional grids must be non-empty".into()));
    }
    let x = standardised_samples(study.dist, study.samples, study.seed)?;
    let rows: Vec<Vec<f64>> = x.iter().map(|v| vec![1.0 + study.r, *v]).collect();
    let market = SampleMarket::from_rows(vec![1.0, 0.0], &rows, 1.0)?;
    let m = Measure::uniform(x.len());
    let cal = calibrate(&market, &m, cfg)?;
    let mut table = Table::new(&["strike", "notional", "delta", "price", "bid", "offer"]);
    let mut log = SolverLog::default();
    for &k in &study.strikes {
        let payoff = match study.payoff {
            OptionKind::Call => Payoff::call(&market, 1, k)?,
            OptionKind::Digital => Payoff::digital(&market, 1, k)?,
        };
        let mut solve = |lambda: f64| -> Result<HedgeResult, CliError> {
            let alpha = if lambda == 0.0 { 0.0 } else { study.alpha };
            let h = solve_hedge(&market, &cal, &payoff.clone().with_notional(if lambda == 0.0 { 1.0 } else { lambda }), alpha, cfg)?;
            log.record(h.residual, h.iterations);
            Ok(h)
        };
        for &lambda in &study.lambdas {
            let h = solve(lambda)?;
            let unit = if lambda == 0.0 { 1.0 } else { lambda };
            let (price, delta) = (h.p / unit, h.delta[1] / unit);
            let (bid, offer) = if lambda == 0.0 {
                (price, price)
            } else {
                let size = lambda.abs();
                let long = if lambda > 0.0 { h.clone() } else { solve(size)? };
                let short = if lambda < 0.0 { h } else { solve(-size)? };
                (long.p / size, -short.p / size)
            };
            table.push(vec![k, lambda, delta, price, bid, offer]);
        }
    }
    let params = json!({
        "dist": study.dist.name(),
        "payoff": match study.payoff { OptionKind::Call => "call", OptionKind::Digital => "digital" },
        "alpha": study.alpha,
        "r": study.r,
        "strikes": numbers(&study.strikes),
        "notionals": numbers(&study.lambdas),
        "samples": study.samples,
        "seed": study.seed,
        "support": [number(x.iter().cloned().fold(f64::INFINITY, f64::min)), number(x.iter().cloned().fold(f64::NEG_INFINITY, f64::max))],
        "calibration": { "r": cal.r, "residual": cal.residual_norm(), "iterations": cal.iterations },
    });
    let meta = meta("options", params, table.rows.len(), &log);
    Ok(StudyOutput { table, meta })
}

/// Continuous density of the two-state market in closed form: the branches
/// `ζ± = -k ± √D` with `D = (cos 2θ - ε k)² + sin² 2θ` contribute their
/// curvature `± ε² sin² 2θ / D^{3/2}` while positive.
pub fn two_state_density(theta: f64, eps: f64, x: f64) -> f64 {
    let (s, c) = ((2.0 * theta).sin(), (2.0 * theta).cos());
    let d = (c - eps * x).powi(2) + s * s;
    let curvature = eps * eps * s * s / d.powf(1.5);
    let root = d.sqrt();
    let plus = if -x + root > 0.0 { curvature } else { 0.0 };
    let minus = if -x - root > 0.0 { -curvature } else { 0.0 };
    0.5 * (plus + minus)
}

#[derive(Debug, Clone)]
pub struct QuantumStudy {
    pub theta: f64,
    pub eps: f64,
    pub alpha: f64,
    pub strikes: Vec<f64>,
    pub payoff: SpreadPayoff,
}

/// Mid, hedge, bid and offer of a spread option on the two-state market
/// across strikes, with the implied density next to its closed form.
pub fn quantum(study: &QuantumStudy, cfg: &SolverConfig) -> Result<StudyOutput, CliError> {
    if study.strikes.len() < 3 {
        return Err(CliError::Validation("quantum study needs at least three strikes".into()));
    }
    let (b, q) = two_state_operators(study.theta, study.eps);
    let market = two_state_market(study.theta, study.eps);
    let dist = implied_distribution(&q, &b, &study.strikes)?;
    let mut table = Table::new(&["k", "p", "delta", "bid", "offer", "density", "density_exact"]);
    let mut log = SolverLog::default();
    let mut closed_form_gap = 0.0f64;
    for (i, &k) in study.strikes.iter().enumerate() {
        let spec = TwoStateSpec { theta: study.theta, eps_gap: study.eps, strike: k, payoff: study.payoff };
        let mid = two_state_model(&spec, 0.0)?;
        let payoff = spread_payoff(&q, &b, k, study.payoff)?;
        let bid = solve_quantum(&market, &payoff, study.alpha, cfg)?;
        let short = solve_quantum(&market, &payoff.scale(-1.0), study.alpha, cfg)?;
        let gap = (bid.p - two_state_model(&spec, study.alpha)?.p).abs();
        log.record(gap, bid.iterations.max(short.iterations));
        closed_form_gap = closed_form_gap.max(gap);
        table.push(vec![
            k,
            mid.p,
            mid.delta_q,
            bid.p,
            -short.p,
            dist.density[i],
            two_state_density(study.theta, study.eps, k),
        ]);
    }
    let atoms: Vec<Value> = dist.atoms().iter().map(|a| json!({ "x": a.x, "weight": a.weight })).collect();
    let params = json!({
        "theta": study.theta,
        "eps": study.eps,
        "alpha": study.alpha,
        "payoff": study.payoff,
        "strikes": numbers(&study.strikes),
        "atoms": atoms,
        "closed_form_gap": closed_form_gap,
    });
    let meta = meta("quantum", params, table.rows.len(), &log);
    Ok(StudyOutput { table, meta })
}

#[derive(Debug, Clone)]
pub struct XvaStudy {
    pub alpha: f64,
    pub lambdas: Vec<f64>,
    pub seller_capital: Vec<f64>,
    pub prices: Vec<f64>,
    /// Cells of the outcome grid over `[-8, 8]`.
    pub cells: usize,
}

impl Default for XvaStudy {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lambdas: vec![0.0, 1.0, 2.0],
            seller_capital: vec![f64::INFINITY, 0.5],
            prices: (0..=150).map(|i| i as f64 * 0.01).collect(),
            cells: 1600,
        }
    }
}

/// Share of the normal view mixed into the uniform one so that both
/// measures charge every outcome.
pub const XVA_MIX: f64 = 1e-12;

/// Outcome grid with the buyer's uniform view (mean 0.5, unit standard
/// deviation) and the seller's standard normal view.
pub fn xva_views(cells: usize) -> Result<(Vec<f64>, Measure, Measure), CliError> {
    let (lo, hi) = (-8.0, 8.0);
    let h = (hi - lo) / cells as f64;
    let z = NormalDist::new(0.0, 1.0).expect("standard normal");
    let half = 3f64.sqrt();
    let (a, b) = (0.5 - half, 0.5 + half);
    let mut grid = Vec::with_capacity(cells);
    let mut uniform = Vec::with_capacity(cells);
    let mut normal = Vec::with_capacity(cells);
    for i in 0..cells {
        let (l, r) = (lo + i as f64 * h, lo + (i + 1) as f64 * h);
        grid.push(0.5 * (l + r));
        let pn = if l >= 0.0 { z.sf(l) - z.sf(r) } else { z.cdf(r) - z.cdf(l) };
        let pu = (r.min(b) - l.max(a)).max(0.0) / (b - a);
        normal.push(pn);
        uniform.push((1.0 - XVA_MIX) * pu + XVA_MIX * pn);
    }
    Ok((grid, Measure::from_unnormalised(uniform)?, Measure::from_unnormalised(normal)?))
}

/// Entropy-adjusted value of a zero-strike call to a fully capitalised
/// buyer and a seller with capital `c` per unit notional, as functions of
/// the price. Notional `λ` enters as risk aversion `λ α`.
pub fn xva(study: &XvaStudy, cfg: &SolverConfig) -> Result<StudyOutput, CliError> {
    let (grid, buyer, seller) = xva_views(study.cells)?;
    let payoff: Vec<f64> = grid.iter().map(|q| q.max(0.0)).collect();
    let n = grid.len();
    let funding = SampleMarket::from_rows(vec![1.0], &vec![vec![1.0]; n], 1.0)?;
    let mut table = Table::new(&["lambda", "c2", "price", "buyer", "seller"]);
    let mut log = SolverLog::default();
    let mut thresholds = Vec::new();
    for &lambda in &study.lambdas {
        for &c2 in &study.seller_capital {
            let setup = MarginSetup::new(f64::INFINITY, c2, payoff.clone(), vec![0.0; n], 1.0)?;
            let alpha = lambda * study.alpha;
            let v1 = CounterpartyView { measure: buyer.clone(), market: funding.clone(), alpha, beta: f64::INFINITY };
            let v2 = CounterpartyView { measure: seller.clone(), market: funding.clone(), alpha, beta: f64::INFINITY };
            let t = threshold_prices(&setup, &v1, &setup, &v2, cfg)?;
            thresholds.push(json!({ "lambda": lambda, "c2": number(c2), "p1": t.p1, "p2": t.p2, "viable": t.viable }));
            let curve = viability_curve(&setup, &v1, &setup, &v2, &study.prices, cfg)?;
            for pt in curve {
                log.record(0.0, 0);
                table.push(vec![lambda, c2, pt.price, pt.buyer, pt.seller]);
            }
        }
    }
    let params = json!({
        "alpha": study.alpha,
        "notionals": numbers(&study.lambdas),
        "seller_capital": numbers(&study.seller_capital),
        "buyer_capital": "inf",
        "prices": numbers(&study.prices),
        "cells": study.cells,
        "mix": XVA_MIX,
        "thresholds": thresholds,
    });
    let meta = meta("xva", params, table.rows.len(), &log);
    Ok(StudyOutput { table, meta })
}
