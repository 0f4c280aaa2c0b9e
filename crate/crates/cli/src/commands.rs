//! Subcommand implementations.

use std::path::{Path, PathBuf};

use entropic::calibrate::{calibrate, CalibrationResult, SampleMarket, SolverConfig};
use entropic::hedge::{order_book, price_curve, solve_hedge, Payoff};
use entropic::measure::{entropy_adjusted_mean, ess_bounds, Measure};
use entropic::model_risk::model_risk;
use entropic::pde::{solve_bs_complete, solve_sv_incomplete};
use entropic::quantum::{solve_quantum, spread_payoff, two_state_market, two_state_model, two_state_operators, SpreadPayoff, TwoStateSpec};
use entropic::xva::{default_stats, entropic_margin, threshold_prices, viability_curve, CounterpartyView, MarginSetup};
use serde_json::{json, Value};

use crate::args::{Cli, Command, GridSpec, MarketArgs, StudyArgs, StudyName};
use crate::config::{load, parse_market, parse_operator, parse_pde, parse_quantum_market, parse_scenario, read_json, validate_value, MarketInput, PdeKind};
use crate::output::{number, SolverLog, Table};
use crate::studies::{self, OptionKind, OptionsStudy, QuantumStudy, XvaStudy};
use crate::{CliError, Outcome};

fn invalid<T>(msg: impl Into<String>) -> Result<T, CliError> {
    Err(CliError::Validation(msg.into()))
}

fn solver_config(cli: &Cli) -> Result<SolverConfig, CliError> {
    let c = &cli.common;
    if !(c.tol.is_finite() && c.tol > 0.0) {
        return invalid("--tol must be positive");
    }
    if c.max_iter == 0 {
        return invalid("--max-iter must be positive");
    }
    Ok(SolverConfig::default().with_tol(c.tol).with_max_iter(c.max_iter))
}

/// Where a command writes when `--out` is absent: studies go to
/// `<study>.csv`, everything else to standard output.
pub fn default_out(cli: &Cli) -> Option<PathBuf> {
    match (&cli.common.out, &cli.command) {
        (Some(p), _) => Some(p.clone()),
        (None, Command::Study(s)) => {
            let name = clap::ValueEnum::to_possible_value(&s.name).expect("study names are visible");
            Some(PathBuf::from(format!("{}.csv", name.get_name())))
        }
        _ => None,
    }
}

pub fn execute(cli: &Cli) -> Result<Outcome, CliError> {
    let cfg = solver_config(cli)?;
    match &cli.command {
        Command::RiskMetric { market, alpha_grid } => risk_metric(market, alpha_grid.as_ref()),
        Command::Calibrate { market } => {
            let input = load(market, parse_market)?;
            let cal = calibrate(&input.market, &input.measure, &cfg)?;
            Ok(Outcome::Json(calibration_json(&cal)))
        }
        Command::Price { market, lambda_grid, strike_grid } => price(market, lambda_grid.as_ref(), strike_grid.as_ref(), &cfg),
        Command::OrderBook { market, strike_grid } => book(market, strike_grid.as_ref(), &cfg),
        Command::ModelRisk { market, direction, eps } => {
            let input = load(&market.market, parse_market)?;
            let payoff = payoff_for(&input.market, market.payoff.as_deref(), None)?;
            let w = direction_for(&input.market, &payoff, direction)?;
            let report = model_risk(&input.market, &input.measure, &payoff, &w, market.alpha, *eps, &cfg)?;
            Ok(Outcome::Json(serde_json::to_value(report).expect("report serialises")))
        }
        Command::Pde { model, alpha } => pde(model, *alpha),
        Command::Quantum { market, payoff, alpha, theta, eps_gap, strike, strike_grid } => match market {
            Some(path) => operator_market(path, payoff.as_deref(), *alpha, &cfg),
            None => two_state(payoff.as_deref(), *alpha, *theta, *eps_gap, *strike, strike_grid.as_ref(), &cfg),
        },
        Command::Xva { scenario, price_grid } => xva(scenario, price_grid.as_ref(), &cfg),
        Command::Study(args) => study(args, cli.common.seed, &cfg),
        Command::Validate { file } => validate(file),
    }
}

fn calibration_json(cal: &CalibrationResult) -> Value {
    serde_json::to_value(cal).expect("calibration serialises")
}

fn require_payoff(spec: Option<&str>) -> Result<&str, CliError> {
    spec.ok_or_else(|| CliError::Validation("--payoff is required".into()))
}

/// Builds a payoff from `kind:K[@j]` or a JSON file. `strike` replaces the
/// spec's strike, which may then be omitted.
pub fn payoff_for(market: &SampleMarket, spec: Option<&str>, strike: Option<f64>) -> Result<Payoff, CliError> {
    let spec = require_payoff(spec)?;
    let (kind, rest) = spec.split_once(':').unwrap_or((spec, ""));
    let known = ["call", "put", "digital", "forward"];
    if !known.contains(&kind) {
        let path = Path::new(spec);
        if !path.exists() {
            return invalid(format!("payoff '{spec}' is neither one of {known:?} nor a readable file"));
        }
        return payoff_file(market, path);
    }
    let (k, asset) = match rest.split_once('@') {
        Some((k, j)) => (k, Some(j.parse::<usize>().map_err(|_| CliError::Validation(format!("bad asset index '{j}'")))?)),
        None => (rest, None),
    };
    let asset = asset.unwrap_or(market.assets() - 1);
    let k = match (k.is_empty(), strike) {
        (_, Some(s)) => s,
        (false, None) => k.parse::<f64>().map_err(|_| CliError::Validation(format!("bad strike '{k}'")))?,
        (true, None) => return invalid(format!("payoff '{spec}' needs a strike")),
    };
    let p = match kind {
        "call" => Payoff::call(market, asset, k)?,
        "digital" => Payoff::digital(market, asset, k)?,
        "forward" => Payoff::linear(market, asset, k)?,
        _ => {
            let call = Payoff::call(market, asset, k)?;
            let fwd = Payoff::linear(market, asset, k)?;
            Payoff::new(call.values.iter().zip(&fwd.values).map(|(c, f)| c - f).collect())
        }
    };
    Ok(p)
}

fn payoff_file(market: &SampleMarket, path: &Path) -> Result<Payoff, CliError> {
    let v = read_json(path)?;
    let p: Payoff = match &v {
        Value::Array(_) => Payoff::new(serde_json::from_value(v).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?),
        _ => serde_json::from_value(v).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?,
    };
    if p.values.len() != market.outcomes() {
        return invalid(format!("{}: expected {} payoff values, found {}", path.display(), market.outcomes(), p.values.len()));
    }
    Ok(p)
}

fn direction_for(market: &SampleMarket, payoff: &Payoff, spec: &str) -> Result<Vec<f64>, CliError> {
    if spec == "payoff" {
        return Ok(payoff.scaled());
    }
    if let Some(j) = spec.strip_prefix("asset:") {
        let j: usize = j.parse().map_err(|_| CliError::Validation(format!("bad asset index '{j}'")))?;
        if j >= market.assets() {
            return invalid(format!("asset index {j} out of range for {} assets", market.assets()));
        }
        return Ok(market.asset(j));
    }
    let path = Path::new(spec);
    let w: Vec<f64> = serde_json::from_value(read_json(path)?).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    if w.len() != market.outcomes() {
        return invalid(format!("{}: expected {} values, found {}", path.display(), market.outcomes(), w.len()));
    }
    Ok(w)
}

fn risk_metric(args: &MarketArgs, alpha_grid: Option<&GridSpec>) -> Result<Outcome, CliError> {
    let MarketInput { market, measure } = load(&args.market, parse_market)?;
    let x = payoff_for(&market, args.payoff.as_deref(), None)?.scaled();
    if let Some(grid) = alpha_grid {
        let mut table = Table::new(&["alpha", "eam"]);
        for a in grid.values() {
            table.push(vec![a, entropy_adjusted_mean(&measure, &x, a)?]);
        }
        let meta = json!({ "mean": measure.mean(&x), "variance": measure.variance(&x) });
        return Ok(Outcome::Table { table, meta });
    }
    let (lo, hi) = ess_bounds(&x);
    Ok(Outcome::Json(json!({
        "alpha": number(args.alpha),
        "eam": number(entropy_adjusted_mean(&measure, &x, args.alpha)?),
        "mean": measure.mean(&x),
        "variance": measure.variance(&x),
        "ess_inf": number(lo),
        "ess_sup": number(hi),
    })))
}

fn price(args: &MarketArgs, lambdas: Option<&GridSpec>, strikes: Option<&GridSpec>, cfg: &SolverConfig) -> Result<Outcome, CliError> {
    let MarketInput { market, measure } = load(&args.market, parse_market)?;
    let cal = calibrate(&market, &measure, cfg)?;
    if lambdas.is_none() && strikes.is_none() {
        let payoff = payoff_for(&market, args.payoff.as_deref(), None)?;
        let h = solve_hedge(&market, &cal, &payoff, args.alpha, cfg)?;
        let book = order_book(&market, &cal, &payoff, args.alpha.abs())?;
        return Ok(Outcome::Json(json!({
            "p": h.p,
            "delta": h.delta.as_slice(),
            "s": h.s,
            "mid": book.p0,
            "residual_variance": h.residual_variance,
            "iterations": h.iterations,
            "residual": h.residual,
            "calibration": calibration_json(&cal),
        })));
    }
    let lambdas = lambdas.map(GridSpec::values).unwrap_or_else(|| vec![1.0]);
    let strike_values: Vec<Option<f64>> = match strikes {
        Some(g) => g.values().into_iter().map(Some).collect(),
        None => vec![None],
    };
    let mut header = vec!["strike".to_string(), "lambda".into(), "price".into()];
    header.extend((0..market.assets()).map(|j| format!("delta_{j}")));
    let mut table = Table::with_header(header);
    let mut log = SolverLog::default();
    for k in strike_values {
        let payoff = payoff_for(&market, args.payoff.as_deref(), k)?;
        for pt in price_curve(&market, &cal, &payoff, args.alpha, &lambdas, cfg)? {
            log.record(0.0, pt.iterations);
            let mut row = vec![k.unwrap_or(f64::NAN), pt.lambda, pt.price];
            row.extend(pt.delta);
            table.push(row);
        }
    }
    let meta = json!({ "alpha": args.alpha, "calibration": calibration_json(&cal), "solver": log.to_json() });
    Ok(Outcome::Table { table, meta })
}

fn book(args: &MarketArgs, strikes: Option<&GridSpec>, cfg: &SolverConfig) -> Result<Outcome, CliError> {
    let MarketInput { market, measure } = load(&args.market, parse_market)?;
    let cal = calibrate(&market, &measure, cfg)?;
    match strikes {
        None => {
            let payoff = payoff_for(&market, args.payoff.as_deref(), None)?;
            let b = order_book(&market, &cal, &payoff, args.alpha)?;
            Ok(Outcome::Json(json!({
                "mid": b.p0,
                "half_spread": b.half_spread,
                "bid": b.bid(),
                "offer": b.offer(),
                "delta": b.delta.as_slice(),
                "r": cal.r,
            })))
        }
        Some(grid) => {
            let mut table = Table::new(&["strike", "mid", "half_spread", "bid", "offer"]);
            for k in grid.values() {
                let payoff = payoff_for(&market, args.payoff.as_deref(), Some(k))?;
                let b = order_book(&market, &cal, &payoff, args.alpha)?;
                table.push(vec![k, b.p0, b.half_spread, b.bid(), b.offer()]);
            }
            let meta = json!({ "alpha": args.alpha, "calibration": calibration_json(&cal) });
            Ok(Outcome::Table { table, meta })
        }
    }
}

fn pde(path: &Path, alpha: Option<f64>) -> Result<Outcome, CliError> {
    let model = load(path, parse_pde)?;
    let alpha = alpha.unwrap_or(model.alpha);
    let (k, f) = (model.strike, model.payoff);
    let payoff = move |q: f64| f.apply(q - k);
    match model.kind {
        PdeKind::Complete(params) => {
            let s = solve_bs_complete(&params, &payoff, model.maturity, &model.grid)?;
            let mut table = Table::new(&["t", "q", "p", "delta"]);
            for (row, t) in s.times.iter().enumerate() {
                for (i, q) in s.q.iter().enumerate() {
                    table.push(vec![*t, *q, s.price[row][i], s.delta[row][i]]);
                }
            }
            let meta = json!({ "model": "complete", "q0": model.q0, "price": s.price_at(model.q0), "delta": s.delta_at(model.q0) });
            Ok(Outcome::Table { table, meta })
        }
        PdeKind::StochasticVolatility(params) => {
            let s = solve_sv_incomplete(&params, alpha, &payoff, model.maturity, &model.grid)?;
            let mut table = Table::new(&["t", "q", "nu", "p", "delta"]);
            for slice in &s.slices {
                for (i, q) in s.q.iter().enumerate() {
                    for (j, nu) in s.nu.iter().enumerate() {
                        table.push(vec![slice.t, *q, *nu, slice.price[i][j], slice.delta[i][j]]);
                    }
                }
            }
            let meta = json!({
                "model": "stochastic-volatility",
                "alpha": alpha,
                "q0": model.q0,
                "nu_bar": params.nu_bar,
                "price": s.price_at(model.q0, params.nu_bar),
            });
            Ok(Outcome::Table { table, meta })
        }
    }
}

fn operator_market(path: &Path, payoff: Option<&str>, alpha: f64, cfg: &SolverConfig) -> Result<Outcome, CliError> {
    let market = load(path, parse_quantum_market)?;
    let payoff = load(Path::new(require_payoff(payoff)?), parse_operator)?;
    let bid = solve_quantum(&market, &payoff, alpha, cfg)?;
    let short = solve_quantum(&market, &payoff.scale(-1.0), alpha, cfg)?;
    let mid = solve_quantum(&market, &payoff, 0.0, cfg)?;
    Ok(Outcome::Json(json!({
        "p": bid.p,
        "delta": bid.delta,
        "s": bid.s,
        "phi": bid.phi,
        "r": bid.r,
        "mid": mid.p,
        "offer": -short.p,
        "iterations": bid.iterations,
    })))
}

fn spread_kind(s: &str) -> Result<SpreadPayoff, CliError> {
    match s {
        "call" => Ok(SpreadPayoff::Call),
        "put" => Ok(SpreadPayoff::Put),
        "digital" => Ok(SpreadPayoff::Digital),
        _ => invalid(format!("payoff must be call, put or digital, found '{s}'")),
    }
}

fn two_state(
    payoff: Option<&str>,
    alpha: f64,
    theta: f64,
    eps: f64,
    strike: f64,
    strikes: Option<&GridSpec>,
    cfg: &SolverConfig,
) -> Result<Outcome, CliError> {
    let kind = spread_kind(payoff.unwrap_or("call"))?;
    let (b, q) = two_state_operators(theta, eps);
    let market = two_state_market(theta, eps);
    let solve = |k: f64| -> Result<(TwoStateSpec, entropic::quantum::QuantumSolution), CliError> {
        let spec = TwoStateSpec { theta, eps_gap: eps, strike: k, payoff: kind };
        let op = spread_payoff(&q, &b, k, kind)?;
        Ok((spec, solve_quantum(&market, &op, alpha, cfg)?))
    };
    match strikes {
        None => {
            let (spec, sol) = solve(strike)?;
            let closed = two_state_model(&spec, alpha)?;
            Ok(Outcome::Json(json!({
                "p": sol.p,
                "delta": sol.delta,
                "s": sol.s,
                "r": sol.r,
                "iterations": sol.iterations,
                "closed_form": serde_json::to_value(closed).expect("solution serialises"),
            })))
        }
        Some(grid) => {
            let mut table = Table::new(&["k", "p", "delta_b", "delta_q", "p_closed_form"]);
            let mut log = SolverLog::default();
            for k in grid.values() {
                let (spec, sol) = solve(k)?;
                let closed = two_state_model(&spec, alpha)?;
                log.record((sol.p - closed.p).abs(), sol.iterations);
                table.push(vec![k, sol.p, sol.delta[0], sol.delta[1], closed.p]);
            }
            let meta = json!({ "theta": theta, "eps_gap": eps, "alpha": alpha, "solver": log.to_json() });
            Ok(Outcome::Table { table, meta })
        }
    }
}

fn funding_market(rate: f64, dt: f64, n: usize) -> Result<SampleMarket, CliError> {
    Ok(SampleMarket::from_rows(vec![1.0], &vec![vec![1.0 + rate * dt]; n], dt)?)
}

fn xva(path: &Path, price_grid: Option<&GridSpec>, cfg: &SolverConfig) -> Result<Outcome, CliError> {
    let sc = load(path, parse_scenario)?;
    let n = sc.payoff.len();
    let measures = [Measure::new(sc.weights[0].clone())?, Measure::new(sc.weights[1].clone())?];
    let (m1, m2) = entropic_margin(&sc.payoff, &sc.b_return, &measures[0], sc.betas[0], &measures[1], sc.betas[1])?;
    let setup = MarginSetup::new(sc.c1, sc.c2, sc.payoff.clone(), sc.b_return.clone(), sc.dt)?;
    let view = |i: usize| -> Result<CounterpartyView, CliError> {
        Ok(CounterpartyView {
            measure: measures[i].clone(),
            market: funding_market(sc.rates[i], sc.dt, n)?,
            alpha: sc.alphas[i],
            beta: sc.betas[i],
        })
    };
    let (v1, v2) = (view(0)?, view(1)?);
    let t = threshold_prices(&setup, &v1, &setup, &v2, cfg)?;
    let lo = if sc.c2.is_finite() { -sc.c2 } else { f64::NEG_INFINITY };
    let hi = if sc.c1.is_finite() { sc.c1 } else { f64::INFINITY };
    let mid = (0.5 * (t.p1 + t.p2)).clamp(lo, hi);
    let stats = if sc.c1.is_finite() && sc.c2.is_finite() {
        serde_json::to_value(default_stats(&setup, mid, &measures[0], &measures[1])?).expect("stats serialise")
    } else {
        Value::Null
    };
    let prices = match price_grid {
        Some(g) => g.values(),
        None => {
            let width = (t.p1 - t.p2).abs().max(0.1);
            let (a, b) = ((t.p1.min(t.p2) - width).max(lo), (t.p1.max(t.p2) + width).min(hi));
            GridSpec::new(a, b, 41).values()
        }
    };
    let mut table = Table::new(&["price", "buyer", "seller"]);
    for pt in viability_curve(&setup, &v1, &setup, &v2, &prices, cfg)? {
        table.push(vec![pt.price, pt.buyer, pt.seller]);
    }
    let meta = json!({
        "thresholds": serde_json::to_value(t).expect("thresholds serialise"),
        "default_stats": stats,
        "default_stats_price": mid,
        "entropic_margin": [number(m1), number(m2)],
    });
    Ok(Outcome::Table { table, meta })
}

fn study(args: &StudyArgs, seed: u64, cfg: &SolverConfig) -> Result<Outcome, CliError> {
    let out = match args.name {
        StudyName::FundingRateNormal => {
            let sigma2 = args.sweep.unwrap_or(GridSpec::new(0.01, 0.30, 30)).values();
            studies::funding_rate_normal(&[-0.05, 0.0, 0.05], &[0.0, 0.05, 0.10, 0.15, 0.20], 0.0, &sigma2)?
        }
        StudyName::FundingRateBinomial => {
            let w2 = args.sweep.unwrap_or(GridSpec::new(0.0001, 0.1, 100)).values();
            studies::funding_rate_binomial(&[0.05, 0.10, 0.15], &[0.0001, 0.001, 0.01, 0.1], 0.10, &w2)?
        }
        StudyName::Options => {
            let payoff = match args.payoff.as_str() {
                "call" => OptionKind::Call,
                "digital" => OptionKind::Digital,
                other => return invalid(format!("options study payoff must be call or digital, found '{other}'")),
            };
            let s = OptionsStudy {
                dist: args.dist,
                payoff,
                alpha: args.alpha,
                r: args.r,
                strikes: args.strike_grid.unwrap_or(GridSpec::new(-3.0, 3.0, 61)).values(),
                lambdas: args.lambda_grid.unwrap_or(GridSpec::new(-2.0, 2.0, 9)).values(),
                samples: args.samples,
                seed,
            };
            studies::options(&s, cfg)?
        }
        StudyName::Quantum => {
            let s = QuantumStudy {
                theta: args.theta,
                eps: args.eps_gap,
                alpha: args.alpha,
                strikes: args.strike_grid.unwrap_or(GridSpec::new(-3.0, 3.0, 121)).values(),
                payoff: spread_kind(&args.payoff)?,
            };
            studies::quantum(&s, cfg)?
        }
        StudyName::Xva => {
            let mut s = XvaStudy { alpha: args.alpha, ..XvaStudy::default() };
            if let Some(g) = args.lambda_grid {
                s.lambdas = g.values();
            }
            if let Some(g) = args.price_grid {
                s.prices = g.values();
            }
            studies::xva(&s, cfg)?
        }
    };
    Ok(Outcome::Table { table: out.table, meta: out.meta })
}

fn validate(path: &Path) -> Result<Outcome, CliError> {
    let v = read_json(path)?;
    let (kind, violations) = validate_value(&v);
    let report = json!({
        "file": path.display().to_string(),
        "kind": kind,
        "valid": violations.is_empty(),
        "violations": violations,
    });
    if violations.is_empty() {
        Ok(Outcome::Json(report))
    } else {
        Err(CliError::Invalid { message: format!("{} violation(s) in {}", violations.len(), path.display()), report })
    }
}
