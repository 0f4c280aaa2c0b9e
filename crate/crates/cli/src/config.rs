//! JSON inputs: sample markets, Hermitian operators, operator markets, XVA
//! scenarios and PDE models.
//!
//! Each reader walks the raw JSON and collects every problem with its JSON
//! pointer before anything is built, so `validate` can report them all.

use std::path::Path;

use entropic::calibrate::SampleMarket;
use entropic::measure::Measure;
use entropic::pde::{BsParams, Grid, SvParams};
use entropic::quantum::{HermitianOperator, QuantumMarket, SpreadPayoff, HERMITIAN_TOL};
use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

/// Weights may miss unit mass by this much.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

#[derive(Default)]
struct Checker {
    violations: Vec<Violation>,
}

impl Checker {
    fn fail(&mut self, path: &str, message: impl Into<String>) {
        self.violations.push(Violation { path: path.to_string(), message: message.into() });
    }

    fn object<'a>(&mut self, v: &'a Value, path: &str, allowed: &[&str]) -> Option<&'a Map<String, Value>> {
        let Some(obj) = v.as_object() else {
            self.fail(path, "expected an object");
            return None;
        };
        for key in obj.keys() {
            if !allowed.contains(&key.as_str()) {
                self.fail(&format!("{path}/{key}"), "unknown field");
            }
        }
        Some(obj)
    }

    fn number(&mut self, v: &Value, path: &str) -> Option<f64> {
        match v.as_f64() {
            Some(x) if x.is_finite() => Some(x),
            _ => {
                self.fail(path, "expected a finite number");
                None
            }
        }
    }

    /// A number, or `null` / `"inf"` for infinity.
    fn extended(&mut self, v: &Value, path: &str) -> Option<f64> {
        match v {
            Value::Null => Some(f64::INFINITY),
            Value::String(s) if s == "inf" => Some(f64::INFINITY),
            _ => self.number(v, path),
        }
    }

    fn numbers(&mut self, v: &Value, path: &str) -> Option<Vec<f64>> {
        let Some(items) = v.as_array() else {
            self.fail(path, "expected an array of numbers");
            return None;
        };
        let out: Vec<Option<f64>> = items.iter().enumerate().map(|(i, x)| self.number(x, &format!("{path}/{i}"))).collect();
        out.into_iter().collect()
    }

    fn matrix(&mut self, v: &Value, path: &str, cols: Option<usize>) -> Option<Vec<Vec<f64>>> {
        let Some(rows) = v.as_array() else {
            self.fail(path, "expected an array of rows");
            return None;
        };
        let mut out = Vec::with_capacity(rows.len());
        let mut ok = true;
        for (i, row) in rows.iter().enumerate() {
            let p = format!("{path}/{i}");
            match self.numbers(row, &p) {
                Some(r) => {
                    if let Some(c) = cols {
                        if r.len() != c {
                            self.fail(&p, format!("expected {c} entries, found {}", r.len()));
                            ok = false;
                        }
                    }
                    out.push(r);
                }
                None => ok = false,
            }
        }
        ok.then_some(out)
    }

    fn positive(&mut self, x: f64, path: &str) {
        if x <= 0.0 {
            self.fail(path, format!("must be positive, found {x}"));
        }
    }

    fn finish<T>(self, value: Option<T>) -> Result<T, Vec<Violation>> {
        match value {
            Some(v) if self.violations.is_empty() => Ok(v),
            _ => Err(self.violations),
        }
    }
}

fn optional<'a>(obj: &'a Map<String, Value>, key: &str) -> Option<&'a Value> {
    obj.get(key)
}

fn required<'a>(c: &mut Checker, obj: &'a Map<String, Value>, key: &str, path: &str) -> Option<&'a Value> {
    let v = obj.get(key);
    if v.is_none() {
        c.fail(&format!("{path}/{key}"), "missing field");
    }
    v
}

fn weights(c: &mut Checker, v: &Value, path: &str, outcomes: usize) -> Option<Vec<f64>> {
    let w = c.numbers(v, path)?;
    if w.len() != outcomes {
        c.fail(path, format!("expected {outcomes} weights, found {}", w.len()));
        return None;
    }
    for (i, x) in w.iter().enumerate() {
        if *x <= 0.0 {
            c.fail(&format!("{path}/{i}"), format!("weights must be positive, found {x}"));
        }
    }
    let total: f64 = w.iter().sum();
    if (total - 1.0).abs() > WEIGHT_SUM_TOL {
        c.fail(path, format!("weights sum to {total}, expected 1"));
    }
    Some(w)
}

/// Sample market with its expectation measure.
#[derive(Debug, Clone)]
pub struct MarketInput {
    pub market: SampleMarket,
    pub measure: Measure,
}

fn market_at(c: &mut Checker, v: &Value, path: &str) -> Option<MarketInput> {
    let obj = c.object(v, path, &["q", "Q", "weights", "dt"])?;
    let q = required(c, obj, "q", path).and_then(|x| c.numbers(x, &format!("{path}/q")));
    let assets = q.as_ref().map(Vec::len);
    if assets == Some(0) {
        c.fail(&format!("{path}/q"), "need at least one asset");
    }
    if q.as_ref().is_some_and(|q| !q.is_empty() && q.iter().all(|x| *x == 0.0)) {
        c.fail(&format!("{path}/q"), "all prices are zero");
    }
    let rows = required(c, obj, "Q", path).and_then(|x| c.matrix(x, &format!("{path}/Q"), assets));
    if rows.as_ref().is_some_and(Vec::is_empty) {
        c.fail(&format!("{path}/Q"), "need at least one outcome");
    }
    let dt = match optional(obj, "dt") {
        Some(x) => c.number(x, &format!("{path}/dt")),
        None => Some(1.0),
    };
    if let Some(dt) = dt {
        c.positive(dt, &format!("{path}/dt"));
    }
    let (q, rows, dt) = (q?, rows?, dt?);
    let measure = match optional(obj, "weights") {
        Some(w) => weights(c, w, &format!("{path}/weights"), rows.len()),
        None => Some(vec![1.0 / rows.len() as f64; rows.len()]),
    }?;
    if !c.violations.is_empty() {
        return None;
    }
    let market = match SampleMarket::from_rows(q, &rows, dt) {
        Ok(m) => m,
        Err(e) => {
            c.fail(path, e.to_string());
            return None;
        }
    };
    let measure = Measure::from_unnormalised(measure).ok()?;
    Some(MarketInput { market, measure })
}

pub fn parse_market(v: &Value) -> Result<MarketInput, Vec<Violation>> {
    let mut c = Checker::default();
    let out = market_at(&mut c, v, "");
    c.finish(out)
}

fn operator_at(c: &mut Checker, v: &Value, path: &str) -> Option<HermitianOperator> {
    let obj = c.object(v, path, &["re", "im"])?;
    let re = required(c, obj, "re", path).and_then(|x| c.matrix(x, &format!("{path}/re"), None))?;
    let n = re.len();
    if n == 0 {
        c.fail(&format!("{path}/re"), "operator must have at least one row");
        return None;
    }
    if re.iter().any(|r| r.len() != n) {
        c.fail(&format!("{path}/re"), format!("expected a square {n}x{n} matrix"));
        return None;
    }
    let im = match optional(obj, "im") {
        Some(x) => c.matrix(x, &format!("{path}/im"), Some(n))?,
        None => vec![vec![0.0; n]; n],
    };
    if im.len() != n {
        c.fail(&format!("{path}/im"), format!("expected {n} rows, found {}", im.len()));
        return None;
    }
    let re = DMatrix::from_fn(n, n, |i, j| re[i][j]);
    let im = DMatrix::from_fn(n, n, |i, j| im[i][j]);
    let asym_re = (&re - re.transpose()).amax();
    let asym_im = (&im + im.transpose()).amax();
    let scale = re.amax().max(im.amax()).max(1.0);
    if asym_re.max(asym_im) > HERMITIAN_TOL * scale {
        let (part, asym) = if asym_re >= asym_im { ("re", asym_re) } else { ("im", asym_im) };
        c.fail(&format!("{path}/{part}"), format!("operator is not Hermitian: asymmetry {asym:.3e}"));
        return None;
    }
    match HermitianOperator::from_parts(&re, &im) {
        Ok(op) => Some(op),
        Err(e) => {
            c.fail(path, e.to_string());
            None
        }
    }
}

pub fn parse_operator(v: &Value) -> Result<HermitianOperator, Vec<Violation>> {
    let mut c = Checker::default();
    let out = operator_at(&mut c, v, "");
    c.finish(out)
}

fn quantum_market_at(c: &mut Checker, v: &Value, path: &str) -> Option<QuantumMarket> {
    let obj = c.object(v, path, &["q", "finals", "dt"])?;
    let q = required(c, obj, "q", path).and_then(|x| c.numbers(x, &format!("{path}/q")));
    let finals = required(c, obj, "finals", path).and_then(|x| {
        let Some(items) = x.as_array() else {
            c.fail(&format!("{path}/finals"), "expected an array of operators");
            return None;
        };
        let ops: Vec<Option<HermitianOperator>> =
            items.iter().enumerate().map(|(i, op)| operator_at(c, op, &format!("{path}/finals/{i}"))).collect();
        ops.into_iter().collect::<Option<Vec<_>>>()
    });
    let dt = match optional(obj, "dt") {
        Some(x) => c.number(x, &format!("{path}/dt")),
        None => Some(1.0),
    };
    let (q, finals, dt) = (q?, finals?, dt?);
    if q.len() != finals.len() {
        c.fail(&format!("{path}/finals"), format!("expected {} operators, found {}", q.len(), finals.len()));
        return None;
    }
    match QuantumMarket::new(q, finals, dt) {
        Ok(m) => Some(m),
        Err(e) => {
            c.fail(path, e.to_string());
            None
        }
    }
}

pub fn parse_quantum_market(v: &Value) -> Result<QuantumMarket, Vec<Violation>> {
    let mut c = Checker::default();
    let out = quantum_market_at(&mut c, v, "");
    c.finish(out)
}

/// Bilateral trade: payoff, margin-account return, capital, and each
/// counterparty's measure, risk aversion, default aversion and funding rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub payoff: Vec<f64>,
    pub b_return: Vec<f64>,
    pub c1: f64,
    pub c2: f64,
    pub alphas: [f64; 2],
    pub betas: [f64; 2],
    pub rates: [f64; 2],
    pub weights: [Vec<f64>; 2],
    pub dt: f64,
}

fn pair(c: &mut Checker, obj: &Map<String, Value>, key: &str, path: &str, default: [f64; 2], extended: bool) -> Option<[f64; 2]> {
    let Some(v) = optional(obj, key) else {
        return Some(default);
    };
    let p = format!("{path}/{key}");
    let Some(items) = v.as_array().filter(|a| a.len() == 2) else {
        c.fail(&p, "expected a pair [buyer, seller]");
        return None;
    };
    let a = if extended { c.extended(&items[0], &format!("{p}/0")) } else { c.number(&items[0], &format!("{p}/0")) };
    let b = if extended { c.extended(&items[1], &format!("{p}/1")) } else { c.number(&items[1], &format!("{p}/1")) };
    let out = [a?, b?];
    for (i, x) in out.iter().enumerate() {
        if *x < 0.0 && key != "rates" {
            c.fail(&format!("{p}/{i}"), format!("must be non-negative, found {x}"));
        }
    }
    Some(out)
}

pub fn parse_scenario(v: &Value) -> Result<Scenario, Vec<Violation>> {
    let mut c = Checker::default();
    let out = (|| {
        let obj = c.object(v, "", &["P", "b_return", "c1", "c2", "alphas", "betas", "rates", "weights", "dt"])?;
        let payoff = required(&mut c, obj, "P", "").and_then(|x| c.numbers(x, "/P"))?;
        let n = payoff.len();
        if n == 0 {
            c.fail("/P", "need at least one outcome");
            return None;
        }
        let dt = match optional(obj, "dt") {
            Some(x) => c.number(x, "/dt"),
            None => Some(1.0),
        }?;
        c.positive(dt, "/dt");
        let b_return = match optional(obj, "b_return") {
            Some(Value::Array(_)) => {
                let b = c.numbers(&obj["b_return"], "/b_return")?;
                if b.len() != n {
                    c.fail("/b_return", format!("expected {n} entries, found {}", b.len()));
                }
                b
            }
            Some(x) => vec![c.number(x, "/b_return")?; n],
            None => vec![0.0; n],
        };
        for (i, r) in b_return.iter().enumerate() {
            if 1.0 + r <= 0.0 {
                c.fail(&format!("/b_return/{i}"), "margin account must keep a positive price");
            }
        }
        let mut capital = [0.0; 2];
        for (i, key) in ["c1", "c2"].iter().enumerate() {
            let x = required(&mut c, obj, key, "").and_then(|x| c.extended(x, &format!("/{key}")))?;
            if x < 0.0 {
                c.fail(&format!("/{key}"), format!("capital must be non-negative, found {x}"));
            }
            capital[i] = x;
        }
        let alphas = pair(&mut c, obj, "alphas", "", [1.0, 1.0], false)?;
        let betas = pair(&mut c, obj, "betas", "", [f64::INFINITY, f64::INFINITY], true)?;
        let rates = pair(&mut c, obj, "rates", "", [0.0, 0.0], false)?;
        let uniform = vec![1.0 / n as f64; n];
        let weights = match optional(obj, "weights") {
            Some(Value::Array(items)) if items.len() == 2 => [
                weights(&mut c, &items[0], "/weights/0", n)?,
                weights(&mut c, &items[1], "/weights/1", n)?,
            ],
            Some(_) => {
                c.fail("/weights", "expected a pair of weight arrays [buyer, seller]");
                return None;
            }
            None => [uniform.clone(), uniform],
        };
        Some(Scenario { payoff, b_return, c1: capital[0], c2: capital[1], alphas, betas, rates, weights, dt })
    })();
    c.finish(out)
}

/// PDE model with its contract and grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PdeModel {
    pub kind: PdeKind,
    pub strike: f64,
    pub payoff: SpreadPayoff,
    pub maturity: f64,
    pub alpha: f64,
    pub grid: Grid,
    pub q0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PdeKind {
    Complete(BsParams),
    StochasticVolatility(SvParams),
}

pub fn parse_pde(v: &Value) -> Result<PdeModel, Vec<Violation>> {
    let mut c = Checker::default();
    let out = (|| {
        let keys = [
            "model", "r", "mu", "nu", "kappa", "nu_bar", "eps_vol", "rho", "strike", "payoff", "maturity", "alpha", "q0",
            "q_nodes", "nu_nodes", "time_steps",
        ];
        let obj = c.object(v, "", &keys)?;
        let model = required(&mut c, obj, "model", "")?.as_str().map(str::to_string);
        let num = |c: &mut Checker, key: &str, default: Option<f64>| -> Option<f64> {
            match (optional(obj, key), default) {
                (Some(x), _) => c.number(x, &format!("/{key}")),
                (None, Some(d)) => Some(d),
                (None, None) => {
                    c.fail(&format!("/{key}"), "missing field");
                    None
                }
            }
        };
        let r = num(&mut c, "r", Some(0.0));
        let mu = num(&mut c, "mu", Some(0.0));
        let strike = num(&mut c, "strike", None);
        let maturity = num(&mut c, "maturity", Some(1.0));
        let alpha = num(&mut c, "alpha", Some(0.0));
        let (kind, level) = match model.as_deref() {
            Some("complete") => {
                let nu = num(&mut c, "nu", None)?;
                (PdeKind::Complete(BsParams { r: r?, mu: mu?, nu }), nu)
            }
            Some("stochastic-volatility") => {
                let p = SvParams {
                    r: r?,
                    mu: mu?,
                    kappa: num(&mut c, "kappa", None)?,
                    nu_bar: num(&mut c, "nu_bar", None)?,
                    eps_vol: num(&mut c, "eps_vol", None)?,
                    rho: num(&mut c, "rho", None)?,
                };
                if p.rho.abs() > 1.0 {
                    c.fail("/rho", "correlation must lie in [-1, 1]");
                }
                (PdeKind::StochasticVolatility(p), p.nu_bar)
            }
            _ => {
                c.fail("/model", "expected \"complete\" or \"stochastic-volatility\"");
                return None;
            }
        };
        let payoff = match optional(obj, "payoff").map(|p| p.as_str()) {
            None | Some(Some("call")) => SpreadPayoff::Call,
            Some(Some("put")) => SpreadPayoff::Put,
            Some(Some("digital")) => SpreadPayoff::Digital,
            _ => {
                c.fail("/payoff", "expected \"call\", \"put\" or \"digital\"");
                return None;
            }
        };
        let (strike, maturity, alpha) = (strike?, maturity?, alpha?);
        let q0 = num(&mut c, "q0", Some(strike))?;
        c.positive(maturity, "/maturity");
        c.positive(q0, "/q0");
        if level <= 0.0 {
            c.fail("/nu", "variance level must be positive");
            return None;
        }
        let mut grid = Grid::standard(q0, level, maturity);
        for (key, slot) in [("q_nodes", &mut grid.q_nodes), ("nu_nodes", &mut grid.nu_nodes), ("time_steps", &mut grid.time_steps)] {
            if let Some(x) = optional(obj, key) {
                match x.as_u64() {
                    Some(n) if n >= 3 => *slot = n as usize,
                    _ => c.fail(&format!("/{key}"), "expected an integer of at least 3"),
                }
            }
        }
        Some(PdeModel { kind, strike, payoff, maturity, alpha, grid, q0 })
    })();
    c.finish(out)
}

/// Kinds of input file, told apart by their fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputKind {
    Market,
    Operator,
    QuantumMarket,
    Scenario,
    PdeModel,
}

pub fn detect_kind(v: &Value) -> Option<InputKind> {
    let obj = v.as_object()?;
    if obj.contains_key("finals") {
        Some(InputKind::QuantumMarket)
    } else if obj.contains_key("re") {
        Some(InputKind::Operator)
    } else if obj.contains_key("P") {
        Some(InputKind::Scenario)
    } else if obj.contains_key("model") {
        Some(InputKind::PdeModel)
    } else if obj.contains_key("Q") || obj.contains_key("q") {
        Some(InputKind::Market)
    } else {
        None
    }
}

/// Every violation in a file of any supported kind.
pub fn validate_value(v: &Value) -> (Option<InputKind>, Vec<Violation>) {
    let kind = detect_kind(v);
    let violations = match kind {
        Some(InputKind::Market) => parse_market(v).err(),
        Some(InputKind::Operator) => parse_operator(v).err(),
        Some(InputKind::QuantumMarket) => parse_quantum_market(v).err(),
        Some(InputKind::Scenario) => parse_scenario(v).err(),
        Some(InputKind::PdeModel) => parse_pde(v).err(),
        None => Some(vec![Violation {
            path: String::new(),
            message: "unrecognised input: expected a market, operator, scenario or PDE model".into(),
        }]),
    };
    (kind, violations.unwrap_or_default())
}

pub fn read_json(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: malformed JSON: {e}", path.display())))
}

/// Reads and parses a file, turning violations into a validation error.
pub fn load<T>(path: &Path, parse: impl Fn(&Value) -> Result<T, Vec<Violation>>) -> Result<T, CliError> {
    let v = read_json(path)?;
    parse(&v).map_err(|vs| {
        let lines: Vec<String> = vs.iter().map(|x| format!("  {}: {}", if x.path.is_empty() { "/" } else { &x.path }, x.message)).collect();
        CliError::Validation(format!("{}:\n{}", path.display(), lines.join("\n")))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn weights_off_by_a_percent() {
        let v = json!({"q": [1.0, 1.0], "Q": [[1.0, 0.5], [1.0, 1.5]], "weights": [0.5, 0.49]});
        let errs = parse_market(&v).unwrap_err();
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].path, "/weights");
        assert!(errs[0].message.contains("0.99"));
    }

    #[test]
    fn ragged_rows_are_located() {
        let v = json!({"q": [1.0, 1.0], "Q": [[1.0, 0.5], [1.0]], "dt": -1.0});
        let errs = parse_market(&v).unwrap_err();
        let paths: Vec<&str> = errs.iter().map(|e| e.path.as_str()).collect();
        assert!(paths.contains(&"/Q/1") && paths.contains(&"/dt"), "{paths:?}");
    }

    #[test]
    fn valid_market() {
        let v = json!({"q": [1.0, 1.0], "Q": [[1.0, 0.5], [1.0, 1.5]], "weights": [0.25, 0.75], "dt": 1.0});
        let m = parse_market(&v).unwrap();
        assert_eq!(m.market.outcomes(), 2);
        assert_eq!(validate_value(&v), (Some(InputKind::Market), vec![]));
    }

    #[test]
    fn asymmetric_operator() {
        let v = json!({"re": [[1.0, 0.5], [0.500001, -1.0]], "im": [[0.0, 0.0], [0.0, 0.0]]});
        let errs = parse_operator(&v).unwrap_err();
        assert_eq!(errs[0].path, "/re");
        assert!(errs[0].message.contains("1.000e-6"), "{}", errs[0].message);
    }

    #[test]
    fn complex_hermitian_operator() {
        let v = json!({"re": [[1.0, 0.5], [0.5, -1.0]], "im": [[0.0, 0.2], [-0.2, 0.0]]});
        assert_eq!(parse_operator(&v).unwrap().dim(), 2);
    }

    #[test]
    fn scenario_defaults_and_infinite_capital() {
        let v = json!({"P": [0.0, 1.0], "c1": null, "c2": 0.5, "betas": ["inf", 2.0]});
        let s = parse_scenario(&v).unwrap();
        assert_eq!(s.c1, f64::INFINITY);
        assert_eq!(s.betas, [f64::INFINITY, 2.0]);
        assert_eq!(s.b_return, vec![0.0, 0.0]);
        let v = json!({"P": [0.0, 1.0], "c1": -1.0, "c2": 0.5, "weights": [[0.5, 0.5], [1.0]]});
        let paths: Vec<String> = parse_scenario(&v).unwrap_err().into_iter().map(|e| e.path).collect();
        assert!(paths.contains(&"/c1".to_string()), "{paths:?}");
    }

    #[test]
    fn pde_models() {
        let v = json!({"model": "complete", "nu": 0.04, "strike": 100.0});
        let m = parse_pde(&v).unwrap();
        assert_eq!(m.grid.q_nodes, 201);
        assert_eq!(m.q0, 100.0);
        let v = json!({"model": "stochastic-volatility", "kappa": 2.0, "nu_bar": 0.04, "eps_vol": 0.3, "rho": 1.5, "strike": 1.0});
        assert_eq!(parse_pde(&v).unwrap_err()[0].path, "/rho");
    }
}
