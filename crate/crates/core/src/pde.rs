//! Continuous-time pricing PDEs.
//!
//! The complete market is the Black–Scholes equation with funding rate `r`.
//! The stochastic-volatility market adds an unhedgeable variance factor; the
//! investor's risk aversion enters through the nonlinear term
//! `-½ α (1 - ρ²) ε² ν (∂p/∂ν)²`, and the hedge picks up the variance
//! exposure that the asset can absorb, `δ = ∂p/∂q + ρ ε ∂p/∂ν / q`.
//!
//! Both solvers march backwards from maturity on uniform grids. The linear
//! operator is treated with a θ = ½ scheme (Crank–Nicolson in one
//! dimension, Douglas ADI in two), the first steps are replaced by implicit
//! half steps to damp the payoff kink, and the nonlinear term is lagged
//! explicitly. At the price boundaries the second derivative vanishes; at
//! the variance boundaries first derivatives are one-sided.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Complete-market parameters: funding rate, drift and variance rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BsParams {
    pub r: f64,
    pub mu: f64,
    pub nu: f64,
}

/// Stochastic-variance parameters: `dν = κ (ν̄ - ν) dt + ε √ν dW`, with
/// correlation `ρ` to the asset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvParams {
    pub r: f64,
    pub mu: f64,
    pub kappa: f64,
    pub nu_bar: f64,
    pub eps_vol: f64,
    pub rho: f64,
}

/// Uniform discretisation of `[0, q_max] × [0, nu_max]` and `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub q_nodes: usize,
    pub q_max: f64,
    pub nu_nodes: usize,
    pub nu_max: f64,
    pub time_steps: usize,
    /// Leading steps replaced by two implicit half steps each.
    pub smoothing_steps: usize,
    /// Keep every this many time steps of a two-factor surface.
    pub save_every: usize,
}

impl Grid {
    /// 201 price nodes over `[0, 4 q0]`, 101 variance nodes over `[0, 8 ν̄]`
    /// and 200 steps per unit of maturity.
    pub fn standard(q0: f64, nu_bar: f64, maturity: f64) -> Self {
        Self {
            q_nodes: 201,
            q_max: 4.0 * q0,
            nu_nodes: 101,
            nu_max: 8.0 * nu_bar,
            time_steps: ((200.0 * maturity).round() as usize).max(1),
            smoothing_steps: 2,
            save_every: 0,
        }
    }

    /// Same domain with mesh sizes divided by `factor`.
    pub fn refined(&self, factor: usize) -> Self {
        Self {
            q_nodes: (self.q_nodes - 1) * factor + 1,
            nu_nodes: (self.nu_nodes - 1) * factor + 1,
            time_steps: self.time_steps * factor,
            smoothing_steps: self.smoothing_steps * factor,
            save_every: self.save_every * factor,
            ..*self
        }
    }

    fn validate(&self, two_factor: bool) -> Result<()> {
        if self.q_nodes < 3 || !(self.q_max.is_finite() && self.q_max > 0.0) {
            return invalid("price grid needs at least 3 nodes and a positive upper bound");
        }
        if two_factor && (self.nu_nodes < 3 || !(self.nu_max.is_finite() && self.nu_max > 0.0)) {
            return invalid("variance grid needs at least 3 nodes and a positive upper bound");
        }
        if self.time_steps == 0 {
            return invalid("need at least one time step");
        }
        Ok(())
    }

    pub fn q_axis(&self) -> Vec<f64> {
        axis(self.q_max, self.q_nodes)
    }

    pub fn nu_axis(&self) -> Vec<f64> {
        axis(self.nu_max, self.nu_nodes)
    }
}

fn axis(max: f64, nodes: usize) -> Vec<f64> {
    (0..nodes).map(|i| max * i as f64 / (nodes - 1) as f64).collect()
}

/// Price and hedge on a one-factor grid; row `k` is calendar time `times[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Surface1d {
    pub times: Vec<f64>,
    pub q: Vec<f64>,
    pub price: Vec<Vec<f64>>,
    pub delta: Vec<Vec<f64>>,
}

impl Surface1d {
    /// Price at time zero, interpolated quadratically in `q`.
    pub fn price_at(&self, q: f64) -> f64 {
        interpolate(&self.q, &self.price[0], q)
    }

    pub fn delta_at(&self, q: f64) -> f64 {
        interpolate(&self.q, &self.delta[0], q)
    }
}

/// One saved time slice of a two-factor surface, indexed `[q][ν]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2d {
    pub t: f64,
    pub price: Vec<Vec<f64>>,
    pub delta: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Surface2d {
    pub q: Vec<f64>,
    pub nu: Vec<f64>,
    /// Saved slices in increasing time; the first is `t = 0`.
    pub slices: Vec<Slice2d>,
}

impl Surface2d {
    /// Price at time zero, interpolated quadratically in both coordinates.
    pub fn price_at(&self, q: f64, nu: f64) -> f64 {
        let column: Vec<f64> = self.slices[0]
            .price
            .iter()
            .map(|row| interpolate(&self.nu, row, nu))
            .collect();
        interpolate(&self.q, &column, q)
    }
}

/// Three-point Lagrange interpolation on a uniform axis.
fn interpolate(x: &[f64], y: &[f64], at: f64) -> f64 {
    let n = x.len();
    let h = x[1] - x[0];
    let pos = ((at - x[0]) / h).round() as isize;
    let c = pos.clamp(1, n as isize - 2) as usize;
    let (x0, x1, x2) = (x[c - 1], x[c], x[c + 1]);
    let l0 = (at - x1) * (at - x2) / ((x0 - x1) * (x0 - x2));
    let l1 = (at - x0) * (at - x2) / ((x1 - x0) * (x1 - x2));
    let l2 = (at - x0) * (at - x1) / ((x2 - x0) * (x2 - x1));
    l0 * y[c - 1] + l1 * y[c] + l2 * y[c + 1]
}

/// Solves `a_i x_{i-1} + b_i x_i + c_i x_{i+1} = d_i`.
fn thomas(a: &[f64], b: &[f64], c: &[f64], d: &mut [f64]) {
    let n = d.len();
    let mut cp = vec![0.0; n];
    let mut denom = b[0];
    cp[0] = c[0] / denom;
    d[0] /= denom;
    for i in 1..n {
        denom = b[i] - a[i] * cp[i - 1];
        cp[i] = c[i] / denom;
        d[i] = (d[i] - a[i] * d[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        d[i] -= cp[i] * d[i + 1];
    }
}

/// Tridiagonal operator stored by bands.
#[derive(Debug, Clone)]
struct Bands {
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
}

impl Bands {
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let n = x.len();
        for i in 0..n {
            let mut v = self.diag[i] * x[i];
            if i > 0 {
                v += self.lower[i] * x[i - 1];
            }
            if i + 1 < n {
                v += self.upper[i] * x[i + 1];
            }
            out[i] = v;
        }
    }

    /// Solves `(I - w L) x = rhs` in place.
    fn solve_shifted(&self, w: f64, rhs: &mut [f64]) {
        let a: Vec<f64> = self.lower.iter().map(|v| -w * v).collect();
        let b: Vec<f64> = self.diag.iter().map(|v| 1.0 - w * v).collect();
        let c: Vec<f64> = self.upper.iter().map(|v| -w * v).collect();
        thomas(&a, &b, &c, rhs);
    }
}

/// `r q ∂_q + ½ ν q² ∂_qq - r` on the price axis.
fn price_operator(q: &[f64], r: f64, nu: f64) -> Bands {
    let n = q.len();
    let h = q[1] - q[0];
    let mut b = Bands {
        lower: vec![0.0; n],
        diag: vec![0.0; n],
        upper: vec![0.0; n],
    };
    for i in 0..n {
        let drift = r * q[i];
        if i == 0 {
            // Drift and diffusion vanish at q = 0.
            b.diag[i] = -r + if q[0] > 0.0 { -drift / h } else { 0.0 };
            b.upper[i] = if q[0] > 0.0 { drift / h } else { 0.0 };
        } else if i == n - 1 {
            b.lower[i] = -drift / h;
            b.diag[i] = drift / h - r;
        } else {
            let diff = 0.5 * nu * q[i] * q[i] / (h * h);
            b.lower[i] = diff - drift / (2.0 * h);
            b.diag[i] = -2.0 * diff - r;
            b.upper[i] = diff + drift / (2.0 * h);
        }
    }
    b
}

fn first_derivative(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let h = x[1] - x[0];
    (0..n)
        .map(|i| {
            if i == 0 {
                (y[1] - y[0]) / h
            } else if i == n - 1 {
                (y[n - 1] - y[n - 2]) / h
            } else {
                (y[i + 1] - y[i - 1]) / (2.0 * h)
            }
        })
        .collect()
}

/// Payoff averaged over each grid cell `[q - h/2, q + h/2]`, which keeps the
/// second-order accuracy of the scheme for payoffs with a kink.
fn cell_average(q: &[f64], payoff: &dyn Fn(f64) -> f64) -> Vec<f64> {
    const SUB: usize = 256;
    let h = q[1] - q[0];
    let last = q.len() - 1;
    q.iter()
        .enumerate()
        .map(|(i, &x)| {
            if i == 0 || i == last {
                return payoff(x);
            }
            let lo = x - 0.5 * h;
            let w = h / SUB as f64;
            (0..SUB).map(|k| payoff(lo + (k as f64 + 0.5) * w)).sum::<f64>() / SUB as f64
        })
        .collect()
}

fn check_maturity(maturity: f64) -> Result<()> {
    if !(maturity.is_finite() && maturity > 0.0) {
        return invalid(format!("maturity {maturity} must be positive"));
    }
    Ok(())
}

/// Step schedule: `(dτ, θ)` pairs from maturity backwards.
fn schedule(grid: &Grid, maturity: f64) -> Vec<(f64, f64)> {
    let dt = maturity / grid.time_steps as f64;
    let smooth = grid.smoothing_steps.min(grid.time_steps);
    let mut steps = Vec::with_capacity(grid.time_steps + smooth);
    for _ in 0..smooth {
        steps.push((0.5 * dt, 1.0));
        steps.push((0.5 * dt, 1.0));
    }
    for _ in smooth..grid.time_steps {
        steps.push((dt, 0.5));
    }
    steps
}

/// Black–Scholes price and delta of a terminal payoff `f(q)`.
pub fn solve_bs_complete(
    params: &BsParams,
    payoff: &dyn Fn(f64) -> f64,
    maturity: f64,
    grid: &Grid,
) -> Result<Surface1d> {
    grid.validate(false)?;
    check_maturity(maturity)?;
    if !(params.nu.is_finite() && params.nu >= 0.0 && params.r.is_finite()) {
        return invalid("variance rate must be non-negative and the funding rate finite");
    }
    let q = grid.q_axis();
    let op = price_operator(&q, params.r, params.nu);
    let mut p = cell_average(&q, payoff);
    let mut price = vec![p.clone()];
    let mut work = vec![0.0; p.len()];
    let dt = maturity / grid.time_steps as f64;
    let mut steps_done = 0.0;
    let mut times = vec![maturity];
    let mut half = false;
    for (dtau, theta) in schedule(grid, maturity) {
        op.apply(&p, &mut work);
        for i in 0..p.len() {
            p[i] += (1.0 - theta) * dtau * work[i];
        }
        op.solve_shifted(theta * dtau, &mut p);
        if dtau < dt && !half {
            half = true;
            continue;
        }
        half = false;
        steps_done += 1.0;
        times.push(maturity - steps_done * dt);
        price.push(p.clone());
    }
    let times_last = times.len() - 1;
    times[times_last] = 0.0;
    price.reverse();
    times.reverse();
    let delta = price.iter().map(|row| first_derivative(&q, row)).collect();
    Ok(Surface1d {
        times,
        q,
        price,
        delta,
    })
}

/// Heston variance level under the price measure:
/// `ν̄ - (μ - r) ρ ε / κ`.
pub fn heston_price_measure(params: &SvParams) -> Result<f64> {
    if params.kappa == 0.0 {
        return invalid("mean reversion κ = 0 leaves the price-measure variance level undefined");
    }
    Ok(params.nu_bar - (params.mu - params.r) * params.rho * params.eps_vol / params.kappa)
}

fn check_sv(params: &SvParams) -> Result<()> {
    let finite = [params.r, params.mu, params.kappa, params.nu_bar, params.eps_vol, params.rho]
        .iter()
        .all(|v| v.is_finite());
    if !finite {
        return invalid("model parameters must be finite");
    }
    if params.eps_vol < 0.0 || params.nu_bar < 0.0 || params.kappa < 0.0 {
        return invalid("κ, ν̄ and ε must be non-negative");
    }
    if params.rho.abs() > 1.0 {
        return invalid(format!("correlation {} outside [-1, 1]", params.rho));
    }
    Ok(())
}

/// Dense `[q][ν]` field.
type Field = Vec<Vec<f64>>;

struct SvOperators {
    /// Price-direction operator per variance node.
    by_nu: Vec<Bands>,
    /// Variance-direction operator (identical for every price node).
    along_nu: Bands,
    mixed: Vec<Vec<f64>>,
    nonlinear: Vec<f64>,
    h_nu: f64,
}

impl SvOperators {
    fn new(params: &SvParams, alpha: f64, q: &[f64], nu: &[f64]) -> Self {
        let h_q = q[1] - q[0];
        let h_nu = nu[1] - nu[0];
        let by_nu = nu.iter().map(|v| price_operator(q, params.r, *v)).collect();
        let m = nu.len();
        let mut along = Bands {
            lower: vec![0.0; m],
            diag: vec![0.0; m],
            upper: vec![0.0; m],
        };
        let eps2 = params.eps_vol * params.eps_vol;
        for j in 0..m {
            let drift = params.kappa * (params.nu_bar - nu[j])
                - (params.mu - params.r) * params.rho * params.eps_vol;
            if j == 0 {
                along.diag[j] = -drift / h_nu;
                along.upper[j] = drift / h_nu;
            } else if j == m - 1 {
                along.lower[j] = -drift / h_nu;
                along.diag[j] = drift / h_nu;
            } else {
                let diff = 0.5 * eps2 * nu[j] / (h_nu * h_nu);
                if drift.abs() * h_nu > eps2 * nu[j] {
                    // Upwind where convection dominates diffusion.
                    if drift > 0.0 {
                        along.diag[j] = -drift / h_nu - 2.0 * diff;
                        along.upper[j] = drift / h_nu + diff;
                        along.lower[j] = diff;
                    } else {
                        along.diag[j] = drift / h_nu - 2.0 * diff;
                        along.lower[j] = -drift / h_nu + diff;
                        along.upper[j] = diff;
                    }
                } else {
                    along.lower[j] = diff - drift / (2.0 * h_nu);
                    along.diag[j] = -2.0 * diff;
                    along.upper[j] = diff + drift / (2.0 * h_nu);
                }
            }
        }
        let mixed = q
            .iter()
            .map(|qi| {
                nu.iter()
                    .map(|v| params.rho * params.eps_vol * v * qi / (4.0 * h_q * h_nu))
                    .collect()
            })
            .collect();
        let nonlinear = nu
            .iter()
            .map(|v| -0.5 * alpha * (1.0 - params.rho * params.rho) * eps2 * v)
            .collect();
        Self {
            by_nu,
            along_nu: along,
            mixed,
            nonlinear,
            h_nu,
        }
    }

    fn apply_price(&self, p: &Field, out: &mut Field) {
        let (n, m) = (p.len(), p[0].len());
        let mut line = vec![0.0; n];
        let mut res = vec![0.0; n];
        for j in 0..m {
            for i in 0..n {
                line[i] = p[i][j];
            }
            self.by_nu[j].apply(&line, &mut res);
            for i in 0..n {
                out[i][j] = res[i];
            }
        }
    }

    fn apply_variance(&self, p: &Field, out: &mut Field) {
        for (row, o) in p.iter().zip(out.iter_mut()) {
            self.along_nu.apply(row, o);
        }
    }

    /// Mixed derivative plus the lagged nonlinear term.
    fn apply_explicit(&self, p: &Field, out: &mut Field) {
        let (n, m) = (p.len(), p[0].len());
        for i in 0..n {
            for j in 0..m {
                let mut v = 0.0;
                if i > 0 && i + 1 < n && j > 0 && j + 1 < m {
                    v += self.mixed[i][j]
                        * (p[i + 1][j + 1] - p[i + 1][j - 1] - p[i - 1][j + 1] + p[i - 1][j - 1]);
                }
                if self.nonlinear[j] != 0.0 {
                    let d = nu_derivative(&p[i], j, self.h_nu);
                    v += self.nonlinear[j] * d * d;
                }
                out[i][j] = v;
            }
        }
    }
}

fn nu_derivative(row: &[f64], j: usize, h: f64) -> f64 {
    let m = row.len();
    if j == 0 {
        (row[1] - row[0]) / h
    } else if j == m - 1 {
        (row[m - 1] - row[m - 2]) / h
    } else {
        (row[j + 1] - row[j - 1]) / (2.0 * h)
    }
}

/// Price and hedge in the stochastic-variance market for an investor with
/// risk aversion `α`.
pub fn solve_sv_incomplete(
    params: &SvParams,
    alpha: f64,
    payoff: &dyn Fn(f64) -> f64,
    maturity: f64,
    grid: &Grid,
) -> Result<Surface2d> {
    grid.validate(true)?;
    check_maturity(maturity)?;
    check_sv(params)?;
    if !(alpha.is_finite() && alpha >= 0.0) {
        return invalid("risk aversion must be finite and non-negative");
    }
    let q = grid.q_axis();
    let nu = grid.nu_axis();
    let (n, m) = (q.len(), nu.len());
    let ops = SvOperators::new(params, alpha, &q, &nu);
    let terminal = cell_average(&q, payoff);
    let bound = 1e6 * (1.0 + terminal.iter().fold(0.0f64, |a, v| a.max(v.abs())));
    let mut p: Field = terminal.iter().map(|v| vec![*v; m]).collect();
    let mut a_price = vec![vec![0.0; m]; n];
    let mut a_var = vec![vec![0.0; m]; n];
    let mut a_expl = vec![vec![0.0; m]; n];
    let dt = maturity / grid.time_steps as f64;
    let save_every = if grid.save_every == 0 { grid.time_steps } else { grid.save_every };
    let mut saved = vec![slice(params, &q, &nu, &p, maturity, &ops)];
    let mut completed = 0usize;
    let mut half = false;
    let mut line = vec![0.0; n];
    for (dtau, theta) in schedule(grid, maturity) {
        ops.apply_price(&p, &mut a_price);
        ops.apply_variance(&p, &mut a_var);
        ops.apply_explicit(&p, &mut a_expl);
        // Douglas: explicit predictor, then one implicit correction per axis.
        let mut y: Field = (0..n)
            .map(|i| {
                (0..m)
                    .map(|j| {
                        p[i][j]
                            + dtau * (a_price[i][j] + a_var[i][j] + a_expl[i][j])
                            - theta * dtau * a_price[i][j]
                    })
                    .collect()
            })
            .collect();
        for j in 0..m {
            for i in 0..n {
                line[i] = y[i][j];
            }
            ops.by_nu[j].solve_shifted(theta * dtau, &mut line);
            for i in 0..n {
                y[i][j] = line[i];
            }
        }
        for i in 0..n {
            for j in 0..m {
                y[i][j] -= theta * dtau * a_var[i][j];
            }
            ops.along_nu.solve_shifted(theta * dtau, &mut y[i]);
        }
        p = y;
        if p.iter().flatten().any(|v| !v.is_finite() || v.abs() > bound) {
            return Err(Error::Numerical(
                "price surface diverged; refine the time step or lower the risk aversion".into(),
            ));
        }
        if dtau < dt && !half {
            half = true;
            continue;
        }
        half = false;
        completed += 1;
        if completed % save_every == 0 || completed == grid.time_steps {
            let t = if completed == grid.time_steps {
                0.0
            } else {
                maturity - completed as f64 * dt
            };
            saved.push(slice(params, &q, &nu, &p, t, &ops));
        }
    }
    saved.reverse();
    Ok(Surface2d {
        q,
        nu,
        slices: saved,
    })
}

fn slice(params: &SvParams, q: &[f64], nu: &[f64], p: &Field, t: f64, ops: &SvOperators) -> Slice2d {
    let (n, m) = (q.len(), nu.len());
    let mut delta = vec![vec![0.0; m]; n];
    for j in 0..m {
        let col: Vec<f64> = (0..n).map(|i| p[i][j]).collect();
        let dq = first_derivative(q, &col);
        for i in 0..n {
            let dnu = nu_derivative(&p[i], j, ops.h_nu);
            delta[i][j] = dq[i]
                + if q[i] > 0.0 {
                    params.rho * params.eps_vol * dnu / q[i]
                } else {
                    0.0
                };
        }
    }
    Slice2d {
        t,
        price: p.clone(),
        delta,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tridiagonal_solver() {
        let (a, b, c) = (vec![0.0, 1.0, 1.0], vec![4.0, 4.0, 4.0], vec![1.0, 1.0, 0.0]);
        let mut d = vec![5.0, 6.0, 5.0];
        thomas(&a, &b, &c, &mut d);
        for v in d {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_payoff_discounts() {
        let params = BsParams { r: 0.05, mu: 0.05, nu: 0.04 };
        let grid = Grid::standard(100.0, 0.04, 1.0);
        let s = solve_bs_complete(&params, &|_| 3.0, 1.0, &grid).unwrap();
        assert!((s.price_at(100.0) - 3.0 * (-0.05f64).exp()).abs() < 1e-5);
        assert_eq!(s.times[0], 0.0);
        assert_eq!(s.price.len(), 201);
    }

    #[test]
    fn undefined_price_measure_level() {
        let p = SvParams { r: 0.0, mu: 0.02, kappa: 0.0, nu_bar: 0.04, eps_vol: 1.0, rho: -0.5 };
        assert!(heston_price_measure(&p).is_err());
        let p = SvParams { kappa: 2.0, ..p };
        assert!((heston_price_measure(&p).unwrap() - 0.045).abs() < 1e-15);
    }
}
