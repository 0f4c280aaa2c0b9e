//! Damped Newton solvers shared by the sample-space and operator markets.
//!
//! Both markets are exponential families in the traded increments `dq`: a
//! base exponent plus `Σ_j shift_j dq_j`. The solvers only need the log
//! partition function, the tilted mean of `dq` and its derivative (the tilted
//! covariance), which [`TiltFamily`] provides.
//!
//! Directions in which `dq` has no variance are split off up front. Their
//! increments are known constants, so they either pin the funding rate (a
//! deterministic funding asset) or must have zero value (no free lunch).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{ln_sum_exp, sum};

/// Newton controls shared by calibration and hedging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Residual tolerance, relative to the price scale of the market.
    pub tol: f64,
    pub max_iter: usize,
    /// Maximum number of step halvings per iteration.
    pub damping: usize,
    /// Relative eigenvalue cutoff separating deterministic directions.
    pub variance_floor: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 100,
            damping: 30,
            variance_floor: 1e-12,
        }
    }
}

impl SolverConfig {
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }
}

/// Log partition function, mean and covariance of `dq` under a tilt.
#[derive(Debug, Clone)]
pub struct TiltMoments {
    pub log_partition: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// An exponential family `exp(base + shift · dq)` over the traded increments.
pub trait TiltFamily {
    fn assets(&self) -> usize;
    fn moments(&self, shift: &DVector<f64>) -> Result<TiltMoments>;

    /// Largest relative entropy of any member with respect to the base.
    fn max_divergence(&self) -> f64 {
        f64::INFINITY
    }
}

/// Sample-space family with unnormalised base log-weights.
#[derive(Debug, Clone)]
pub struct SampleFamily<'a> {
    pub base: Vec<f64>,
    pub dq: &'a DMatrix<f64>,
}

impl SampleFamily<'_> {
    /// Normalised log-weights of the tilt.
    pub fn log_weights(&self, shift: &DVector<f64>) -> Vec<f64> {
        let exponent: Vec<f64> = (0..self.dq.nrows())
            .map(|i| self.base[i] + self.dq.row(i).transpose().dot(shift))
            .collect();
        let lz = ln_sum_exp(&exponent);
        exponent.into_iter().map(|e| e - lz).collect()
    }
}

impl TiltFamily for SampleFamily<'_> {
    fn assets(&self) -> usize {
        self.dq.ncols()
    }

    fn max_divergence(&self) -> f64 {
        let lo = self.base.iter().copied().filter(|b| b.is_finite()).fold(f64::INFINITY, f64::min);
        ln_sum_exp(&self.base) - lo
    }

    fn moments(&self, shift: &DVector<f64>) -> Result<TiltMoments> {
        let n = self.dq.ncols();
        let exponent: Vec<f64> = (0..self.dq.nrows())
            .map(|i| self.base[i] + self.dq.row(i).transpose().dot(shift))
            .collect();
        let log_partition = ln_sum_exp(&exponent);
        if !log_partition.is_finite() {
            return Err(Error::NonNormalisableTilt(
                "log partition function is not finite".into(),
            ));
        }
        let w: Vec<f64> = exponent
            .iter()
            .map(|e| (e - log_partition).exp())
            .collect();
        let mean = DVector::from_fn(n, |j, _| {
            let terms: Vec<f64> = w.iter().enumerate().map(|(i, wi)| wi * self.dq[(i, j)]).collect();
            sum(&terms)
        });
        let mut cov = DMatrix::zeros(n, n);
        for j in 0..n {
            for k in j..n {
                let terms: Vec<f64> = w
                    .iter()
                    .enumerate()
                    .map(|(i, wi)| wi * (self.dq[(i, j)] - mean[j]) * (self.dq[(i, k)] - mean[k]))
                    .collect();
                let c = sum(&terms);
                cov[(j, k)] = c;
                cov[(k, j)] = c;
            }
        }
        Ok(TiltMoments {
            log_partition,
            mean,
            cov,
        })
    }
}

/// Orthonormal split of asset space into stochastic and deterministic parts.
#[derive(Debug, Clone)]
pub struct Structure {
    /// Columns span the directions with non-zero variance.
    pub stoch: DMatrix<f64>,
    /// Columns span the directions whose increment is a known constant.
    pub det: DMatrix<f64>,
    /// Increments of the deterministic directions.
    pub det_values: DVector<f64>,
    pub q_stoch: DVector<f64>,
    pub q_det: DVector<f64>,
}

impl Structure {
    pub fn new(moments: &TiltMoments, q: &DVector<f64>, floor: f64) -> Self {
        let n = q.len();
        let eig = SymmetricEigen::new(moments.cov.clone());
        let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        let cutoff = floor * top;
        let mut stoch = Vec::new();
        let mut det = Vec::new();
        for (i, lambda) in eig.eigenvalues.iter().enumerate() {
            let v = eig.eigenvectors.column(i).into_owned();
            if top > 0.0 && *lambda > cutoff {
                stoch.push(v);
            } else {
                det.push(v);
            }
        }
        let to_matrix = |cols: &[DVector<f64>]| {
            if cols.is_empty() {
                DMatrix::zeros(n, 0)
            } else {
                DMatrix::from_columns(cols)
            }
        };
        let stoch = to_matrix(&stoch);
        let det = to_matrix(&det);
        let det_values = det.transpose() * &moments.mean;
        let q_stoch = stoch.transpose() * q;
        let q_det = det.transpose() * q;
        Self {
            stoch,
            det,
            det_values,
            q_stoch,
            q_det,
        }
    }

    /// True when some deterministic direction has a non-zero price, which
    /// then fixes the funding rate.
    pub fn has_funding(&self) -> bool {
        let q_norm = (self.q_stoch.norm_squared() + self.q_det.norm_squared()).sqrt();
        self.q_det.norm() > 1e-12 * q_norm
    }

    pub fn stochastic_dim(&self) -> usize {
        self.stoch.ncols()
    }

    fn assemble(&self, a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        &self.stoch * a + &self.det * b
    }

    fn reduce(&self, cov: &DMatrix<f64>) -> DMatrix<f64> {
        self.stoch.transpose() * cov * &self.stoch
    }
}

/// Solves `V x - q t = v` with `x · q = f`, restricted to the split.
///
/// With a deterministic funding direction `t` is fixed by the deterministic
/// rows; otherwise `t` is the multiplier of the funding constraint.
pub fn funded_solve(
    st: &Structure,
    cov: &DMatrix<f64>,
    v: &DVector<f64>,
    f: f64,
) -> Result<(DVector<f64>, f64)> {
    let vs = st.reduce(cov);
    let v_s = st.stoch.transpose() * v;
    let v_n = st.det.transpose() * v;
    if st.has_funding() {
        let qn2 = st.q_det.norm_squared();
        let t = -st.q_det.dot(&v_n) / qn2;
        let a = solve_spd(&vs, &(&v_s + &st.q_stoch * t))?;
        let b = &st.q_det * ((f - a.dot(&st.q_stoch)) / qn2);
        Ok((st.assemble(&a, &b), t))
    } else {
        let m = vs.nrows();
        let mut j = DMatrix::zeros(m + 1, m + 1);
        j.view_mut((0, 0), (m, m)).copy_from(&vs);
        for i in 0..m {
            j[(i, m)] = -st.q_stoch[i];
            j[(m, i)] = st.q_stoch[i];
        }
        let mut rhs = DVector::zeros(m + 1);
        rhs.rows_mut(0, m).copy_from(&v_s);
        rhs[m] = f;
        let sol = solve_general(&j, &rhs)?;
        let a = sol.rows(0, m).into_owned();
        let b = DVector::zeros(st.det.ncols());
        Ok((st.assemble(&a, &b), sol[m]))
    }
}

pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if a.nrows() == 0 {
        return Ok(DVector::zeros(0));
    }
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.solve(b));
    }
    solve_general(a, b)
}

pub fn solve_general(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if a.nrows() == 0 {
        return Ok(DVector::zeros(0));
    }
    let lu = a.clone().lu();
    match lu.solve(b) {
        Some(x) if x.iter().all(|v| v.is_finite()) => Ok(x),
        _ => Err(Error::Singular("linear system has no unique solution".into())),
    }
}

/// Calibrated funding parameters of a tilt family.
#[derive(Debug, Clone)]
pub struct Calibrated {
    pub phi: DVector<f64>,
    /// `r dt`.
    pub rate_dt: f64,
    pub residual: DVector<f64>,
    pub iterations: usize,
    pub structure: Structure,
    pub moments: TiltMoments,
}

fn scale_of(q: &DVector<f64>, moments: &TiltMoments) -> f64 {
    let spread = moments.cov.diagonal().iter().cloned().fold(0.0, f64::max).sqrt();
    1f64.max(q.amax()).max(moments.mean.amax()).max(spread)
}

/// Finds `φ` with `E^φ[dq] = q r dt` and `φ · q = 0`, where `E^φ` tilts the
/// base by `exp(-φ · dq)`.
pub fn calibrate_family(
    family: &impl TiltFamily,
    q: &DVector<f64>,
    cfg: &SolverConfig,
) -> Result<Calibrated> {
    let n = family.assets();
    if q.len() != n {
        return Err(Error::DimensionMismatch {
            what: "asset prices",
            expected: n,
            got: q.len(),
        });
    }
    if q.iter().all(|v| *v == 0.0) {
        return Err(Error::InvalidInput("all asset prices are zero".into()));
    }
    let m0 = family.moments(&DVector::zeros(n))?;
    let st = Structure::new(&m0, q, cfg.variance_floor);
    let scale = scale_of(q, &m0);
    let tol = cfg.tol * scale;
    let funded = st.has_funding();
    let fixed_rate = if funded {
        let k = st.q_det.dot(&st.det_values) / st.q_det.norm_squared();
        let mismatch = (&st.det_values - &st.q_det * k).amax();
        if mismatch > 1e-9 * scale {
            return Err(Error::Infeasible(format!(
                "deterministic assets imply different funding rates (mismatch {mismatch:.3e})"
            )));
        }
        Some(k)
    } else {
        if st.det_values.amax() > 1e-9 * scale {
            return Err(Error::Infeasible(
                "a zero-cost deterministic portfolio has a non-zero payoff".into(),
            ));
        }
        None
    };

    let m = st.stochastic_dim();
    let initial_spread = spectrum(&st.reduce(&m0.cov)).into_iter().fold(0.0, f64::max);
    let eval = |a: &DVector<f64>| -> Result<(TiltMoments, f64, DVector<f64>)> {
        let shift = -(&st.stoch * a);
        let mo = family.moments(&shift)?;
        let rate = match fixed_rate {
            Some(k) => k,
            None => q.dot(&mo.mean) / q.norm_squared(),
        };
        let res = &mo.mean - q * rate;
        if res.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite calibration residual".into()));
        }
        Ok((mo, rate, res))
    };

    // Convex dual whose gradient is the stochastic residual.
    let objective = |a: &DVector<f64>, mo: &TiltMoments| match fixed_rate {
        Some(k) => mo.log_partition + k * a.dot(&st.q_stoch),
        None => mo.log_partition,
    };
    let mut a = DVector::zeros(m);
    let (mut mo, mut rate, mut res) = eval(&a)?;
    // A feasible optimum sits no lower than this; passing it proves there is none.
    let floor = objective(&a, &mo) - family.max_divergence();
    let mut iterations = 0;
    while res.norm() > tol {
        if iterations >= cfg.max_iter {
            return Err(calibration_failure(&st, &mo, initial_spread, iterations, res.norm()));
        }
        iterations += 1;
        let vs = st.reduce(&mo.cov);
        let mean_s = st.stoch.transpose() * &mo.mean;
        let step = match fixed_rate {
            Some(k) => solve_spd(&vs, &(&mean_s - &st.q_stoch * k)),
            None => solve_spd(&vs, &st.q_stoch).and_then(|vq| {
                let vm = solve_spd(&vs, &mean_s)?;
                let k = (&a + &vm).dot(&st.q_stoch) / vq.dot(&st.q_stoch);
                Ok(vm - vq * k)
            }),
        };
        let Ok(step) = step else {
            return Err(calibration_failure(&st, &mo, initial_spread, iterations, res.norm()));
        };
        let value = objective(&a, &mo);
        let slope = match fixed_rate {
            Some(k) => (&st.q_stoch * k - &mean_s).dot(&step),
            None => -mean_s.dot(&step),
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=cfg.damping {
            let trial = &a + &step * t;
            if let Ok((tm, tr, tres)) = eval(&trial) {
                let armijo = objective(&trial, &tm) <= value + 1e-4 * t * slope;
                if armijo || tres.norm() < res.norm() {
                    a = trial;
                    mo = tm;
                    rate = tr;
                    res = tres;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(calibration_failure(&st, &mo, initial_spread, iterations, res.norm()));
        }
        if objective(&a, &mo) < floor - 1e-9 * floor.abs().max(1.0) {
            return Err(Error::Infeasible(format!(
                "the dual objective is unbounded after {iterations} iterations: \
                 the prices admit an arbitrage"
            )));
        }
    }
    let b = if funded {
        &st.q_det * (-a.dot(&st.q_stoch) / st.q_det.norm_squared())
    } else {
        DVector::zeros(st.det.ncols())
    };
    let phi = st.assemble(&a, &b);
    Ok(Calibrated {
        phi,
        rate_dt: rate,
        residual: res,
        iterations,
        structure: st,
        moments: mo,
    })
}

fn spectrum(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    m.symmetric_eigenvalues().iter().copied().collect()
}

fn calibration_failure(
    st: &Structure,
    mo: &TiltMoments,
    initial_spread: f64,
    iterations: usize,
    residual: f64,
) -> Error {
    let lo = spectrum(&st.reduce(&mo.cov)).into_iter().fold(f64::INFINITY, f64::min);
    if lo < 1e-8 * initial_spread || !residual.is_finite() {
        Error::Infeasible(format!(
            "price measure degenerates after {iterations} iterations: \
             the prices lie outside the range of attainable expectations"
        ))
    } else {
        Error::NonConvergence {
            iterations,
            residual,
        }
    }
}

/// What the hedge must cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HedgeTarget {
    /// `δ · q` equals the entropy-adjusted value of the hedged position.
    Price,
    /// `δ · q` equals a fixed amount of capital.
    Funding(f64),
}

/// Solution of the hedge conditions.
#[derive(Debug, Clone)]
pub struct Hedged {
    pub delta: DVector<f64>,
    /// `(r + α s) dt`.
    pub kappa: f64,
    /// `E^φ[α][P - δ · dq]`.
    pub value: f64,
    pub iterations: usize,
    pub residual: f64,
}

/// Solves `E^{φδ}[dq] = q κ` for the hedge `δ`, where `E^{φδ}` is the
/// family at shift `α δ` (its base already carries `-φ · dq - α P`).
///
/// `log_z_cal` is the log partition function of the price measure itself, so
/// that `-(log Z(α δ) - log_z_cal) / α` is the entropy-adjusted value of the
/// hedged position.
#[allow(clippy::too_many_arguments)]
pub fn hedge_family(
    family: &impl TiltFamily,
    log_z_cal: f64,
    st: &Structure,
    q: &DVector<f64>,
    rate_dt: f64,
    alpha: f64,
    target: HedgeTarget,
    init: Option<&DVector<f64>>,
    cfg: &SolverConfig,
) -> Result<Hedged> {
    if alpha == 0.0 || !alpha.is_finite() {
        return Err(Error::InvalidInput(
            "hedge Newton needs a finite non-zero risk aversion".into(),
        ));
    }
    let m = st.stochastic_dim();
    let funded = st.has_funding();
    let m0 = family.moments(&DVector::zeros(q.len()))?;
    let tol = cfg.tol * scale_of(q, &m0);

    // Residual vector: stochastic hedge rows, then (without funding) the
    // cost row. The unknowns are `a` and (without funding) `κ`.
    struct State {
        a: DVector<f64>,
        kappa: f64,
        mo: TiltMoments,
        value_s: f64,
        res: DVector<f64>,
    }
    let eval = |a: DVector<f64>, kappa: f64| -> Result<State> {
        let shift = &st.stoch * &a * alpha;
        let mo = family.moments(&shift)?;
        let value_s = -(mo.log_partition - log_z_cal) / alpha;
        let mean_s = st.stoch.transpose() * &mo.mean;
        let hedge_rows = &mean_s - &st.q_stoch * kappa;
        let res = if funded {
            hedge_rows
        } else {
            let cost = match target {
                HedgeTarget::Price => a.dot(&st.q_stoch) - value_s,
                HedgeTarget::Funding(f) => a.dot(&st.q_stoch) - f,
            };
            let mut r = DVector::zeros(m + 1);
            r.rows_mut(0, m).copy_from(&hedge_rows);
            r[m] = cost;
            r
        };
        if res.iter().any(|v| !v.is_finite()) || !value_s.is_finite() {
            return Err(Error::Numerical("non-finite hedge residual".into()));
        }
        Ok(State {
            a,
            kappa,
            mo,
            value_s,
            res,
        })
    };

    let newton = |start: DVector<f64>| -> Result<(State, usize)> {
        let mut s = eval(start, rate_dt)?;
        let mut it = 0;
        while s.res.norm() > tol {
            if it >= cfg.max_iter {
                return Err(Error::NonConvergence {
                    iterations: it,
                    residual: s.res.norm(),
                });
            }
            it += 1;
            let vs = st.reduce(&s.mo.cov) * alpha;
            let (da, dk) = if funded {
                (solve_spd_signed(&vs, &(-&s.res))?, 0.0)
            } else {
                let mean_s = st.stoch.transpose() * &s.mo.mean;
                let mut j = DMatrix::zeros(m + 1, m + 1);
                j.view_mut((0, 0), (m, m)).copy_from(&vs);
                for i in 0..m {
                    j[(i, m)] = -st.q_stoch[i];
                    j[(m, i)] = match target {
                        HedgeTarget::Price => st.q_stoch[i] + mean_s[i],
                        HedgeTarget::Funding(_) => st.q_stoch[i],
                    };
                }
                let sol = solve_general(&j, &(-&s.res))?;
                (sol.rows(0, m).into_owned(), sol[m])
            };
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..=cfg.damping {
                if let Ok(trial) = eval(&s.a + &da * t, s.kappa + dk * t) {
                    if trial.res.norm() < s.res.norm() {
                        s = trial;
                        accepted = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            if !accepted {
                return Err(Error::NonConvergence {
                    iterations: it,
                    residual: s.res.norm(),
                });
            }
        }
        Ok((s, it))
    };

    let reduce_init = |d: &DVector<f64>| st.stoch.transpose() * d;
    let (s, iterations) = match newton(DVector::zeros(m)) {
        Ok(ok) => ok,
        Err(first) => match init {
            Some(d) => newton(reduce_init(d)).map_err(|_| first)?,
            None => return Err(first),
        },
    };

    let (b, kappa) = if funded {
        let b = match target {
            // b · (q_n + c_n) = value_s - a · q_s.
            HedgeTarget::Price => {
                let u = &st.q_det + &st.det_values;
                &u * ((s.value_s - s.a.dot(&st.q_stoch)) / u.norm_squared())
            }
            HedgeTarget::Funding(f) => {
                &st.q_det * ((f - s.a.dot(&st.q_stoch)) / st.q_det.norm_squared())
            }
        };
        (b, rate_dt)
    } else {
        (DVector::zeros(st.det.ncols()), s.kappa)
    };
    let value = s.value_s - b.dot(&st.det_values);
    let delta = st.assemble(&s.a, &b);
    Ok(Hedged {
        delta,
        kappa,
        value,
        iterations,
        residual: s.res.norm(),
    })
}

fn solve_spd_signed(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if a.nrows() > 0 && a[(0, 0)] < 0.0 {
        return solve_spd(&(-a), &(-b));
    }
    solve_spd(a, b)
}
