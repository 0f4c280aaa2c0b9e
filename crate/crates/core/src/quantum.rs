//! Markets whose prices are Hermitian operators.
//!
//! Expectations are normalised traces, `E[X] = tr X / n`, and tilted states
//! are `exp(H) / tr exp(H)`. When all operators commute the formulation
//! reduces to a sample-space market on their joint eigenvalues with uniform
//! weights. When they do not, derivatives of `tr exp(H)` involve the
//! kernel `(e^z - 1) / z` applied to `ad_H`, which [`adjoint_transform`]
//! evaluates in the eigenbasis.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::calibrate::SolverConfig;
use crate::engine::{calibrate_family, funded_solve, hedge_family, HedgeTarget, Structure, TiltFamily, TiltMoments};
use crate::error::{invalid, Error, Result};
use crate::measure::{entropy_adjusted_mean, Measure};
use crate::numeric::{bisect, ln_sum_exp, newton_polish};

/// Relative tolerance on `‖H - H†‖ / ‖H‖`.
pub const HERMITIAN_TOL: f64 = 1e-12;

type CMatrix = DMatrix<Complex64>;

/// A validated Hermitian matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct HermitianOperator {
    m: CMatrix,
}

impl HermitianOperator {
    pub fn new(m: CMatrix) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return invalid(format!("operator must be square, got {}×{}", m.nrows(), m.ncols()));
        }
        if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return invalid("operator entries must be finite");
        }
        let asym = hermitian_defect(&m);
        if asym > HERMITIAN_TOL {
            return invalid(format!(
                "operator is not Hermitian: relative asymmetry {asym:.3e}"
            ));
        }
        Ok(Self { m: symmetrise(&m) })
    }

    pub fn from_real(m: &DMatrix<f64>) -> Result<Self> {
        Self::new(m.map(|v| Complex64::new(v, 0.0)))
    }

    pub fn from_parts(re: &DMatrix<f64>, im: &DMatrix<f64>) -> Result<Self> {
        if re.shape() != im.shape() {
            return invalid("real and imaginary parts have different shapes");
        }
        Self::new(re.zip_map(im, Complex64::new))
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let n = values.len();
        Self {
            m: CMatrix::from_fn(n, n, |i, j| {
                if i == j {
                    Complex64::new(values[i], 0.0)
                } else {
                    Complex64::new(0.0, 0.0)
                }
            }),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![1.0; n])
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.m
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.m.diagonal().iter().map(|z| z.re).sum()
    }

    /// `a · self + b · other`.
    pub fn combine(&self, a: f64, other: &HermitianOperator, b: f64) -> HermitianOperator {
        HermitianOperator {
            m: &self.m * Complex64::new(a, 0.0) + &other.m * Complex64::new(b, 0.0),
        }
    }

    pub fn scale(&self, a: f64) -> HermitianOperator {
        HermitianOperator {
            m: &self.m * Complex64::new(a, 0.0),
        }
    }

    /// Eigenvalues in increasing order with matching unit eigenvectors.
    pub fn eigen(&self) -> (Vec<f64>, CMatrix) {
        eigh(&self.m)
    }
}

fn hermitian_defect(m: &CMatrix) -> f64 {
    let norm = m.norm();
    if norm == 0.0 {
        return 0.0;
    }
    (m - m.adjoint()).norm() / norm
}

fn symmetrise(m: &CMatrix) -> CMatrix {
    (m + m.adjoint()) * Complex64::new(0.5, 0.0)
}

fn eigh(m: &CMatrix) -> (Vec<f64>, CMatrix) {
    let eig = m.clone().symmetric_eigen();
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| eig.eigenvalues[*a].total_cmp(&eig.eigenvalues[*b]));
    let values = order.iter().map(|i| eig.eigenvalues[*i]).collect();
    let vectors = CMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// `f(H) = U f(Λ) U†`.
pub fn matrix_function(h: &HermitianOperator, f: impl Fn(f64) -> f64) -> HermitianOperator {
    let (vals, u) = h.eigen();
    let d = CMatrix::from_diagonal(&DVector::from_iterator(
        vals.len(),
        vals.iter().map(|v| Complex64::new(f(*v), 0.0)),
    ));
    HermitianOperator {
        m: symmetrise(&(&u * d * u.adjoint())),
    }
}

/// Normalised trace `tr X / n`.
pub fn trace_mean(x: &HermitianOperator) -> f64 {
    x.trace() / x.dim() as f64
}

/// `-(1/α) log(tr exp(-α X) / n)`.
pub fn trace_eam(x: &HermitianOperator, alpha: f64) -> Result<f64> {
    let (vals, _) = x.eigen();
    entropy_adjusted_mean(&Measure::uniform(vals.len()), &vals, alpha)
}

/// Terminal payoff applied to the eigenvalues of `Q - k B`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpreadPayoff {
    Call,
    Put,
    Digital,
}

impl SpreadPayoff {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            SpreadPayoff::Call => x.max(0.0),
            SpreadPayoff::Put => (-x).max(0.0),
            SpreadPayoff::Digital => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// `f(Q - k B)`.
pub fn spread_payoff(
    q: &HermitianOperator,
    b: &HermitianOperator,
    strike: f64,
    f: SpreadPayoff,
) -> Result<HermitianOperator> {
    if q.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            what: "operator dimension",
            expected: q.dim(),
            got: b.dim(),
        });
    }
    Ok(matrix_function(&q.combine(1.0, b, -strike), |x| f.apply(x)))
}

/// `((e^{ad_X} - 1) / ad_X)[Y]`: in the eigenbasis of `X` entry `(i, j)` of
/// `Y` is multiplied by `g(λ_i - λ_j)` with `g(z) = (e^z - 1) / z`.
pub fn adjoint_transform(x: &HermitianOperator, y: &CMatrix) -> CMatrix {
    let (vals, u) = x.eigen();
    let mut t = u.adjoint() * y * &u;
    for i in 0..vals.len() {
        for j in 0..vals.len() {
            t[(i, j)] *= exp_kernel(vals[i] - vals[j]);
        }
    }
    &u * t * u.adjoint()
}

/// `(e^z - 1) / z` with its limit 1 at zero.
fn exp_kernel(z: f64) -> f64 {
    if z == 0.0 {
        1.0
    } else {
        z.exp_m1() / z
    }
}

/// Traded operators with current prices `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantumMarket {
    q: DVector<f64>,
    finals: Vec<HermitianOperator>,
    dt: f64,
}

impl QuantumMarket {
    pub fn new(q: Vec<f64>, finals: Vec<HermitianOperator>, dt: f64) -> Result<Self> {
        if q.is_empty() || q.len() != finals.len() {
            return Err(Error::DimensionMismatch {
                what: "operators per asset price",
                expected: q.len(),
                got: finals.len(),
            });
        }
        let n = finals[0].dim();
        if finals.iter().any(|f| f.dim() != n) {
            return invalid("all operators must have the same dimension");
        }
        if q.iter().any(|v| !v.is_finite()) || q.iter().all(|v| *v == 0.0) {
            return invalid("asset prices must be finite and not all zero");
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

    pub fn q(&self) -> &DVector<f64> {
        &self.q
    }

    pub fn finals(&self) -> &[HermitianOperator] {
        &self.finals
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn dim(&self) -> usize {
        self.finals[0].dim()
    }

    /// `Q_j - q_j I`.
    pub fn dq(&self) -> Vec<CMatrix> {
        let n = self.dim();
        self.finals
            .iter()
            .zip(self.q.iter())
            .map(|(f, qj)| f.matrix() - CMatrix::identity(n, n) * Complex64::new(*qj, 0.0))
            .collect()
    }

    fn check_payoff(&self, p: &HermitianOperator) -> Result<()> {
        if p.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "payoff operator dimension",
                expected: self.dim(),
                got: p.dim(),
            });
        }
        Ok(())
    }
}

/// Tilted trace states `exp(base + shift · dq)`.
struct OperatorFamily<'a> {
    base: CMatrix,
    dq: &'a [CMatrix],
}

impl OperatorFamily<'_> {
    fn exponent(&self, shift: &DVector<f64>) -> CMatrix {
        let mut h = self.base.clone();
        for (d, s) in self.dq.iter().zip(shift.iter()) {
            h += d * Complex64::new(*s, 0.0);
        }
        symmetrise(&h)
    }
}

impl TiltFamily for OperatorFamily<'_> {
    fn assets(&self) -> usize {
        self.dq.len()
    }

    fn max_divergence(&self) -> f64 {
        let (vals, _) = eigh(&symmetrise(&self.base));
        ln_sum_exp(&vals) - vals[0]
    }

    fn moments(&self, shift: &DVector<f64>) -> Result<TiltMoments> {
        let (vals, u) = eigh(&self.exponent(shift));
        let log_partition = ln_sum_exp(&vals);
        if !log_partition.is_finite() {
            return Err(Error::NonNormalisableTilt("trace of the tilted state is not finite".into()));
        }
        let w: Vec<f64> = vals.iter().map(|v| (v - log_partition).exp()).collect();
        let n = vals.len();
        let a = self.dq.len();
        let rotated: Vec<CMatrix> = self.dq.iter().map(|d| u.adjoint() * d * &u).collect();
        let mean = DVector::from_fn(a, |j, _| (0..n).map(|i| w[i] * rotated[j][(i, i)].re).sum());
        // Derivative of the tilted mean: ∫₀¹ tr(ρ^s G_j ρ^{1-s} G_k) ds in
        // the eigenbasis, with divided differences of the weights.
        let kernel = CMatrix::from_fn(n, n, |i, l| {
            let (hi, lo) = if vals[i] >= vals[l] { (i, l) } else { (l, i) };
            Complex64::new(w[lo] * exp_kernel(vals[hi] - vals[lo]), 0.0)
        });
        let mut cov = DMatrix::zeros(a, a);
        for j in 0..a {
            for k in j..a {
                let mut c = 0.0;
                for i in 0..n {
                    for l in 0..n {
                        c += (rotated[j][(i, l)] * rotated[k][(l, i)] * kernel[(i, l)]).re;
                    }
                }
                c -= mean[j] * mean[k];
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

/// Calibrated operator market.
#[derive(Debug, Clone)]
pub struct QuantumCalibration {
    pub phi: DVector<f64>,
    pub r: f64,
    pub iterations: usize,
    structure: Structure,
    log_partition: f64,
}

pub fn calibrate_quantum(market: &QuantumMarket, cfg: &SolverConfig) -> Result<QuantumCalibration> {
    let dq = market.dq();
    let n = market.dim();
    let family = OperatorFamily {
        base: CMatrix::zeros(n, n),
        dq: &dq,
    };
    let cal = calibrate_family(&family, market.q(), cfg)?;
    let log_partition = family.moments(&(-&cal.phi))?.log_partition;
    Ok(QuantumCalibration {
        phi: cal.phi,
        r: cal.rate_dt / market.dt(),
        iterations: cal.iterations,
        structure: cal.structure,
        log_partition,
    })
}

/// Price measure state `exp(-φ · dq) / tr exp(-φ · dq)`.
fn price_state(market: &QuantumMarket, dq: &[CMatrix], phi: &DVector<f64>) -> CMatrix {
    let n = market.dim();
    let mut x = CMatrix::zeros(n, n);
    for (d, p) in dq.iter().zip(phi.iter()) {
        x -= d * Complex64::new(*p, 0.0);
    }
    let x = HermitianOperator { m: symmetrise(&x) };
    let rho = matrix_function(&x, f64::exp).m;
    let tr: f64 = rho.diagonal().iter().map(|z| z.re).sum();
    rho / Complex64::new(tr, 0.0)
}

fn expect(rho: &CMatrix, y: &CMatrix) -> f64 {
    (y * rho).trace().re
}

/// Risk-neutral price and hedge of an operator payoff.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct QuantumMid {
    pub phi: Vec<f64>,
    pub r: f64,
    pub p0: f64,
    pub delta: Vec<f64>,
    pub s: f64,
}

/// Mid price `E^φ[P] / (1 + r dt)` and the mid hedge, with the covariances
/// taken against the transformed increments `((e^{ad} - 1)/ad)[dq]`, where
/// `ad` is the commutator with `φ · dq`.
pub fn quantum_mid(market: &QuantumMarket, payoff: &HermitianOperator, cfg: &SolverConfig) -> Result<QuantumMid> {
    market.check_payoff(payoff)?;
    let cal = calibrate_quantum(market, cfg)?;
    mid_from(market, &cal, payoff)
}

fn mid_from(market: &QuantumMarket, cal: &QuantumCalibration, payoff: &HermitianOperator) -> Result<QuantumMid> {
    let dq = market.dq();
    let a = dq.len();
    let n = market.dim();
    let mut x = CMatrix::zeros(n, n);
    for (d, p) in dq.iter().zip(cal.phi.iter()) {
        x += d * Complex64::new(*p, 0.0);
    }
    let x = HermitianOperator { m: symmetrise(&x) };
    let hat: Vec<CMatrix> = dq.iter().map(|d| adjoint_transform(&x, d)).collect();
    let rho = price_state(market, &dq, &cal.phi);
    let mean: Vec<f64> = dq.iter().map(|d| expect(&rho, d)).collect();
    let mean_p = expect(&rho, payoff.matrix());
    let cov = DMatrix::from_fn(a, a, |j, k| expect(&rho, &(&hat[j] * &dq[k])) - mean[j] * mean[k]);
    let cov = (&cov + cov.transpose()) * 0.5;
    let cross = DVector::from_fn(a, |j, _| expect(&rho, &(&hat[j] * payoff.matrix())) - mean[j] * mean_p);
    let rate_dt = cal.r * market.dt();
    let p0 = mean_p / (1.0 + rate_dt);
    let (delta, s_dt) = funded_solve(&cal.structure, &cov, &cross, p0)?;
    Ok(QuantumMid {
        phi: cal.phi.iter().copied().collect(),
        r: cal.r,
        p0,
        delta: delta.iter().copied().collect(),
        s: s_dt / market.dt(),
    })
}

/// Calibration, hedge and price of an operator payoff.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct QuantumSolution {
    pub phi: Vec<f64>,
    pub r: f64,
    pub delta: Vec<f64>,
    pub s: f64,
    pub p: f64,
    pub iterations: usize,
}

/// Solves the trace forms of the calibration, hedge and price conditions.
pub fn solve_quantum(
    market: &QuantumMarket,
    payoff: &HermitianOperator,
    alpha: f64,
    cfg: &SolverConfig,
) -> Result<QuantumSolution> {
    market.check_payoff(payoff)?;
    if !alpha.is_finite() {
        return invalid("risk aversion must be finite");
    }
    let cal = calibrate_quantum(market, cfg)?;
    let mid = mid_from(market, &cal, payoff)?;
    if alpha == 0.0 {
        return Ok(QuantumSolution {
            phi: mid.phi,
            r: mid.r,
            delta: mid.delta,
            s: mid.s,
            p: mid.p0,
            iterations: cal.iterations,
        });
    }
    let dq = market.dq();
    let n = market.dim();
    let mut base = -payoff.matrix() * Complex64::new(alpha, 0.0);
    for (d, p) in dq.iter().zip(cal.phi.iter()) {
        base -= d * Complex64::new(*p, 0.0);
    }
    let family = OperatorFamily { base, dq: &dq };
    debug_assert_eq!(family.base.nrows(), n);
    let rate_dt = cal.r * market.dt();
    let init = DVector::from_vec(mid.delta.clone());
    let h = hedge_family(
        &family,
        cal.log_partition,
        &cal.structure,
        market.q(),
        rate_dt,
        alpha,
        HedgeTarget::Price,
        Some(&init),
        cfg,
    )?;
    Ok(QuantumSolution {
        phi: cal.phi.iter().copied().collect(),
        r: cal.r,
        delta: h.delta.iter().copied().collect(),
        s: (h.kappa - rate_dt) / (alpha * market.dt()),
        p: h.value,
        iterations: cal.iterations + h.iterations,
    })
}

/// Two-state market: `B = I + ε σ_z` and `Q = R(θ) σ_z R(θ)ᵀ`, with current
/// prices `b = 1` and `q = 0`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TwoStateSpec {
    pub theta: f64,
    pub eps_gap: f64,
    pub strike: f64,
    pub payoff: SpreadPayoff,
}

pub fn two_state_operators(theta: f64, eps_gap: f64) -> (HermitianOperator, HermitianOperator) {
    let b = HermitianOperator::diagonal(&[1.0 + eps_gap, 1.0 - eps_gap]);
    let (c, s) = ((2.0 * theta).cos(), (2.0 * theta).sin());
    let q = HermitianOperator::from_real(&DMatrix::from_row_slice(2, 2, &[c, s, s, -c]))
        .expect("reflection is symmetric");
    (b, q)
}

pub fn two_state_market(theta: f64, eps_gap: f64) -> QuantumMarket {
    let (b, q) = two_state_operators(theta, eps_gap);
    QuantumMarket::new(vec![1.0, 0.0], vec![b, q], 1.0).expect("two-state market is valid")
}

/// Closed-form solution of the two-state market.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct TwoStateSolution {
    pub p: f64,
    /// Holdings of `B` and `Q`.
    pub delta_b: f64,
    pub delta_q: f64,
    /// Rotation angle of the payoff eigenbasis.
    pub psi: f64,
    pub p_plus: f64,
    pub p_minus: f64,
}

/// `p = P̄ - (1/α) log cosh(α (P̂ sin 2(ψ-θ) + ε p sin 2θ))` solved for `p`,
/// with the hedge `δ_Q = P̂ cos 2(ψ-θ) - ε p cos 2θ` and `δ_B = p`.
pub fn two_state_model(spec: &TwoStateSpec, alpha: f64) -> Result<TwoStateSolution> {
    let TwoStateSpec { theta, eps_gap: eps, strike: k, payoff } = *spec;
    if ![theta, eps, k, alpha].iter().all(|v| v.is_finite()) {
        return invalid("two-state parameters must be finite");
    }
    if eps.abs() > 1.0 {
        return invalid("the gap ε must lie in [-1, 1] so that B is positive semi-definite");
    }
    let (s2t, c2t) = ((2.0 * theta).sin(), (2.0 * theta).cos());
    let two_psi = s2t.atan2(c2t - eps * k);
    let psi = 0.5 * two_psi;
    let radius = (c2t - eps * k).hypot(s2t);
    let p_plus = payoff.apply(radius - k);
    let p_minus = payoff.apply(-radius - k);
    let p_bar = 0.5 * (p_plus + p_minus);
    let p_hat = 0.5 * (p_plus - p_minus);
    let a = p_hat * (two_psi - 2.0 * theta).sin();
    let slope = eps * s2t;
    let p = if alpha == 0.0 {
        p_bar
    } else {
        let log_cosh = |x: f64| x.abs() + (-2.0 * x.abs()).exp().ln_1p() - std::f64::consts::LN_2;
        let f = |p: f64| p - p_bar + log_cosh(alpha * (a + slope * p)) / alpha;
        let df = |p: f64| 1.0 + slope * (alpha * (a + slope * p)).tanh();
        let hi = p_bar;
        let mut width = 1.0 + p_hat.abs();
        let mut lo = p_bar - width;
        let mut tries = 0;
        while f(lo) > 0.0 {
            width *= 2.0;
            lo = p_bar - width;
            tries += 1;
            if tries > 200 {
                return Err(Error::NoBracket("two-state price equation has no root".into()));
            }
        }
        let root = bisect(f, lo, hi, 1e-15 * (1.0 + p_bar.abs()))?;
        newton_polish(|p| (f(p), df(p)), root, lo - 1.0, hi + 1.0, 4)
    };
    let delta_q = p_hat * (two_psi - 2.0 * theta).cos() - eps * p * c2t;
    Ok(TwoStateSolution {
        p,
        delta_b: p,
        delta_q,
        psi,
        p_plus,
        p_minus,
    })
}

/// Where an eigenvalue branch of `Q - k B` changes sign.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub enum Crossing {
    /// Crosses zero inside the strike grid.
    At(f64),
    /// Still positive at the top of the grid.
    Above,
    /// Already negative at the bottom of the grid.
    Below,
}

/// Point mass of the implied distribution.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Atom {
    pub x: f64,
    pub weight: f64,
}

/// Branch values and derivatives on the strike grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub values: Vec<f64>,
    pub slope: Vec<f64>,
    pub curvature: Vec<f64>,
    pub crossing: Crossing,
    /// Slope at the crossing.
    crossing_slope: f64,
}

/// Distribution on strikes whose call prices match `tr (Q - k B)⁺ / n`.
#[derive(Debug, Clone)]
pub struct ImpliedDistribution {
    pub strikes: Vec<f64>,
    pub branches: Vec<Branch>,
    /// `(1/n) Σ ζ_i''(x) 1{x < x_i}` on the strike grid.
    pub density: Vec<f64>,
    q: HermitianOperator,
    b: HermitianOperator,
    vectors: Vec<CMatrix>,
    stencil: f64,
}

/// Central-difference step for branch derivatives.
pub const BRANCH_STENCIL: f64 = 1e-4;

/// Eigen-decomposes `Q - k B` and orders the pairs to follow `reference`.
fn matched_eigen(q: &HermitianOperator, b: &HermitianOperator, k: f64, reference: &CMatrix) -> Result<(Vec<f64>, CMatrix, f64)> {
    let (vals, vecs) = q.combine(1.0, b, -k).eigen();
    let n = vals.len();
    let overlap = DMatrix::from_fn(n, n, |i, j| {
        (reference.column(i).adjoint() * vecs.column(j))[(0, 0)].norm_sqr()
    });
    let mut assigned = vec![usize::MAX; n];
    let mut used = vec![false; n];
    let mut worst: f64 = 1.0;
    for _ in 0..n {
        let mut best = (0, 0, -1.0);
        for i in 0..n {
            if assigned[i] != usize::MAX {
                continue;
            }
            for j in 0..n {
                if !used[j] && overlap[(i, j)] > best.2 {
                    best = (i, j, overlap[(i, j)]);
                }
            }
        }
        assigned[best.0] = best.1;
        used[best.1] = true;
        // Degenerate eigenvalues admit any basis; only count genuine mixing.
        let degenerate = (0..n).any(|j| j != best.1 && (vals[j] - vals[best.1]).abs() < 1e-9);
        if !degenerate {
            worst = worst.min(best.2);
        }
    }
    let ordered_vals = assigned.iter().map(|j| vals[*j]).collect();
    let ordered_vecs = CMatrix::from_fn(n, n, |r, c| vecs[(r, assigned[c])]);
    Ok((ordered_vals, ordered_vecs, worst))
}

impl ImpliedDistribution {
    /// Tracks the eigenvalue branches of `Q - k B` over a uniform strike
    /// grid by eigenvector overlap, locates their zero crossings by
    /// bisection and differentiates them by central differences.
    pub fn new(q: &HermitianOperator, b: &HermitianOperator, strikes: &[f64]) -> Result<Self> {
        if q.dim() != b.dim() {
            return Err(Error::DimensionMismatch {
                what: "operator dimension",
                expected: q.dim(),
                got: b.dim(),
            });
        }
        if strikes.len() < 3 {
            return invalid("strike grid needs at least 3 points");
        }
        let h = strikes[1] - strikes[0];
        if !(h > 0.0) || strikes.windows(2).any(|w| ((w[1] - w[0]) - h).abs() > 1e-9 * h.max(1.0)) {
            return invalid("strike grid must be uniform and increasing");
        }
        let (bvals, _) = b.eigen();
        let bscale = bvals.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
        if bvals[0] < -1e-12 * bscale {
            return invalid("B must be positive semi-definite");
        }
        let n = q.dim();
        let (first_vals, first_vecs) = q.combine(1.0, b, -strikes[0]).eigen();
        let mut vectors = vec![first_vecs];
        let mut values = vec![first_vals];
        for w in strikes.windows(2) {
            let (vals, vecs) = track(q, b, w[0], w[1], vectors.last().unwrap(), 0)?;
            values.push(vals);
            vectors.push(vecs);
        }
        let mut dist = Self {
            strikes: strikes.to_vec(),
            branches: Vec::with_capacity(n),
            density: vec![0.0; strikes.len()],
            q: q.clone(),
            b: b.clone(),
            vectors,
            stencil: BRANCH_STENCIL,
        };
        for i in 0..n {
            let vals: Vec<f64> = values.iter().map(|v| v[i]).collect();
            let mut slope = Vec::with_capacity(strikes.len());
            let mut curvature = Vec::with_capacity(strikes.len());
            for (j, k) in strikes.iter().enumerate() {
                let (_, d1, d2) = dist.branch_at(i, j, *k)?;
                slope.push(d1);
                curvature.push(d2);
            }
            let tol = 1e-9 * (1.0 + bscale);
            if slope.iter().any(|s| *s > tol) {
                return Err(Error::Numerical(format!(
                    "eigenvalue branch {i} is not decreasing in the strike"
                )));
            }
            let (crossing, crossing_slope) = dist.locate_crossing(i, &vals)?;
            dist.branches.push(Branch {
                values: vals,
                slope,
                curvature,
                crossing,
                crossing_slope,
            });
        }
        for (j, k) in strikes.iter().enumerate() {
            dist.density[j] = dist
                .branches
                .iter()
                .filter(|br| below_crossing(br.crossing, *k))
                .map(|br| br.curvature[j])
                .sum::<f64>()
                / n as f64;
        }
        Ok(dist)
    }

    fn nearest_node(&self, k: f64) -> usize {
        let h = self.strikes[1] - self.strikes[0];
        (((k - self.strikes[0]) / h).round().max(0.0) as usize).min(self.strikes.len() - 1)
    }

    /// Value, slope and curvature of branch `i` at `k`, matched against the
    /// eigenvectors stored at grid node `node`.
    fn branch_at(&self, i: usize, node: usize, k: f64) -> Result<(f64, f64, f64)> {
        let reference = &self.vectors[node];
        let h = self.stencil;
        let (v0, _, _) = matched_eigen(&self.q, &self.b, k, reference)?;
        let (vp, _, _) = matched_eigen(&self.q, &self.b, k + h, reference)?;
        let (vm, _, _) = matched_eigen(&self.q, &self.b, k - h, reference)?;
        Ok((
            v0[i],
            (vp[i] - vm[i]) / (2.0 * h),
            (vp[i] - 2.0 * v0[i] + vm[i]) / (h * h),
        ))
    }

    fn value_at(&self, i: usize, k: f64) -> Result<f64> {
        let node = self.nearest_node(k);
        let (v, _, _) = matched_eigen(&self.q, &self.b, k, &self.vectors[node])?;
        Ok(v[i])
    }

    fn locate_crossing(&self, i: usize, vals: &[f64]) -> Result<(Crossing, f64)> {
        let last = vals.len() - 1;
        if vals[0] <= 0.0 {
            return Ok((Crossing::Below, 0.0));
        }
        if vals[last] > 0.0 {
            return Ok((Crossing::Above, 0.0));
        }
        let j = vals.iter().position(|v| *v <= 0.0).expect("sign change exists") - 1;
        if vals[j + 1..].iter().any(|v| *v > 0.0) {
            return Err(Error::Numerical(format!("branch {i} crosses zero more than once")));
        }
        let x = bisect(
            |k| self.value_at(i, k).unwrap_or(f64::NAN),
            self.strikes[j],
            self.strikes[j + 1],
            1e-14 * (1.0 + self.strikes[j].abs()),
        )?;
        let (_, slope, _) = self.branch_at(i, self.nearest_node(x), x)?;
        Ok((Crossing::At(x), slope))
    }

    /// Point masses at the zero crossings inside the grid, weighted by
    /// `-ζ'(x) / n`.
    pub fn atoms(&self) -> Vec<Atom> {
        let n = self.branches.len() as f64;
        self.branches
            .iter()
            .filter_map(|br| match br.crossing {
                Crossing::At(x) => Some(Atom {
                    x,
                    weight: -br.crossing_slope / n,
                }),
                _ => None,
            })
            .collect()
    }

    /// Call price `Σ (x_i - k)⁺ w_i + ∫ (x - k)⁺ w(x) dx` from the implied
    /// distribution: atoms, Simpson quadrature of the density per branch,
    /// and the mass beyond the top of the grid.
    pub fn call_price(&self, k: f64) -> Result<f64> {
        let lo = self.strikes[0];
        let hi = *self.strikes.last().unwrap();
        if !(k >= lo && k <= hi) {
            return invalid(format!("strike {k} outside the grid [{lo}, {hi}]"));
        }
        let n = self.branches.len() as f64;
        let mut total = 0.0;
        for (i, br) in self.branches.iter().enumerate() {
            let upper = match br.crossing {
                Crossing::Below => continue,
                Crossing::Above => hi,
                Crossing::At(x) => x,
            };
            if upper <= k {
                continue;
            }
            total += self.integrate_branch(i, k, upper)?;
            match br.crossing {
                Crossing::At(x) => total += (x - k) * (-br.crossing_slope),
                Crossing::Above => {
                    let last = self.strikes.len() - 1;
                    total += br.values[last] - (hi - k) * br.slope[last];
                }
                Crossing::Below => {}
            }
        }
        Ok(total / n)
    }

    /// `∫_a^b (x - a) ζ_i''(x) dx` by composite Simpson on the grid nodes
    /// inside `(a, b)` and three-point Simpson on the partial end cells.
    fn integrate_branch(&self, i: usize, a: f64, b: f64) -> Result<f64> {
        let br = &self.branches[i];
        let f_node = |j: usize| (self.strikes[j] - a) * br.curvature[j];
        let f_any = |x: f64| -> Result<f64> {
            let (_, _, d2) = self.branch_at(i, self.nearest_node(x), x)?;
            Ok((x - a) * d2)
        };
        let eps = 1e-12 * (1.0 + a.abs().max(b.abs()));
        let inside: Vec<usize> = (0..self.strikes.len())
            .filter(|j| self.strikes[*j] >= a - eps && self.strikes[*j] <= b + eps)
            .collect();
        if inside.len() < 2 {
            let m = 0.5 * (a + b);
            return Ok((b - a) / 6.0 * (f_any(a)? + 4.0 * f_any(m)? + f_any(b)?));
        }
        let (first, last) = (inside[0], *inside.last().unwrap());
        let mut total = 0.0;
        let partial = |x0: f64, x1: f64| -> Result<f64> {
            if x1 - x0 <= eps {
                return Ok(0.0);
            }
            let m = 0.5 * (x0 + x1);
            Ok((x1 - x0) / 6.0 * (f_any(x0)? + 4.0 * f_any(m)? + f_any(x1)?))
        };
        total += partial(a, self.strikes[first])?;
        total += partial(self.strikes[last], b)?;
        let h = self.strikes[1] - self.strikes[0];
        let intervals = last - first;
        let simpson_end = if intervals % 2 == 1 && intervals >= 3 { last - 3 } else { last };
        let mut j = first;
        while j + 2 <= simpson_end {
            total += h / 3.0 * (f_node(j) + 4.0 * f_node(j + 1) + f_node(j + 2));
            j += 2;
        }
        if simpson_end != last {
            let j = last - 3;
            total += 3.0 * h / 8.0 * (f_node(j) + 3.0 * f_node(j + 1) + 3.0 * f_node(j + 2) + f_node(j + 3));
        } else if j + 1 == last {
            total += 0.5 * h * (f_node(j) + f_node(last));
        }
        Ok(total)
    }
}

fn below_crossing(c: Crossing, k: f64) -> bool {
    match c {
        Crossing::At(x) => k < x,
        Crossing::Above => true,
        Crossing::Below => false,
    }
}

/// Follows the eigenpairs from `k0` to `k1`, halving the step when the
/// eigenvector overlap does not identify the branches unambiguously.
fn track(
    q: &HermitianOperator,
    b: &HermitianOperator,
    k0: f64,
    k1: f64,
    reference: &CMatrix,
    depth: usize,
) -> Result<(Vec<f64>, CMatrix)> {
    let (vals, vecs, worst) = matched_eigen(q, b, k1, reference)?;
    if worst >= 0.5 {
        return Ok((vals, vecs));
    }
    if depth >= 30 {
        return Err(Error::Numerical(format!(
            "eigenvalue branches cannot be tracked near strike {k1}"
        )));
    }
    let mid = 0.5 * (k0 + k1);
    let (_, mid_vecs) = track(q, b, k0, mid, reference, depth + 1)?;
    track(q, b, mid, k1, &mid_vecs, depth + 1)
}

/// Implied distribution of `(Q, B)` on a uniform strike grid.
pub fn implied_distribution(
    q: &HermitianOperator,
    b: &HermitianOperator,
    strikes: &[f64],
) -> Result<ImpliedDistribution> {
    ImpliedDistribution::new(q, b, strikes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{E, FRAC_PI_4};

    #[test]
    fn positive_part_of_pauli_x() {
        let x = HermitianOperator::from_real(&DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        let p = matrix_function(&x, |v| v.max(0.0));
        for z in p.matrix().iter() {
            assert!((z.re - 0.5).abs() < 1e-15 && z.im.abs() < 1e-15);
        }
    }

    #[test]
    fn non_hermitian_is_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0 + 1e-6, 1.0, 0.0]);
        let err = HermitianOperator::from_real(&m).unwrap_err();
        assert!(err.to_string().contains("asymmetry"));
    }

    #[test]
    fn adjoint_kernel_on_two_levels() {
        let x = HermitianOperator::diagonal(&[1.0, 0.0]);
        let y = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]).map(|v| Complex64::new(v, 0.0));
        let t = adjoint_transform(&x, &y);
        assert!((t[(0, 1)].re - (E - 1.0)).abs() < 1e-14);
        assert!((t[(1, 0)].re - (1.0 - 1.0 / E)).abs() < 1e-14);
        assert!(t[(0, 0)].norm() < 1e-15 && t[(1, 1)].norm() < 1e-15);
    }

    #[test]
    fn two_state_reference_price() {
        let spec = TwoStateSpec { theta: FRAC_PI_4, eps_gap: 1.0, strike: 0.0, payoff: SpreadPayoff::Call };
        let sol = two_state_model(&spec, 1.0).unwrap();
        assert!((sol.p - 0.5 + sol.p.cosh().ln()).abs() < 1e-14);
        assert!((sol.p - 0.4158982828755932).abs() < 1e-12);
    }

    #[test]
    fn two_state_solver_agrees_with_closed_form() {
        let market = two_state_market(FRAC_PI_4, 1.0);
        let (b, q) = two_state_operators(FRAC_PI_4, 1.0);
        let payoff = spread_payoff(&q, &b, 0.0, SpreadPayoff::Call).unwrap();
        let sol = solve_quantum(&market, &payoff, 1.0, &SolverConfig::default()).unwrap();
        let spec = TwoStateSpec { theta: FRAC_PI_4, eps_gap: 1.0, strike: 0.0, payoff: SpreadPayoff::Call };
        let cf = two_state_model(&spec, 1.0).unwrap();
        assert!((sol.p - cf.p).abs() < 1e-10, "{} vs {}", sol.p, cf.p);
        assert!((sol.delta[1] - cf.delta_q).abs() < 1e-10);
    }
}
