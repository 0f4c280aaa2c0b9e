use entropic::calibrate::{calibrate, CalibrationResult, SampleMarket, SolverConfig};
use entropic::hedge::{hedge_normal, order_book, price_curve, solve_hedge, Payoff};
use entropic::measure::{entropy_adjusted_mean, exponential_tilt, Measure};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;

fn cfg() -> SolverConfig {
    SolverConfig::default()
}

fn market(q: Vec<f64>, rows: &[Vec<f64>], m: &Measure) -> (SampleMarket, CalibrationResult) {
    let market = SampleMarket::from_rows(q, rows, 1.0).unwrap();
    let cal = calibrate(&market, m, &cfg()).unwrap();
    (market, cal)
}

fn three_state() -> (SampleMarket, CalibrationResult) {
    market(vec![1.0, 1.0], &[vec![1.0, 0.0], vec![1.0, 1.0], vec![1.0, 2.0]], &Measure::uniform(3))
}

/// Maximiser of a unimodal function on `[lo, hi]`.
fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    while hi - lo > 1e-13 {
        let a = hi - g * (hi - lo);
        let b = lo + g * (hi - lo);
        if f(a) > f(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn complete_binomial_collapses_to_replication() {
    let (mk, cal) = market(vec![1.0, 1.0], &[vec![1.0, 0.0], vec![1.0, 2.0]], &Measure::new(vec![0.3, 0.7]).unwrap());
    let call = Payoff::call(&mk, 1, 1.0).unwrap();
    let replica = mk.finals().clone().lu().solve(&DVector::from_vec(call.values.clone())).unwrap();
    let oracle = replica.dot(mk.q());
    assert!((oracle - 0.5).abs() < 1e-15);
    for alpha in [0.0, 0.5, 1.0, 2.0] {
        let bid = solve_hedge(&mk, &cal, &call, alpha, &cfg()).unwrap();
        let offer = solve_hedge(&mk, &cal, &call.clone().with_notional(-1.0), alpha, &cfg()).unwrap();
        assert!((bid.p - oracle).abs() < 1e-12, "α = {alpha}: {}", bid.p);
        assert!((-offer.p - bid.p).abs() <= 1e-12);
        assert!((bid.delta[1] - replica[1]).abs() < 1e-10);
        assert!(bid.residual_variance < 1e-20);
    }
    let book = order_book(&mk, &cal, &call, 1.0).unwrap();
    assert!(book.half_spread.abs() < 1e-12);
}

#[test]
fn three_state_call_matches_direct_maximisation() {
    let (mk, cal) = three_state();
    let call = Payoff::call(&mk, 1, 1.0).unwrap();
    let m = Measure::uniform(3);
    let dq1 = [-1.0, 0.0, 1.0];
    let value = |d: f64| {
        let x: Vec<f64> = (0..3).map(|i| call.values[i] - d * dq1[i]).collect();
        entropy_adjusted_mean(&m, &x, 1.0).unwrap()
    };
    let d_star = golden_max(value, -2.0, 2.0);
    let oracle = value(d_star);
    let h = solve_hedge(&mk, &cal, &call, 1.0, &cfg()).unwrap();
    assert!((h.p - oracle).abs() < 1e-9, "{} vs {oracle}", h.p);
    assert!((h.delta[1] - d_star).abs() < 1e-6);
    assert!((h.p + ((1.0 + 2.0 * (-0.5f64).exp()) / 3.0).ln()).abs() < 1e-12);
    assert!((h.p - 0.3042355).abs() < 1e-7);
    assert!((h.delta[1] - 0.5).abs() < 1e-9);
}

#[test]
fn three_state_order_book() {
    let (mk, cal) = three_state();
    let call = Payoff::call(&mk, 1, 1.0).unwrap();
    let book = order_book(&mk, &cal, &call, 1.0).unwrap();
    assert!((book.p0 - 1.0 / 3.0).abs() < 1e-12);
    assert!((book.half_spread - 1.0 / 18.0).abs() < 1e-12);
    assert!((book.bid() - (1.0 / 3.0 - 1.0 / 18.0)).abs() < 1e-12);
    assert!((book.offer() - (1.0 / 3.0 + 1.0 / 18.0)).abs() < 1e-12);
    let wide = order_book(&mk, &cal, &call, 2.0).unwrap();
    assert!((wide.half_spread - 2.0 * book.half_spread).abs() < 1e-15);
    assert_eq!(wide.p0, book.p0);
}

#[test]
fn scaling_the_notional_rescales_risk_aversion() {
    let (mk, cal) = three_state();
    let call = Payoff::call(&mk, 1, 1.0).unwrap();
    for lambda in [-2.0, -1.0, -0.5, 0.5, 1.0, 2.0] {
        let scaled = solve_hedge(&mk, &cal, &call.clone().with_notional(lambda), 1.0, &cfg()).unwrap();
        let unit = solve_hedge(&mk, &cal, &call, lambda, &cfg()).unwrap();
        assert!((scaled.p / lambda - unit.p).abs() < 1e-10, "λ = {lambda}");
        assert!((&scaled.delta / lambda - &unit.delta).amax() < 1e-10);
    }
}

#[test]
fn small_risk_aversion_expansion_is_second_order() {
    let (mk, cal) = three_state();
    let call = Payoff::call(&mk, 1, 1.0).unwrap();
    let err = |alpha: f64| {
        let p = solve_hedge(&mk, &cal, &call, alpha, &cfg()).unwrap().p;
        let book = order_book(&mk, &cal, &call, alpha).unwrap();
        (p - (book.p0 - 0.5 * book.half_spread)).abs()
    };
    let errs: Vec<f64> = [0.2, 0.1, 0.05].iter().map(|a| err(*a)).collect();
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
    }
}

#[test]
fn adding_traded_assets_shifts_price_and_hedge() {
    let (mk, cal) = three_state();
    let call = Payoff::call(&mk, 1, 1.0).unwrap();
    let base = solve_hedge(&mk, &cal, &call, 1.5, &cfg()).unwrap();
    let (a, b) = (0.7, -0.3);
    let shifted: Vec<f64> = (0..3).map(|i| call.values[i] + a * mk.finals()[(i, 0)] + b * mk.finals()[(i, 1)]).collect();
    let h = solve_hedge(&mk, &cal, &Payoff::new(shifted), 1.5, &cfg()).unwrap();
    assert!((h.p - (base.p + a + b)).abs() < 1e-12);
    assert!((h.delta[0] - base.delta[0] - a).abs() < 1e-10);
    assert!((h.delta[1] - base.delta[1] - b).abs() < 1e-10);
}

#[test]
fn buyer_and_seller_bracket_the_mid() {
    let rows = vec![vec![1.01, 0.7], vec![1.01, 0.9], vec![1.01, 1.1], vec![1.01, 1.25], vec![1.01, 1.4]];
    let (mk, cal) = market(vec![1.0, 1.0], &rows, &Measure::new(vec![0.1, 0.25, 0.3, 0.2, 0.15]).unwrap());
    let digital = Payoff::digital(&mk, 1, 1.0).unwrap();
    let mid = solve_hedge(&mk, &cal, &digital, 0.0, &cfg()).unwrap().p;
    let mut last_bid = mid;
    let mut last_offer = mid;
    for alpha in [0.25, 0.5, 1.0, 2.0, 4.0, 8.0] {
        let bid = solve_hedge(&mk, &cal, &digital, alpha, &cfg()).unwrap().p;
        let offer = -solve_hedge(&mk, &cal, &digital.clone().with_notional(-1.0), alpha, &cfg()).unwrap().p;
        assert!(bid < last_bid && offer > last_offer, "α = {alpha}");
        last_bid = bid;
        last_offer = offer;
    }
}

#[test]
fn price_curve_widens_with_size() {
    let (mk, cal) = three_state();
    let call = Payoff::call(&mk, 1, 1.0).unwrap();
    let lambdas = [-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0];
    let curve = price_curve(&mk, &cal, &call, 1.0, &lambdas, &cfg()).unwrap();
    assert!((curve[3].price - 1.0 / 3.0).abs() < 1e-12);
    for w in curve.windows(2) {
        assert!(w[1].price < w[0].price);
    }
    for (pt, lambda) in curve.iter().zip(lambdas) {
        assert!((pt.delta[1] - 0.5).abs() < 1e-9, "λ = {lambda}");
    }
}

/// Probabilists' Gauss–Hermite rule from the Jacobi matrix.
fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let jacobi = DMatrix::from_fn(n, n, |i, j| if i + 1 == j || j + 1 == i { (i.max(j) as f64).sqrt() } else { 0.0 });
    let eig = SymmetricEigen::new(jacobi);
    let weights = (0..n).map(|k| eig.eigenvectors[(0, k)].powi(2)).collect();
    (eig.eigenvalues.iter().copied().collect(), weights)
}

#[test]
fn normal_closed_form_matches_quadrature_market() {
    let (nodes, weights) = gauss_hermite(24);
    let dt: f64 = 0.5;
    let (mu1, mu2, s1, s2, corr) = (0.06, 0.02, 0.25, 0.15, 0.4);
    let (a, b1, b2, c) = (0.2, 0.6, -0.3, 0.35);
    let mut rows = Vec::new();
    let mut w = Vec::new();
    let mut payoff = Vec::new();
    for (i, z1) in nodes.iter().enumerate() {
        for (j, z2) in nodes.iter().enumerate() {
            for (k, z3) in nodes.iter().enumerate() {
                let e2 = corr * z1 + (1.0f64 - corr * corr).sqrt() * z2;
                let dq1 = mu1 * dt + s1 * dt.sqrt() * z1;
                let dq2 = 2.0 * (mu2 * dt + s2 * dt.sqrt() * e2);
                rows.push(vec![1.0 + dq1, 2.0 + dq2]);
                payoff.push(a + b1 * dq1 + b2 * dq2 + c * z3);
                w.push(weights[i] * weights[j] * weights[k]);
            }
        }
    }
    let m = Measure::from_unnormalised(w).unwrap();
    let mk = SampleMarket::from_rows(vec![1.0, 2.0], &rows, dt).unwrap();
    let cal = calibrate(&mk, &m, &cfg()).unwrap();
    let h = solve_hedge(&mk, &cal, &Payoff::new(payoff), 0.8, &cfg()).unwrap();

    let v1 = s1 * s1 * dt;
    let v2 = 4.0 * s2 * s2 * dt;
    let v12 = 2.0 * corr * s1 * s2 * dt;
    let mean = DVector::from_vec(vec![mu1 * dt, 2.0 * mu2 * dt, a + b1 * mu1 * dt + b2 * 2.0 * mu2 * dt]);
    let cov = DMatrix::from_row_slice(3, 3, &[
        v1, v12, b1 * v1 + b2 * v12,
        v12, v2, b1 * v12 + b2 * v2,
        b1 * v1 + b2 * v12, b1 * v12 + b2 * v2, b1 * b1 * v1 + 2.0 * b1 * b2 * v12 + b2 * b2 * v2 + c * c,
    ]);
    let closed = hedge_normal(&mean, &cov, mk.q(), dt, 0.8, cal.r).unwrap();
    assert!((h.p - closed.p).abs() < 1e-9, "{} vs {}", h.p, closed.p);
    assert!((h.s - closed.s).abs() < 1e-8, "{} vs {}", h.s, closed.s);
    for j in 0..2 {
        assert!((h.delta[j] - closed.delta[j]).abs() < 1e-9);
    }
}

fn random_case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, f64)> {
    (
        proptest::collection::vec(0.2f64..1.8, 5),
        proptest::collection::vec(0.05f64..1.0, 5),
        proptest::collection::vec(-1.0f64..2.0, 5),
        0.1f64..3.0,
    )
        .prop_filter("risky asset must straddle the funding", |(s, _, _, _)| {
            s.iter().any(|v| *v < 0.95) && s.iter().any(|v| *v > 1.07)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hedge_conditions_hold((risky, w, payoff, alpha) in random_case()) {
        let rows: Vec<Vec<f64>> = risky.iter().map(|s| vec![1.02, *s]).collect();
        let m = Measure::from_unnormalised(w).unwrap();
        let (mk, cal) = market(vec![1.0, 1.0], &rows, &m);
        let h = solve_hedge(&mk, &cal, &Payoff::new(payoff.clone()), alpha, &cfg()).unwrap();
        let scale = 1.0 + payoff.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        // Self-funding.
        prop_assert!((h.delta.dot(mk.q()) - h.p).abs() < 1e-10 * scale);
        // Price condition under the price measure.
        let value = entropy_adjusted_mean(&cal.gamma, &h.residual_payoff, alpha).unwrap();
        prop_assert!((value - h.p).abs() < 1e-10 * scale, "{} vs {}", value, h.p);
        // Hedge condition: every asset earns r + α s under the hedging measure.
        let hedged = exponential_tilt(&cal.gamma, &h.residual_payoff, alpha, 0.0).unwrap();
        let dq = mk.dq();
        let growth = (cal.r + alpha * h.s) * mk.dt();
        for j in 0..2 {
            let col: Vec<f64> = dq.column(j).iter().copied().collect();
            prop_assert!((hedged.mean(&col) - mk.q()[j] * growth).abs() < 1e-10 * scale);
        }
    }
}
