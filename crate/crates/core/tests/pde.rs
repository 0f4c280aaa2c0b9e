use entropic::pde::{
    heston_price_measure, solve_bs_complete, solve_sv_incomplete, BsParams, Grid, SvParams,
};
use statrs::distribution::{ContinuousCDF, Normal};

fn bs_call(q: f64, k: f64, sigma: f64, r: f64, t: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).unwrap();
    let sd = sigma * t.sqrt();
    let d1 = ((q / k).ln() + (r + 0.5 * sigma * sigma) * t) / sd;
    q * n.cdf(d1) - k * (-r * t).exp() * n.cdf(d1 - sd)
}

fn call(k: f64) -> impl Fn(f64) -> f64 {
    move |q| (q - k).max(0.0)
}

#[test]
fn at_the_money_call_matches_closed_form() {
    let params = BsParams { r: 0.0, mu: 0.0, nu: 0.04 };
    let grid = Grid::standard(100.0, 0.04, 1.0);
    let s = solve_bs_complete(&params, &call(100.0), 1.0, &grid).unwrap();
    let exact = bs_call(100.0, 100.0, 0.2, 0.0, 1.0);
    assert!((exact - 7.9656).abs() < 5e-5);
    let rel = (s.price_at(100.0) - exact).abs() / exact;
    assert!(rel < 1e-3, "relative error {rel}");
}

#[test]
fn call_with_funding_matches_closed_form() {
    let params = BsParams { r: 0.05, mu: 0.1, nu: 0.09 };
    let grid = Grid::standard(100.0, 0.09, 1.0);
    let s = solve_bs_complete(&params, &call(110.0), 1.0, &grid).unwrap();
    for q in [80.0, 100.0, 120.0] {
        let exact = bs_call(q, 110.0, 0.3, 0.05, 1.0);
        assert!((s.price_at(q) - exact).abs() < 2e-2, "q = {q}");
    }
}

#[test]
fn forward_is_priced_exactly() {
    let params = BsParams { r: 0.03, mu: 0.0, nu: 0.04 };
    let grid = Grid::standard(100.0, 0.04, 2.0);
    let s = solve_bs_complete(&params, &|q| q - 90.0, 2.0, &grid).unwrap();
    for (i, q) in s.q.iter().enumerate() {
        let exact = q - 90.0 * (-0.06f64).exp();
        assert!((s.price[0][i] - exact).abs() < 1e-5, "q = {q}");
        assert!((s.delta[0][i] - 1.0).abs() < 1e-9);
    }
}

#[test]
fn grid_refinement_is_second_order() {
    let params = BsParams { r: 0.0, mu: 0.0, nu: 0.04 };
    let exact = bs_call(100.0, 100.0, 0.2, 0.0, 1.0);
    let base = Grid::standard(100.0, 0.04, 1.0);
    let coarse = Grid { q_nodes: 101, time_steps: 100, smoothing_steps: 1, ..base };
    let e1 = (solve_bs_complete(&params, &call(100.0), 1.0, &coarse).unwrap().price_at(100.0) - exact).abs();
    let e2 = (solve_bs_complete(&params, &call(100.0), 1.0, &coarse.refined(2)).unwrap().price_at(100.0) - exact).abs();
    let ratio = e1 / e2;
    assert!((3.0..5.5).contains(&ratio), "ratio {ratio}: {e1:.3e} {e2:.3e}");
}

fn heston() -> SvParams {
    SvParams { r: 0.0, mu: 0.02, kappa: 2.0, nu_bar: 0.04, eps_vol: 0.3, rho: -0.5 }
}

#[test]
fn risk_aversion_lowers_price() {
    let grid = Grid { q_nodes: 81, nu_nodes: 41, time_steps: 50, ..Grid::standard(100.0, 0.04, 1.0) };
    let p0 = solve_sv_incomplete(&heston(), 0.0, &call(100.0), 1.0, &grid).unwrap();
    let p1 = solve_sv_incomplete(&heston(), 0.5, &call(100.0), 1.0, &grid).unwrap();
    let a = p0.price_at(100.0, 0.04);
    let b = p1.price_at(100.0, 0.04);
    assert!(b < a, "{b} vs {a}");
    assert!((a - 7.9).abs() < 0.5, "{a}");
    println!("p(0) = {a}, p(0.5) = {b}");
}

#[test]
fn zero_vol_of_vol_reduces_to_black_scholes() {
    let grid = Grid { q_nodes: 101, nu_nodes: 21, time_steps: 100, ..Grid::standard(100.0, 0.04, 1.0) };
    let sv = SvParams { kappa: 0.0, eps_vol: 0.0, ..heston() };
    let s2 = solve_sv_incomplete(&sv, 1.0, &call(100.0), 1.0, &grid).unwrap();
    for (j, nu) in s2.nu.iter().enumerate() {
        let s1 = solve_bs_complete(&BsParams { r: 0.0, mu: 0.02, nu: *nu }, &call(100.0), 1.0, &grid).unwrap();
        for i in 0..s2.q.len() {
            assert!((s2.slices[0].price[i][j] - s1.price[0][i]).abs() < 1e-12);
        }
    }
}

#[test]
fn price_measure_level() {
    let p = SvParams { r: 0.0, mu: 0.02, kappa: 2.0, nu_bar: 0.04, eps_vol: 1.0, rho: -0.5 };
    assert!((heston_price_measure(&p).unwrap() - 0.045).abs() < 1e-15);
}

#[test]
fn perfect_correlation_removes_risk_aversion() {
    let grid = Grid { q_nodes: 81, nu_nodes: 41, time_steps: 50, ..Grid::standard(100.0, 0.04, 1.0) };
    for rho in [-1.0, 1.0] {
        let sv = SvParams { rho, ..heston() };
        let base = solve_sv_incomplete(&sv, 0.0, &call(100.0), 1.0, &grid).unwrap();
        for alpha in [0.5, 2.0] {
            let s = solve_sv_incomplete(&sv, alpha, &call(100.0), 1.0, &grid).unwrap();
            for (a, b) in s.slices[0].price.iter().flatten().zip(base.slices[0].price.iter().flatten()) {
                assert!((a - b).abs() < 1e-10, "ρ = {rho}, α = {alpha}");
            }
        }
        // The variance factor still matters.
        let flat = solve_bs_complete(&BsParams { r: 0.0, mu: 0.02, nu: 0.04 }, &call(100.0), 1.0, &grid).unwrap();
        assert!((base.price_at(100.0, 0.04) - flat.price_at(100.0)).abs() > 1e-3);
    }
}
