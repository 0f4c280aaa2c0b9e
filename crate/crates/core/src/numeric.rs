//! Small numerical helpers shared by the solvers.

use crate::error::{Error, Result};

/// Neumaier-compensated sum.
pub fn sum(values: &[f64]) -> f64 {
    let mut total = 0.0;
    let mut carry = 0.0;
    for &v in values {
        let t = total + v;
        if total.abs() >= v.abs() {
            carry += (total - t) + v;
        } else {
            carry += (v - t) + total;
        }
        total = t;
    }
    total + carry
}

/// `log Σ exp(x_i)` with the maximum factored out.
pub fn ln_sum_exp(x: &[f64]) -> f64 {
    let top = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return top;
    }
    let terms: Vec<f64> = x.iter().map(|v| (v - top).exp()).collect();
    top + sum(&terms).ln()
}

/// Bisection on a sign change of `f` in `[lo, hi]`, stopping when the
/// bracket is narrower than `tol`.
pub fn bisect(mut f: impl FnMut(f64) -> f64, lo: f64, hi: f64, tol: f64) -> Result<f64> {
    let (mut a, mut b) = (lo, hi);
    let (mut fa, fb) = (f(a), f(b));
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa.is_nan() || fb.is_nan() || fa.signum() == fb.signum() {
        return Err(Error::NoBracket(format!(
            "f({a}) = {fa:.3e} and f({b}) = {fb:.3e} have the same sign"
        )));
    }
    for _ in 0..400 {
        let mid = 0.5 * (a + b);
        if (b - a).abs() <= tol || mid == a || mid == b {
            return Ok(mid);
        }
        let fm = f(mid);
        if fm == 0.0 {
            return Ok(mid);
        }
        if fm.signum() == fa.signum() {
            a = mid;
            fa = fm;
        } else {
            b = mid;
        }
    }
    Ok(0.5 * (a + b))
}

/// Newton polish of a bracketed root; steps leaving `[lo, hi]` are rejected.
pub fn newton_polish(
    mut f: impl FnMut(f64) -> (f64, f64),
    start: f64,
    lo: f64,
    hi: f64,
    iterations: usize,
) -> f64 {
    let mut x = start;
    let (mut fx, mut dfx) = f(x);
    for _ in 0..iterations {
        if fx == 0.0 || dfx == 0.0 || !dfx.is_finite() {
            break;
        }
        let next = x - fx / dfx;
        if !(next > lo && next < hi) {
            break;
        }
        let (fn_, dfn) = f(next);
        if !(fn_.abs() < fx.abs()) {
            break;
        }
        x = next;
        fx = fn_;
        dfx = dfn;
    }
    x
}

/// Parses `a:b:n` into `n` evenly spaced points from `a` to `b`.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![a],
        _ => (0..n)
            .map(|i| {
                if i == n - 1 {
                    b
                } else {
                    a + (b - a) * i as f64 / (n - 1) as f64
                }
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let v = [1.0, 1e-16, 1e-16, -1.0];
        assert_eq!(sum(&v), 2e-16);
    }

    #[test]
    fn bisection_finds_sqrt_two() {
        let r = bisect(|x| x * x - 2.0, 0.0, 2.0, 1e-14).unwrap();
        assert!((r - 2f64.sqrt()).abs() < 1e-13);
        assert!(bisect(|x| x * x + 1.0, -1.0, 1.0, 1e-12).is_err());
    }

    #[test]
    fn linspace_hits_endpoints() {
        let g = linspace(-1.0, 1.0, 5);
        assert_eq!(g, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
    }
}
