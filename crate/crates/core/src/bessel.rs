//! Modified Bessel functions of the first kind, orders 0 and 1.
//!
//! Below [`SERIES_CUTOFF`] the ascending power series is summed directly; it
//! has only positive terms so there is no cancellation. Above it the
//! Hankel asymptotic expansion is truncated at its smallest term, which is
//! below 1e-12 relative for x >= 15.

use crate::error::{Error, Result};
use std::f64::consts::PI;

pub const SERIES_CUTOFF: f64 = 15.0;

/// Largest argument accepted by [`bessel_i`]; `exp(700)` is still finite.
pub const MAX_ARG: f64 = 700.0;

/// `I_order(x)` for `order` in {0, 1} and `0 <= x <= 700`.
pub fn bessel_i(order: u32, x: f64) -> Result<f64> {
    check_order(order)?;
    if !(x >= 0.0) {
        return Err(Error::Domain(format!("bessel_i needs x >= 0, got {x}")));
    }
    if x > MAX_ARG {
        return Err(Error::Domain(format!(
            "bessel_i argument {x} exceeds overflow guard {MAX_ARG}"
        )));
    }
    Ok(if x < SERIES_CUTOFF {
        series(order, x)
    } else {
        x.exp() / (2.0 * PI * x).sqrt() * asymptotic_sum(order, x)
    })
}

/// `ln I_0(x)`, finite for every finite `x >= 0`.
pub fn log_i0(x: f64) -> f64 {
    debug_assert!(x >= 0.0);
    if x < SERIES_CUTOFF {
        series(0, x).ln()
    } else {
        x - 0.5 * (2.0 * PI * x).ln() + asymptotic_sum(0, x).ln()
    }
}

/// `A(x) = I_1(x) / I_0(x)`, the mean resultant length of a von Mises
/// distribution with concentration `x`. Also the derivative of `ln I_0`.
pub fn i1_over_i0(x: f64) -> f64 {
    debug_assert!(x >= 0.0);
    if x < SERIES_CUTOFF {
        series(1, x) / series(0, x)
    } else {
        asymptotic_sum(1, x) / asymptotic_sum(0, x)
    }
}

fn check_order(order: u32) -> Result<()> {
    if order > 1 {
        return Err(Error::Domain(format!(
            "bessel_i supports orders 0 and 1, got {order}"
        )));
    }
    Ok(())
}

/// Sum_k (x/2)^(2k + order) / (k! (k + order)!)
fn series(order: u32, x: f64) -> f64 {
    let half = 0.5 * x;
    let q = half * half;
    let mut term = if order == 0 { 1.0 } else { half };
    let mut sum = term;
    let nu = order as f64;
    for k in 1..200 {
        let k = k as f64;
        term *= q / (k * (k + nu));
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Sum_k (-1)^k a_k(order) / x^k, stopped once terms stop shrinking.
fn asymptotic_sum(order: u32, x: f64) -> f64 {
    let mu = 4.0 * (order as f64).powi(2);
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..100 {
        let odd = (2 * k - 1) as f64;
        let next = -term * (mu - odd * odd) / (k as f64 * 8.0 * x);
        if next.abs() >= term.abs() {
            break;
        }
        term = next;
        sum += term;
        if term.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;

    // Independent oracle: 50 terms of the power series with factorials
    // evaluated in log space.
    fn series_oracle(order: u32, x: f64) -> f64 {
        let mut ln_fact = vec![0.0f64; 60];
        for k in 1..60 {
            ln_fact[k] = ln_fact[k - 1] + (k as f64).ln();
        }
        (0..50usize)
            .map(|k| {
                let p = (2 * k) as f64 + order as f64;
                if x == 0.0 {
                    return if p == 0.0 { 1.0 } else { 0.0 };
                }
                (p * (0.5 * x).ln() - ln_fact[k] - ln_fact[k + order as usize]).exp()
            })
            .sum()
    }

    #[test]
    fn known_values() {
        assert_eq!(bessel_i(0, 0.0).unwrap(), 1.0);
        assert_eq!(bessel_i(1, 0.0).unwrap(), 0.0);
        let i0_1 = bessel_i(0, 1.0).unwrap();
        assert!((i0_1 - 1.266_065_877_752_008_4).abs() < 1e-15);
        assert!((i0_1 - series_oracle(0, 1.0)).abs() < 1e-15);
    }

    #[test]
    fn matches_series_oracle_below_cutoff() {
        for i in 0..=1400 {
            let x = i as f64 * 0.01;
            for order in 0..=1 {
                let got = bessel_i(order, x).unwrap();
                let want = series_oracle(order, x);
                let rel = if want == 0.0 { got.abs() } else { ((got - want) / want).abs() };
                assert!(rel <= 1e-10, "I{order}({x}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn asymptotic_branch_is_continuous_at_cutoff() {
        // The 50-term series is still accurate at 15-30; compare both branches there.
        for &x in &[15.0, 17.5, 20.0, 25.0, 30.0] {
            for order in 0..=1 {
                let got = bessel_i(order, x).unwrap();
                let want = series_oracle(order, x);
                assert!(((got - want) / want).abs() < 1e-10, "I{order}({x})");
            }
        }
        let below = bessel_i(0, SERIES_CUTOFF - 1e-12).unwrap();
        let above = bessel_i(0, SERIES_CUTOFF).unwrap();
        assert!(((below - above) / above).abs() < 1e-10);
    }

    #[test]
    fn i1_below_i0() {
        for i in 1..=700 {
            let x = i as f64;
            assert!(bessel_i(1, x).unwrap() < bessel_i(0, x).unwrap(), "x = {x}");
            let r = i1_over_i0(x);
            assert!(r > 0.0 && r < 1.0);
        }
    }

    #[test]
    fn log_i0_agrees_with_direct() {
        for &x in &[0.0, 0.3, 2.0, 14.9, 15.0, 50.0, 500.0] {
            let direct = bessel_i(0, x).unwrap().ln();
            assert!((log_i0(x) - direct).abs() < 1e-10 * direct.abs().max(1.0));
        }
        assert!(log_i0(5000.0).is_finite());
    }

    #[test]
    fn domain_errors() {
        assert!(bessel_i(0, -1.0).is_err());
        assert!(bessel_i(2, 1.0).is_err());
        assert!(bessel_i(0, 701.0).is_err());
        assert!(bessel_i(0, f64::NAN).is_err());
    }
}
