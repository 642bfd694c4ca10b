//! Principal branch of the Lambert W function on `[-1/e, 0]`.
//!
//! The Mean-KL variance map only ever evaluates `W(-exp(a))` with `a <= -1`,
//! so everything here is restricted to that interval. Values come from a
//! [3/2] Padé approximant in `t = sqrt(2ex + 2)`, optionally polished with
//! Halley iterations on `f(w) = w e^w - x`.

use std::f64::consts::E;

use thiserror::Error;

/// `-1/e`, the branch point.
pub const BRANCH_POINT: f64 = -1.0 / E;

/// Inputs this far below the branch point are snapped onto it.
pub const BRANCH_TOLERANCE: f64 = 1e-12;

/// Halley iterations used by [`Evaluation::Refined`] before giving up on
/// further progress.
const MAX_REFINEMENTS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LambertError {
    #[error("argument {0} lies outside [-1/e, 0]")]
    Domain(f64),
    #[error("Halley iteration diverged at w = {w} for x = {x}")]
    Divergence { x: f64, w: f64 },
}

/// How `W` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum Evaluation {
    /// The bare Padé approximant. Its absolute error is at most ~2.7e-4
    /// (worst at `x = 0`).
    Pade,
    /// Padé start followed by Halley steps until the update stalls.
    #[default]
    Refined,
}

/// A validated argument in `[-1/e, 0]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct WDomainPoint(f64);

impl WDomainPoint {
    pub fn new(x: f64) -> Result<Self, LambertError> {
        if x.is_nan() || x > 0.0 || x < BRANCH_POINT - BRANCH_TOLERANCE {
            return Err(LambertError::Domain(x));
        }
        Ok(Self(x.max(BRANCH_POINT)))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

fn pade_in_t(t: f64) -> f64 {
    let num = ((13.0 / 720.0 * t + 257.0 / 720.0) * t + 1.0 / 6.0) * t - 1.0;
    let den = (103.0 / 720.0 * t + 5.0 / 6.0) * t + 1.0;
    num / den
}

fn branch_distance(x: f64) -> f64 {
    // 2ex + 2, floored at zero after snapping to the branch point.
    (2.0 * E * x + 2.0).max(0.0)
}

/// Raw [3/2] Padé approximant of `W(x)`.
pub fn lambert_w_pade(x: WDomainPoint) -> f64 {
    pade_in_t(branch_distance(x.get()).sqrt())
}

/// Derivative of the raw Padé approximant with respect to `x`.
///
/// Unbounded at the branch point, where `dt/dx = e / t` blows up.
pub fn lambert_w_pade_derivative(x: WDomainPoint) -> f64 {
    let t = branch_distance(x.get()).sqrt();
    let num = ((13.0 / 720.0 * t + 257.0 / 720.0) * t + 1.0 / 6.0) * t - 1.0;
    let dnum = (3.0 * 13.0 / 720.0 * t + 2.0 * 257.0 / 720.0) * t + 1.0 / 6.0;
    let den = (103.0 / 720.0 * t + 5.0 / 6.0) * t + 1.0;
    let dden = 2.0 * 103.0 / 720.0 * t + 5.0 / 6.0;
    let dw_dt = (dnum * den - num * dden) / (den * den);
    dw_dt * E / t
}

/// One Halley update for `w e^w = x`; `None` once `1 + w` is too small to
/// divide by.
fn halley_step(x: f64, w: f64) -> Option<f64> {
    let one_plus_w = 1.0 + w;
    if one_plus_w.abs() <= 1e-12 {
        return None;
    }
    let ew = w.exp();
    let f = w * ew - x;
    let fp = ew * one_plus_w;
    let denom = fp - (w + 2.0) * f / (2.0 * one_plus_w);
    Some(w - f / denom)
}

/// Applies `iterations` Halley updates starting from `w0`.
///
/// Stops early (returning the current iterate) when `1 + w` vanishes, which
/// only happens at the branch point where `w = -1` is already exact.
pub fn lambert_w_refine(x: WDomainPoint, w0: f64, iterations: usize) -> Result<f64, LambertError> {
    let x = x.get();
    let mut w = w0;
    for _ in 0..iterations {
        match halley_step(x, w) {
            Some(next) if next.is_finite() => w = next,
            Some(_) => return Err(LambertError::Divergence { x, w }),
            None => break,
        }
    }
    Ok(w)
}

/// Evaluates `W(x)` with the requested method. Results are clamped to
/// `[-1, 0]` in refined mode only; raw Padé is returned untouched.
pub fn lambert_w(x: WDomainPoint, eval: Evaluation) -> f64 {
    let w0 = lambert_w_pade(x);
    match eval {
        Evaluation::Pade => w0,
        Evaluation::Refined => {
            if x.get() == 0.0 {
                return 0.0;
            }
            // Padé is essentially exact this close to the branch point, and
            // Halley is ill-conditioned there.
            if 1.0 + w0 < 1e-4 {
                return w0.clamp(-1.0, 0.0);
            }
            let mut w = w0;
            for _ in 0..MAX_REFINEMENTS {
                match halley_step(x.get(), w) {
                    Some(next) if next.is_finite() => {
                        let done = (next - w).abs() <= 4.0 * f64::EPSILON * next.abs();
                        w = next;
                        if done {
                            break;
                        }
                    }
                    _ => return w0.clamp(-1.0, 0.0),
                }
            }
            w.clamp(-1.0, 0.0)
        }
    }
}

/// `dW/dx = 1 / (x + e^W)`, which equals `W / (x (1 + W))` and tends to 1 as
/// `x -> 0`.
///
/// The denominator is floored at `1e-12` near the branch point so the
/// gradient stays finite; callers multiply it by factors that vanish there.
pub fn lambert_w_derivative(x: f64, w: f64) -> f64 {
    1.0 / (x + w.exp()).max(1e-12)
}

/// Bisection reference on `[-1, 0]`, where `w e^w` is strictly increasing.
///
/// Iterates until the bracket is narrower than `1e-12`.
pub fn lambert_w_oracle(x: WDomainPoint) -> f64 {
    let x = x.get();
    if x == 0.0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (-1.0f64, 0.0f64);
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if mid * mid.exp() < x {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(x: f64) -> WDomainPoint {
        WDomainPoint::new(x).unwrap()
    }

    #[test]
    fn pade_at_branch_point_is_minus_one() {
        assert_eq!(lambert_w_pade(p(BRANCH_POINT)), -1.0);
    }

    #[test]
    fn pade_residual_at_zero() {
        // closed form with t = sqrt(2)
        let w = lambert_w_pade(p(0.0));
        assert!((w - 2.677782879012591e-4).abs() < 1e-12, "{w}");
    }

    #[test]
    fn pade_close_to_bisection_at_minus_tenth() {
        let w = lambert_w_pade(p(-0.1));
        assert!((w - (-0.111833)).abs() < 5e-4);
        assert!((w - lambert_w_oracle(p(-0.1))).abs() < 5e-4);
    }

    #[test]
    fn domain_is_enforced() {
        assert!(matches!(WDomainPoint::new(1e-3), Err(LambertError::Domain(_))));
        assert!(matches!(WDomainPoint::new(-0.4), Err(LambertError::Domain(_))));
        assert!(WDomainPoint::new(f64::NAN).is_err());
        // within tolerance of the branch point gets snapped
        let snapped = WDomainPoint::new(BRANCH_POINT - 5e-13).unwrap();
        assert_eq!(snapped.get(), BRANCH_POINT);
    }

    #[test]
    fn one_halley_step_at_minus_tenth() {
        let x = p(-0.1);
        let w = lambert_w_refine(x, lambert_w_pade(x), 1).unwrap();
        assert!((w * w.exp() + 0.1).abs() <= 1e-10);
    }

    #[test]
    fn refine_is_identity_with_zero_iterations() {
        assert_eq!(lambert_w_refine(p(-0.2), -0.3, 0).unwrap(), -0.3);
    }

    #[test]
    fn refine_branch_point_is_fixed() {
        for iters in [0, 1, 5] {
            assert_eq!(lambert_w_refine(p(BRANCH_POINT), -1.0, iters).unwrap(), -1.0);
        }
    }

    #[test]
    fn two_refinements_at_zero() {
        let w = lambert_w_refine(p(0.0), 2.7e-4, 2).unwrap();
        assert!(w.abs() <= 1e-12, "{w}");
    }

    #[test]
    fn oracle_values() {
        assert_eq!(lambert_w_oracle(p(0.0)), 0.0);
        assert!((lambert_w_oracle(p(BRANCH_POINT)) + 1.0).abs() <= 1e-12);
        let w = lambert_w_oracle(p(-0.13534));
        assert!((w - (-0.15860)).abs() < 2e-5, "{w}");
        assert!((w * w.exp() + 0.13534).abs() <= 1e-12);
    }

    #[test]
    fn refined_keeps_relative_accuracy_near_zero() {
        // W(-e^-41) ~ -e^-41; the variance map needs this to stay negative.
        let x = -(-41.0f64).exp();
        let w = lambert_w(p(x), Evaluation::Refined);
        assert!(w < 0.0);
        assert!(((w - x) / x).abs() < 1e-12, "{w} vs {x}");
    }

    #[test]
    fn derivative_matches_closed_form() {
        let x = -0.1;
        let w = lambert_w(p(x), Evaluation::Refined);
        let d = lambert_w_derivative(x, w);
        assert!((d - w / (x * (1.0 + w))).abs() < 1e-10);
        let h = 1e-6;
        let fd = (lambert_w_oracle(p(x + h)) - lambert_w_oracle(p(x - h))) / (2.0 * h);
        assert!((d - fd).abs() < 1e-5, "{d} vs {fd}");
        assert!((d - 1.259138).abs() < 1e-6);
        assert!((lambert_w_derivative(0.0, 0.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pade_derivative_matches_central_difference() {
        for &x in &[-0.3, -0.2, -0.1, -0.01] {
            let h = 1e-7;
            let fd = (lambert_w_pade(p(x + h)) - lambert_w_pade(p(x - h))) / (2.0 * h);
            let d = lambert_w_pade_derivative(p(x));
            assert!((fd - d).abs() / d.abs() < 1e-6, "{x}: {fd} vs {d}");
        }
    }
}
