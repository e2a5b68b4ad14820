//! Lower real branch of the Lambert W function.

use std::f64::consts::E;

use crate::error::{Error, Result};

const BRANCH_POINT: f64 = -1.0 / E;
const MAX_HALLEY: usize = 64;

fn residual_ok(w: f64, x: f64) -> bool {
    (w * w.exp() - x).abs() <= 1e-13 * x.abs()
}

/// `W_{-1}(x)` for `-1/e <= x < 0`: the solution `w <= -1` of `w e^w = x`.
///
/// Halley iteration from a branch-point series (near `-1/e`) or the
/// logarithmic asymptote (near `0`); falls back to bisection if the
/// iteration does not meet `|w e^w - x| <= 1e-13 |x|`.
pub fn lambert_w_minus1(x: f64) -> Result<f64> {
    if x.is_nan() || x >= 0.0 || x < BRANCH_POINT - 1e-15 {
        return Err(Error::DomainError(x));
    }
    if x <= BRANCH_POINT {
        return Ok(-1.0);
    }

    let mut w = if x < -0.25 {
        let p = -(2.0 * (E * x + 1.0)).max(0.0).sqrt();
        -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p * p * p
    } else {
        let l1 = (-x).ln();
        let l2 = (-l1).ln();
        l1 - l2 + l2 / l1
    };
    w = w.min(-1.0);

    for _ in 0..MAX_HALLEY {
        let ew = w.exp();
        let f = w * ew - x;
        if f.abs() <= 1e-15 * x.abs() {
            break;
        }
        let w1 = w + 1.0;
        if w1.abs() < 1e-300 {
            break;
        }
        let denom = ew * w1 - (w + 2.0) * f / (2.0 * w1);
        let next = w - f / denom;
        w = if next.is_finite() {
            if next > -1.0 {
                0.5 * (w - 1.0)
            } else {
                next
            }
        } else {
            break;
        };
    }
    if residual_ok(w, x) {
        return Ok(w);
    }
    Ok(bisect(x))
}

fn bisect(x: f64) -> f64 {
    // w e^w decreases from 0- to -1/e on (-inf, -1].
    let mut lo: f64 = -2.0;
    while lo * lo.exp() <= x {
        lo *= 2.0;
    }
    let mut hi = -1.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid * mid.exp() > x {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-16 * hi.abs() {
            break;
        }
    }
    0.5 * (lo + hi)
}
