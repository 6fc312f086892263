//! One-dimensional root finding and minimization used by the implicit
//! potential machinery.

use crate::error::{Result, SlmError};

/// Settings for [`newton_bisect`].
#[derive(Debug, Clone, Copy)]
pub struct RootOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Bisect at the geometric mean (for strictly positive brackets spanning decades).
    pub geometric: bool,
}

impl Default for RootOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 100,
            geometric: false,
        }
    }
}

/// Safeguarded Newton iteration for an increasing function `f` on `[lo, hi]`
/// with `f(lo) <= 0 <= f(hi)`.
///
/// `eval` returns `(f(x), f'(x), scale)` where `scale` sets the magnitude the
/// residual is compared against (`|f| <= tol * scale`). Newton steps that
/// leave the current bracket are replaced by bisection.
pub fn newton_bisect<F>(
    mut eval: F,
    mut lo: f64,
    mut hi: f64,
    start: f64,
    opts: RootOptions,
) -> Result<f64>
where
    F: FnMut(f64) -> (f64, f64, f64),
{
    let mut x = if start > lo && start < hi {
        start
    } else {
        midpoint(lo, hi, opts.geometric)
    };
    for _ in 0..opts.max_iter {
        let (fx, dfx, scale) = eval(x);
        if !fx.is_finite() {
            return Err(SlmError::NonFinite {
                iteration: 0,
                what: format!("scalar residual at x = {x:e}"),
            });
        }
        if fx.abs() <= opts.tol * scale.max(f64::MIN_POSITIVE) {
            return Ok(x);
        }
        if fx < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        if hi - lo <= 4.0 * f64::EPSILON * hi.abs().max(lo.abs()) {
            return Ok(x);
        }
        let newton = if dfx > 0.0 && dfx.is_finite() {
            x - fx / dfx
        } else {
            f64::NAN
        };
        x = if newton > lo && newton < hi {
            newton
        } else {
            midpoint(lo, hi, opts.geometric)
        };
    }
    Err(SlmError::IterationLimit {
        iterations: opts.max_iter,
        lo,
        hi,
    })
}

fn midpoint(lo: f64, hi: f64, geometric: bool) -> f64 {
    if geometric && lo > 0.0 {
        (lo * hi).sqrt()
    } else {
        0.5 * (lo + hi)
    }
}

/// Golden-section search for the minimum of a unimodal `f` on `[a, b]`.
/// Returns `(argmin, min)`.
pub fn golden_section<F>(mut f: F, mut a: f64, mut b: f64, tol: f64, max_iter: usize) -> (f64, f64)
where
    F: FnMut(f64) -> f64,
{
    let inv_phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..max_iter {
        if (b - a).abs() <= tol * (1.0 + c.abs()) {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn newton_finds_sqrt_two() {
        let r = newton_bisect(
            |x| (x * x - 2.0, 2.0 * x, 2.0),
            0.0,
            2.0,
            1.0,
            RootOptions::default(),
        )
        .unwrap();
        assert!((r - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn bisection_rescues_flat_derivative() {
        // derivative reported as zero forces bisection steps
        let r = newton_bisect(
            |x| (x - 0.3, 0.0, 1.0),
            0.0,
            1.0,
            0.9,
            RootOptions::default(),
        )
        .unwrap();
        assert!((r - 0.3).abs() < 1e-11);
    }

    #[test]
    fn iteration_limit_reports_bracket() {
        let err = newton_bisect(
            |x| (x - 0.3, 0.0, 1e-300),
            0.0,
            1.0,
            0.5,
            RootOptions {
                tol: 0.0,
                max_iter: 5,
                geometric: false,
            },
        )
        .unwrap_err();
        assert!(matches!(
            err,
            SlmError::IterationLimit { iterations: 5, .. }
        ));
    }

    #[test]
    fn golden_section_quadratic() {
        let (x, fx) = golden_section(|x| (x - 1.5).powi(2) + 2.0, 0.0, 4.0, 1e-12, 200);
        assert!((x - 1.5).abs() < 1e-6);
        assert!((fx - 2.0).abs() < 1e-12);
    }
}
