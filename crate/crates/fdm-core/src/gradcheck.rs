//! Central finite differences — the gradient oracle.
//!
//! Every backward pass in this crate is checked against this routine.
//! Complex tensors are perturbed in their real and imaginary parts
//! independently, which matches the gradient convention (g.re = dL/dx,
//! g.im = dL/dy) coordinate for coordinate.

use crate::error::{FdmError, Result};
use crate::tape::Buf;

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coords_checked: usize,
}

/// Compare an analytic gradient against central differences of `f` at `x`.
///
/// Returns the max over coordinates of |analytic - numeric| / (|numeric| + 1e-8).
/// `f` is evaluated twice at `x` up front; any bit-level disagreement means
/// the function is not deterministic and the check is rejected.
pub fn finite_difference_check(
    f: &mut dyn FnMut(&Buf) -> f64,
    x: &Buf,
    analytic: &Buf,
    step: f64,
) -> Result<FdReport> {
    assert_eq!(
        x.real_dim(),
        analytic.real_dim(),
        "finite_difference_check: point has {} real coordinates, gradient has {}",
        x.real_dim(),
        analytic.real_dim()
    );
    let base1 = f(x);
    let base2 = f(x);
    if base1.to_bits() != base2.to_bits() {
        return Err(FdmError::NonDeterministic {
            context: format!("f(x) evaluated twice gave {base1} then {base2}"),
        });
    }

    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_coord: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coords_checked: x.real_dim(),
    };
    let mut probe = x.clone();
    for k in 0..x.real_dim() {
        let orig = probe.get_coord(k);
        probe.set_coord(k, orig + step);
        let plus = f(&probe);
        probe.set_coord(k, orig - step);
        let minus = f(&probe);
        probe.set_coord(k, orig);

        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.get_coord(k);
        let rel = (a - numeric).abs() / (numeric.abs() + 1e-8);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_coord = k;
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
    }
    Ok(report)
}

/// Numeric directional slope of `f` along coordinate `k`, for tests that
/// check the finite-difference machinery itself.
pub fn numeric_slope(f: &mut dyn FnMut(&Buf) -> f64, x: &Buf, k: usize, step: f64) -> f64 {
    let mut probe = x.clone();
    let orig = probe.get_coord(k);
    probe.set_coord(k, orig + step);
    let plus = f(&probe);
    probe.set_coord(k, orig - step);
    let minus = f(&probe);
    (plus - minus) / (2.0 * step)
}
