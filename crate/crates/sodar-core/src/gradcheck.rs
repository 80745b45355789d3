//! Central finite-difference checking utilities.
//!
//! These helpers never touch the analytic backward path: they re-run a
//! caller-supplied forward closure with perturbed inputs, which keeps them
//! usable as an independent oracle for the tape gradients.

/// Central finite difference of `f` w.r.t. coordinate `i` of `x`.
pub fn central_diff<F>(f: &F, x: &mut [f64], i: usize, step: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let orig = x[i];
    x[i] = orig + step;
    let plus = f(x);
    x[i] = orig - step;
    let minus = f(x);
    x[i] = orig;
    (plus - minus) / (2.0 * step)
}

/// Guarded relative error between an analytic and a numeric derivative.
/// The denominator is floored so near-zero gradient pairs do not explode.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Checks analytic gradients against central differences on the listed
/// coordinates, returning the worst relative error.
pub fn max_rel_err<F>(f: &F, x: &mut Vec<f64>, analytic: &[f64], coords: &[usize], step: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let mut worst: f64 = 0.0;
    for &i in coords {
        let numeric = central_diff(f, x, i, step);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    worst
}
