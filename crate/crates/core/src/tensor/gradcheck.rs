//! Central finite differences for gradient validation.
//!
//! The oracle only ever evaluates a forward closure at perturbed inputs; it
//! never touches the tape's backward pass, so agreement between the two is a
//! real cross-check. Checks run in `f64` shadow precision.

/// Relative error with a floor so near-zero pairs compare cleanly.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(1e-6, f64::max(a.abs(), b.abs()))
}

/// Coordinate-wise central differences of a scalar function: one gradient
/// entry per input coordinate, step `h`.
pub fn central_diff<F>(f: &F, x0: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x0.len()];
    let mut x = x0.to_vec();
    for i in 0..x0.len() {
        x[i] = x0[i] + h;
        let fp = f(&x);
        x[i] = x0[i] - h;
        let fm = f(&x);
        x[i] = x0[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Directional central difference `(f(x+h·v) − f(x−h·v)) / 2h`, for checking
/// large parameter vectors where coordinate-wise probing is too slow.
pub fn central_diff_directional<F>(f: &F, x0: &[f64], dir: &[f64], h: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let xp: Vec<f64> = x0.iter().zip(dir).map(|(&x, &d)| x + h * d).collect();
    let xm: Vec<f64> = x0.iter().zip(dir).map(|(&x, &d)| x - h * d).collect();
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// Max relative error between an analytic gradient and the central-difference
/// gradient of `f` at `x0`.
pub fn max_grad_rel_err<F>(f: &F, x0: &[f64], analytic: &[f64], h: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(x0.len(), analytic.len());
    let numeric = central_diff(f, x0, h);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}
