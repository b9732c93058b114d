//! Central finite differences for verifying analytic gradients.

/// Central difference of `f` at `x[index]` with step `h`.
pub fn central_difference<F>(x: &mut [f64], index: usize, h: f64, mut f: F) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let orig = x[index];
    x[index] = orig + h;
    let plus = f(x);
    x[index] = orig - h;
    let minus = f(x);
    x[index] = orig;
    (plus - minus) / (2.0 * h)
}

/// Relative error `|a - b| / max(|a|, |b|, floor)`.
///
/// The floor keeps vanishing gradients from amplifying round-off noise.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Default step for `f64` checks.
pub const STEP: f64 = 1e-5;
/// Default denominator floor for [`relative_error`].
pub const FLOOR: f64 = 1e-6;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic() {
        let mut x = vec![2.0];
        let d = central_difference(&mut x, 0, STEP, |v| v[0].powi(3));
        assert!(relative_error(12.0, d, FLOOR) < 1e-9);
        assert_eq!(x[0], 2.0);
    }
}
