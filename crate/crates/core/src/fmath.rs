//! Float math routed through `libm` so the crate stays `no_std` and results
//! are identical across platforms.

pub use libm::{acos, cos, erf, exp, fabs, floor, log as ln, pow, round, sin, sqrt};

/// 1/sqrt(2*pi), used by the GELU derivative.
pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub const SQRT_2: f64 = core::f64::consts::SQRT_2;

/// Exact GELU: `0.5 * x * (1 + erf(x / sqrt(2)))`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / SQRT_2))
}

/// Derivative of exact GELU.
#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x / SQRT_2));
    cdf + x * INV_SQRT_2PI * exp(-0.5 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_matches_finite_difference() {
        let h = 1e-6;
        for &x in &[-3.0, -1.0, -0.1, 0.0, 0.3, 1.7, 4.0] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn gelu_known_points() {
        assert_eq!(gelu(0.0), 0.0);
        // gelu(x) -> x for large positive x, -> 0 for large negative x
        assert!((gelu(10.0) - 10.0).abs() < 1e-12);
        assert!(gelu(-10.0).abs() < 1e-12);
    }
}
