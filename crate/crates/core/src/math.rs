//! Float helpers routed through `libm` so results are identical with and
//! without `std`.

pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

pub fn floor(x: f64) -> f64 {
    libm::floor(x)
}

pub fn ceil(x: f64) -> f64 {
    libm::ceil(x)
}

pub fn round(x: f64) -> f64 {
    libm::round(x)
}

pub fn powf(x: f64, y: f64) -> f64 {
    libm::pow(x, y)
}

pub fn min(a: f64, b: f64) -> f64 {
    if a < b {
        a
    } else {
        b
    }
}

pub fn max(a: f64, b: f64) -> f64 {
    if a > b {
        a
    } else {
        b
    }
}

pub fn clamp(x: f64, lo: f64, hi: f64) -> f64 {
    max(lo, min(hi, x))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + exp(-z))
    } else {
        let e = exp(z);
        e / (1.0 + e)
    }
}

/// Binary cross-entropy on a raw logit, stable for large |z|:
/// `max(z, 0) - z*y + ln(1 + exp(-|z|))`.
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    max(z, 0.0) - z * y + ln(1.0 + exp(-abs(z)))
}

/// d/dz of [`bce_with_logit`].
pub fn bce_with_logit_grad(z: f64, y: f64) -> f64 {
    sigmoid(z) - y
}

/// Smooth-L1 of a residual: `0.5 x^2` for |x| < 1, `|x| - 0.5` otherwise.
pub fn smooth_l1(x: f64) -> f64 {
    let a = abs(x);
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

/// d/dx of [`smooth_l1`].
pub fn smooth_l1_grad(x: f64) -> f64 {
    let a = abs(x);
    if a < 1.0 {
        x
    } else if x > 0.0 {
        1.0
    } else {
        -1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_symmetry() {
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!((sigmoid(3.0) + sigmoid(-3.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        assert!((bce_with_logit(0.0, 0.0) - core::f64::consts::LN_2).abs() < 1e-15);
        assert!((bce_with_logit(0.0, 1.0) - core::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bce_stable_for_large_logits() {
        assert!(bce_with_logit(500.0, 1.0) < 1e-12);
        assert!(bce_with_logit(-500.0, 0.0) < 1e-12);
        assert!(bce_with_logit(500.0, 0.0) > 499.0);
    }

    #[test]
    fn smooth_l1_piecewise() {
        assert!((smooth_l1(0.5) - 0.125).abs() < 1e-15);
        assert!((smooth_l1(-0.5) - 0.125).abs() < 1e-15);
        assert!((smooth_l1(2.0) - 1.5).abs() < 1e-15);
        assert!((smooth_l1_grad(0.5) - 0.5).abs() < 1e-15);
        assert!((smooth_l1_grad(-3.0) + 1.0).abs() < 1e-15);
    }
}
