//! Gamma-family special functions for the Beta KL divergence.

use statrs::function::beta::ln_beta;
use statrs::function::gamma::digamma;

/// Second derivative of `ln Gamma`.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc + inv
        + inv2 / 2.0
        + inv * inv2 * (1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * 5.0 / 66.0))))
}

/// `KL(Beta(a, b) || Beta(1, 1))` in closed form.
pub fn kl_beta_uniform(a: f64, b: f64) -> f64 {
    assert!(a > 0.0 && b > 0.0, "Beta parameters must be positive, got ({a}, {b})");
    if a == 1.0 && b == 1.0 {
        return 0.0;
    }
    let psi_ab = digamma(a + b);
    -ln_beta(a, b) + (a - 1.0) * (digamma(a) - psi_ab) + (b - 1.0) * (digamma(b) - psi_ab)
}
