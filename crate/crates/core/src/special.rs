//! Special functions not covered by `statrs`.

pub use statrs::function::gamma::{digamma, ln_gamma};

/// Trigamma function, the derivative of [`digamma`], for `x > 0`.
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
        + inv * inv2 * (1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 / 30.0)))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trigamma_known_values() {
        let pi2_6 = std::f64::consts::PI.powi(2) / 6.0;
        assert!((trigamma(1.0) - pi2_6).abs() < 1e-12);
        assert!((trigamma(0.5) - std::f64::consts::PI.powi(2) / 2.0).abs() < 1e-11);
        assert!((trigamma(2.0) - (pi2_6 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn trigamma_matches_digamma_derivative() {
        for &x in &[1e-3f64, 0.05, 0.7, 3.3, 12.0, 80.0] {
            let h = 1e-4 * x;
            let fd = (digamma(x + h) - digamma(x - h)) / (2.0 * h);
            assert!((fd - trigamma(x)).abs() / trigamma(x) < 1e-6, "x = {x}");
        }
    }

    #[test]
    fn sigmoid_of_intervention_bias() {
        assert!((sigmoid(-1.386) - 0.2).abs() < 1e-3);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
