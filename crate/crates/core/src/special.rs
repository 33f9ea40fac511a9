//! Scalar helpers: logistic maps, log-sum-exp, the standard normal
//! density and distribution function, and small symmetric eigen queries.

use libm::erfc;
use nalgebra::DMatrix;
use std::f64::consts::{PI, SQRT_2};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    p.ln() - (-p).ln_1p()
}

/// log(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 35.0 {
        x + (-x).exp()
    } else if x < -35.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// log(e^a + e^b).
pub fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Standard normal density, written `phi_pdf` to keep it apart from logits.
pub fn phi_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Standard normal distribution function.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// x log(x / y) with the conventions 0 log 0 = 0 and x log(x/0) = +inf.
pub fn xlogxy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else if y == 0.0 {
        f64::INFINITY
    } else {
        x * (x / y).ln()
    }
}

/// Binary KL divergence between Bernoulli(a) and Bernoulli(b).
pub fn binary_kl(a: f64, b: f64) -> f64 {
    xlogxy(a, b) + xlogxy(1.0 - a, 1.0 - b)
}

/// Smallest and largest eigenvalues of a symmetric matrix.
pub fn sym_eig_range(m: &DMatrix<f64>) -> (f64, f64) {
    let sym = (m + m.transpose()) * 0.5;
    let ev = sym.symmetric_eigenvalues();
    let lo = ev.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = ev.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Spectral norm of a symmetric matrix.
pub fn sym_spectral_norm(m: &DMatrix<f64>) -> f64 {
    let (lo, hi) = sym_eig_range(m);
    lo.abs().max(hi.abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logistic_round_trip() {
        for i in -300..=300 {
            let x = i as f64 / 10.0;
            let b = sigmoid(x);
            assert!((sigmoid(logit(b)) - b).abs() < 1e-12);
            if x.abs() <= 15.0 {
                assert!((logit(b) - x).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cdf_reference_values() {
        assert!((norm_cdf(-1.0) - 0.158_655_253_931_457_05).abs() < 1e-14);
        assert!((norm_cdf(0.0) - 0.5).abs() < 1e-16);
        assert!(norm_cdf(-6.0) > 0.0 && norm_cdf(-6.0) < 1e-8);
    }

    #[test]
    fn lse_matches_direct() {
        let xs = [0.1, -2.0, 3.5];
        let direct = xs.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((logsumexp(&xs) - direct).abs() < 1e-14);
        assert!((logaddexp(1000.0, 1000.0) - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn binary_kl_conventions() {
        assert!((binary_kl(0.0, 0.3) + (0.7f64).ln()).abs() < 1e-15);
        assert!(binary_kl(0.5, 0.0).is_infinite());
        assert_eq!(binary_kl(0.4, 0.4), 0.0);
    }
}
