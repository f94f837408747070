//! Yeo-Johnson power transform with a maximum-likelihood λ.

use log::warn;

use crate::error::{Error, Result};
use crate::features::is_degenerate;

pub const LAMBDA_RANGE: (f64, f64) = (-5.0, 5.0);
pub const LAMBDA_TOL: f64 = 1e-6;

/// The Yeo-Johnson transform of `x`.
pub fn apply_yeo_johnson(x: f64, lambda: f64) -> f64 {
    if x >= 0.0 {
        if lambda == 0.0 {
            x.ln_1p()
        } else {
            (lambda * x.ln_1p()).exp_m1() / lambda
        }
    } else if lambda == 2.0 {
        -(-x).ln_1p()
    } else {
        let a = 2.0 - lambda;
        -(a * (-x).ln_1p()).exp_m1() / a
    }
}

/// Gaussian profile log-likelihood of the transformed sample, including
/// the Jacobian of the transform.
pub fn yeo_johnson_log_likelihood(x: &[f64], lambda: f64) -> f64 {
    let n = x.len() as f64;
    let t: Vec<f64> = x.iter().map(|&v| apply_yeo_johnson(v, lambda)).collect();
    let mean = t.iter().sum::<f64>() / n;
    let var = t.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if !(var > 0.0) || !var.is_finite() {
        return f64::NEG_INFINITY;
    }
    let jac: f64 = x.iter().map(|&v| v.signum() * v.abs().ln_1p()).sum();
    -0.5 * n * var.ln() + (lambda - 1.0) * jac
}

/// Maximizes the profile likelihood over `LAMBDA_RANGE` by golden-section
/// search. A constant column gets λ = 1.
pub fn fit_yeo_johnson(x: &[f64]) -> Result<f64> {
    if x.len() < 3 {
        return Err(Error::arg(format!(
            "Yeo-Johnson fit needs at least 3 values, got {}",
            x.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("Yeo-Johnson fit needs finite values"));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let std = (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt();
    if is_degenerate(mean, std) {
        warn!("constant column, Yeo-Johnson lambda set to 1");
        return Ok(1.0);
    }

    let f = |l: f64| yeo_johnson_log_likelihood(x, l);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = LAMBDA_RANGE;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > LAMBDA_TOL {
        if fc >= fd {
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
    Ok(0.5 * (a + b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn skewness(x: &[f64]) -> f64 {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let m2 = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
        let m3 = x.iter().map(|v| (v - m).powi(3)).sum::<f64>() / n;
        m3 / m2.powf(1.5)
    }

    #[test]
    fn branch_values() {
        assert_eq!(apply_yeo_johnson(0.0, 0.3), 0.0);
        assert_eq!(apply_yeo_johnson(0.0, 2.0), 0.0);
        assert!((apply_yeo_johnson(3.0, 0.0) - 4f64.ln()).abs() < 1e-15);
        assert!((apply_yeo_johnson(-3.0, 2.0) + 4f64.ln()).abs() < 1e-15);
        for x in [-7.5, -1.0, -0.2, 0.4, 12.0] {
            assert!((apply_yeo_johnson(x, 1.0) - x).abs() < 1e-12);
        }
    }

    #[test]
    fn continuous_in_lambda_at_the_branch_points() {
        for x in [-4.0, -0.5, 0.5, 4.0] {
            for l in [0.0, 2.0] {
                let at = apply_yeo_johnson(x, l);
                assert!((apply_yeo_johnson(x, l + 1e-9) - at).abs() < 1e-7);
                assert!((apply_yeo_johnson(x, l - 1e-9) - at).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn normal_data_stays_near_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..10_000)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let l = fit_yeo_johnson(&x).unwrap();
        assert!((l - 1.0).abs() < 0.3, "{l}");
    }

    #[test]
    fn right_skew_is_reduced() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..5000)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z.exp()
            })
            .collect();
        let l = fit_yeo_johnson(&x).unwrap();
        assert!(l < 1.0);
        let t: Vec<f64> = x.iter().map(|&v| apply_yeo_johnson(v, l)).collect();
        assert!(skewness(&t).abs() < skewness(&x).abs());
    }

    #[test]
    fn golden_section_finds_the_grid_maximum() {
        let x = [0.1, 0.4, 0.5, 2.0, 3.5, 9.0, 14.0, -1.0, -0.3];
        let l = fit_yeo_johnson(&x).unwrap();
        let best = (0..=10_000)
            .map(|i| -5.0 + i as f64 * 1e-3)
            .max_by(|a, b| {
                yeo_johnson_log_likelihood(&x, *a).total_cmp(&yeo_johnson_log_likelihood(&x, *b))
            })
            .unwrap();
        assert!((l - best).abs() < 2e-3, "{l} vs {best}");
    }

    #[test]
    fn constant_and_short_columns() {
        assert_eq!(fit_yeo_johnson(&[4.0; 10]).unwrap(), 1.0);
        assert!(fit_yeo_johnson(&[1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn monotone_in_x(a in -1e3f64..1e3, b in -1e3f64..1e3, l in -5f64..5.0) {
            prop_assume!(a < b);
            prop_assert!(apply_yeo_johnson(a, l) <= apply_yeo_johnson(b, l));
        }
    }
}
