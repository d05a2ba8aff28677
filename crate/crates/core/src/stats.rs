//! Normality testing helpers.

use statrs::function::erf::erfc;

use crate::scalar::Real;

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsOutcome {
    pub statistic: f64,
    pub p_value: f64,
}

/// One-sample Kolmogorov-Smirnov test of `sample` against N(0, 1).
pub fn ks_standard_normal<T: Real>(sample: &[T]) -> KsOutcome {
    let n = sample.len();
    if n == 0 {
        return KsOutcome {
            statistic: 0.0,
            p_value: 1.0,
        };
    }
    let mut xs: Vec<f64> = sample.iter().map(|v| v.f64()).collect();
    xs.sort_by(f64::total_cmp);
    let nf = n as f64;
    let d = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal_cdf(x);
            (f - i as f64 / nf).max((i + 1) as f64 / nf - f)
        })
        .fold(0.0, f64::max);
    let sq = nf.sqrt();
    let lambda = (sq + 0.12 + 0.11 / sq) * d;
    KsOutcome {
        statistic: d,
        p_value: kolmogorov_survival(lambda),
    }
}

/// `P(K > lambda)` for the Kolmogorov distribution.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = sign * (-2.0 * kf * kf * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, path_rng, Stream};

    #[test]
    fn cdf_reference_points() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
        let v = normal_cdf(1.959963984540054);
        assert!((v - 0.975).abs() < 1e-10, "{v}");
    }

    #[test]
    fn kolmogorov_reference_points() {
        // classical critical values: 1.3581 at 5%, 1.6276 at 1%
        assert!((kolmogorov_survival(1.3581) - 0.05).abs() < 1e-4);
        assert!((kolmogorov_survival(1.6276) - 0.01).abs() < 1e-4);
    }

    #[test]
    fn ks_accepts_normal_rejects_shifted() {
        let mut r = path_rng(11, Stream::Family, 0);
        let xs: Vec<f64> = (0..2000).map(|_| normal(&mut r)).collect();
        assert!(ks_standard_normal(&xs).p_value > 0.05);
        let shifted: Vec<f64> = xs.iter().map(|x| x + 0.3).collect();
        assert!(ks_standard_normal(&shifted).p_value < 1e-6);
    }
}
