//! Summary statistics and the hypothesis tests used to judge Monte-Carlo output.

use serde::Serialize;
use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, Normal, StudentsT};

use crate::error::{OsmacError, Result};

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Unbiased sample variance; zero for fewer than two values.
pub fn variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

/// Least-squares slope and intercept of y on x.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(OsmacError::Dimension("need at least two paired points".into()));
    }
    let (mx, my) = (mean(x), mean(y));
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(OsmacError::Degenerate("all x values are equal".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairedTest {
    pub pairs: usize,
    pub mean_diff: f64,
    pub std_error: f64,
    pub t: f64,
    /// P-value against the alternative that the mean difference is negative.
    pub p_value: f64,
}

/// One-sided paired t-test of H₁: E[a − b] < 0.
pub fn paired_one_sided(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() {
        return Err(OsmacError::Dimension("paired samples differ in length".into()));
    }
    if a.len() < 2 {
        return Err(OsmacError::InvalidParameter("paired test needs at least two pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let m = mean(&d);
    let se = (variance(&d) / n).sqrt();
    let (t, p) = if se == 0.0 {
        let p = if m < 0.0 { 0.0 } else { 1.0 };
        (if m < 0.0 { f64::NEG_INFINITY } else { f64::INFINITY }, p)
    } else {
        let t = m / se;
        let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| OsmacError::Numeric(e.to_string()))?;
        (t, dist.cdf(t))
    };
    Ok(PairedTest {
        pairs: d.len(),
        mean_diff: m,
        std_error: se,
        t,
        p_value: p,
    })
}

/// Kolmogorov–Smirnov statistic of `v` against N(0,1) and its asymptotic
/// p-value with the usual small-sample correction of the scaling.
pub fn ks_standard_normal(v: &[f64]) -> Result<(f64, f64)> {
    if v.is_empty() {
        return Err(OsmacError::InvalidParameter("empty sample".into()));
    }
    let std = Normal::standard();
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in s.iter().enumerate() {
        let f = std.cdf(*x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let sn = n.sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    Ok((d, kolmogorov_survival(lambda)))
}

/// P(K > λ) for the Kolmogorov distribution.
fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// P(X ≤ successes) for X ~ Binomial(trials, p0): small values reject
/// "success rate ≥ p0" in favour of a lower rate.
pub fn binomial_lower_tail(successes: u64, trials: u64, p0: f64) -> Result<f64> {
    let dist = Binomial::new(p0, trials).map_err(|e| OsmacError::Numeric(e.to_string()))?;
    Ok(dist.cdf(successes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn basic_summaries() {
        assert_eq!(mean(&[1.0, 2.0, 3.0]), 2.0);
        assert_eq!(variance(&[1.0, 2.0, 3.0]), 1.0);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        let (s, c) = linear_fit(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]).unwrap();
        assert!((s - 2.0).abs() < 1e-14 && (c - 1.0).abs() < 1e-14);
    }

    #[test]
    fn paired_test_direction() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [1.5, 2.4, 3.6, 4.5, 5.4];
        let t = paired_one_sided(&a, &b).unwrap();
        assert!(t.mean_diff < 0.0 && t.p_value < 0.01);
        let u = paired_one_sided(&b, &a).unwrap();
        assert!(u.p_value > 0.99);
    }

    #[test]
    fn ks_statistic_matches_reference() {
        // reference values from an independent implementation
        let x = [-1.2, -0.3, 0.1, 0.4, 2.0, 0.05, -0.7, 1.1];
        let (d, p) = ks_standard_normal(&x).unwrap();
        assert!((d - 0.1449388058383725).abs() < 1e-12);
        assert!((p - 0.9919716446930897).abs() < 1e-9);
    }

    #[test]
    fn ks_rejects_shifted_sample() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let z: Vec<f64> = (0..2000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let shifted: Vec<f64> = z.iter().map(|x| x + 0.3).collect();
        let (_, p) = ks_standard_normal(&shifted).unwrap();
        assert!(p < 1e-6);
    }

    #[test]
    fn kolmogorov_reference_values() {
        // classical critical values: P(K > 1.358) ≈ 0.05, P(K > 1.628) ≈ 0.01
        assert!((kolmogorov_survival(1.358) - 0.05).abs() < 1e-3);
        assert!((kolmogorov_survival(1.628) - 0.01).abs() < 1e-3);
    }

    #[test]
    fn binomial_tail() {
        let p = binomial_lower_tail(5, 10, 0.5).unwrap();
        assert!((p - 638.0 / 1024.0).abs() < 1e-12);
    }
}
