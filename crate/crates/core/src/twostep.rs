//! Two-step adaptive subsampling estimator, its sandwich variance estimate
//! and Wald confidence intervals.
//!
//! A pilot subsample of size r0 (uniform unless another pilot distribution is
//! given) yields β̃₀. The approximate optimal probabilities are computed at
//! β̃₀, r further points are drawn from them, and one weighted likelihood is
//! maximized over all r0 + r draws, each draw weighted by the probability it
//! was drawn with. A ratio r0/r of about 0.2 is a reasonable default.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{OsmacError, Result};
use crate::linalg;
use crate::sampling::{self, SamplingWeights, DEFAULT_DELTA};
use crate::solver::{self, FitResult, FullData, GlmObservations, WeightedSample};

/// Number of pilot draws attempted (the first plus three redraws) before giving up.
pub const PILOT_ATTEMPTS: usize = 4;

/// Distribution used for the second-stage draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SecondStage {
    #[serde(rename = "mV")]
    Mv,
    #[serde(rename = "mVc")]
    Mvc,
    /// Leverage of rows rescaled by √ψ̈(xᵀβ̃₀).
    #[serde(rename = "LevA")]
    AdjustedLeverage,
    #[serde(rename = "UNIF")]
    Uniform,
}

impl fmt::Display for SecondStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SecondStage::Mv => "mV",
            SecondStage::Mvc => "mVc",
            SecondStage::AdjustedLeverage => "LevA",
            SecondStage::Uniform => "UNIF",
        })
    }
}

impl FromStr for SecondStage {
    type Err = OsmacError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mv" => Ok(SecondStage::Mv),
            "mvc" => Ok(SecondStage::Mvc),
            "leva" => Ok(SecondStage::AdjustedLeverage),
            "unif" | "uniform" => Ok(SecondStage::Uniform),
            other => Err(OsmacError::InvalidParameter(format!("unknown second-stage method '{other}'"))),
        }
    }
}

/// Where the information matrix inside the mV probabilities comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfoSource {
    /// (n r0)⁻¹ Σ ψ̈(β̃₀ᵀx*) x*x*ᵀ / π* over the pilot draws.
    Pilot,
    /// n⁻¹ Σ ψ̈(β̃₀ᵀxᵢ) xᵢxᵢᵀ over the full data.
    FullData,
}

#[derive(Debug, Clone)]
pub struct TwoStepConfig {
    pub r0: usize,
    pub r: usize,
    pub method: SecondStage,
    pub delta: f64,
    /// Pilot distribution; uniform when `None`.
    pub pilot: Option<SamplingWeights>,
    pub ci_level: f64,
    pub info_source: InfoSource,
}

impl TwoStepConfig {
    pub fn new(r0: usize, r: usize, method: SecondStage) -> Self {
        Self {
            r0,
            r,
            method,
            delta: DEFAULT_DELTA,
            pilot: None,
            ci_level: 0.95,
            info_source: InfoSource::Pilot,
        }
    }

    pub fn validate(&self, data: &FullData) -> Result<()> {
        if self.r0 < data.p() + 1 {
            return Err(OsmacError::InvalidParameter(format!(
                "pilot size r0={} must be at least p+1={}",
                self.r0,
                data.p() + 1
            )));
        }
        if self.r == 0 {
            return Err(OsmacError::InvalidParameter("second-stage size r must be at least 1".into()));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(OsmacError::InvalidParameter(format!("threshold delta must be >= 0, got {}", self.delta)));
        }
        check_level(self.ci_level)?;
        if let Some(w) = &self.pilot {
            if w.len() != data.n() {
                return Err(OsmacError::Dimension(format!(
                    "pilot distribution over {} points but data has {}",
                    w.len(),
                    data.n()
                )));
            }
        }
        Ok(())
    }
}

/// Output of a subsampling estimator.
#[derive(Debug, Clone)]
pub struct TwoStepEstimate {
    pub beta: DVector<f64>,
    /// Estimated covariance of `beta` given the full data.
    pub vcov: DMatrix<f64>,
    /// Pilot estimate β̃₀; `None` for one-step estimators.
    pub pilot_beta: Option<DVector<f64>>,
    pub r0: usize,
    pub r: usize,
    pub pilot_converged: bool,
    pub converged: bool,
    pub iterations: usize,
    pub pilot_attempts: usize,
    /// All draws of both stages with the probability each was drawn with.
    pub sample: WeightedSample,
}

impl TwoStepEstimate {
    pub fn std_error(&self, coord: usize) -> Result<f64> {
        let v = self.vcov.get((coord, coord)).copied().ok_or_else(|| {
            OsmacError::Dimension(format!("coordinate {coord} out of range for p={}", self.beta.len()))
        })?;
        if v < 0.0 {
            return Err(OsmacError::Internal(format!("negative variance {v} at coordinate {coord}")));
        }
        Ok(v.sqrt())
    }
}

fn check_level(level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(OsmacError::InvalidParameter(format!("confidence level must be in (0,1), got {level}")));
    }
    Ok(())
}

/// Draw `r0` points from `weights` and fit the weighted likelihood from zero.
/// Fresh draws are taken when the fit fails or does not converge, up to
/// [`PILOT_ATTEMPTS`] in total. Returns the sample, the fit and the attempt count.
pub fn pilot_estimate<R: Rng + ?Sized>(
    data: &FullData,
    weights: &SamplingWeights,
    r0: usize,
    rng: &mut R,
) -> Result<(WeightedSample, FitResult, usize)> {
    let mut reason = String::new();
    for attempt in 1..=PILOT_ATTEMPTS {
        let sample = sampling::draw_subsample(weights, data, r0, rng)?.to_weighted(data)?;
        match solver::fit_weighted_mle(&sample, &DVector::zeros(data.p())) {
            Ok(fit) if fit.converged => return Ok((sample, fit, attempt)),
            Ok(fit) => {
                reason = format!("no convergence after {} iterations, score {:.3e}", fit.iterations, fit.grad_norm)
            }
            Err(e) => reason = e.to_string(),
        }
    }
    Err(OsmacError::PilotFailure {
        attempts: PILOT_ATTEMPTS,
        reason,
    })
}

/// Second-stage probabilities computed from the pilot fit.
pub fn second_stage_weights(
    data: &FullData,
    config: &TwoStepConfig,
    pilot_sample: &WeightedSample,
    pilot_beta: &DVector<f64>,
) -> Result<SamplingWeights> {
    match config.method {
        SecondStage::Mv => {
            let info = match config.info_source {
                InfoSource::Pilot => solver::observed_information(pilot_sample, pilot_beta)?,
                InfoSource::FullData => solver::observed_information(data, pilot_beta)?,
            };
            sampling::mv_probs(data, pilot_beta, &info, config.delta)
        }
        SecondStage::Mvc => sampling::mvc_probs(data, pilot_beta, config.delta),
        SecondStage::AdjustedLeverage => sampling::leverage_probs(data, true, Some(pilot_beta)),
        SecondStage::Uniform => sampling::uniform_probs(data.n()),
    }
}

/// Run the two-step algorithm. Deterministic given the state of `rng`.
pub fn two_step_estimate<R: Rng + ?Sized>(
    data: &FullData,
    config: &TwoStepConfig,
    rng: &mut R,
) -> Result<TwoStepEstimate> {
    config.validate(data)?;
    let uniform;
    let pilot_weights = match &config.pilot {
        Some(w) => w,
        None => {
            uniform = sampling::uniform_probs(data.n())?;
            &uniform
        }
    };
    let (pilot_sample, pilot_fit, attempts) = pilot_estimate(data, pilot_weights, config.r0, rng)?;
    let pilot_beta = pilot_fit.beta;

    let weights = second_stage_weights(data, config, &pilot_sample, &pilot_beta)?;
    let second = sampling::draw_subsample(&weights, data, config.r, rng)?.to_weighted(data)?;
    let combined = pilot_sample.concat(&second)?;

    let fit = solver::fit_weighted_mle(&combined, &pilot_beta)?;
    if !fit.converged {
        return Err(OsmacError::FitFailure(format!(
            "combined fit did not converge after {} iterations (score {:.3e})",
            fit.iterations, fit.grad_norm
        )));
    }
    let vcov = estimate_variance(&combined, &fit.beta)?;
    Ok(TwoStepEstimate {
        beta: fit.beta,
        vcov,
        pilot_beta: Some(pilot_beta),
        r0: config.r0,
        r: config.r,
        pilot_converged: true,
        converged: true,
        iterations: fit.iterations,
        pilot_attempts: attempts,
        sample: combined,
    })
}

/// Single-stage estimator: r draws from fixed `weights` and one weighted fit,
/// redrawn on failure like a pilot. With uniform weights this is exactly the
/// pilot stage of [`two_step_estimate`] run with r0 = r.
pub fn one_step_estimate<R: Rng + ?Sized>(
    data: &FullData,
    weights: &SamplingWeights,
    r: usize,
    rng: &mut R,
) -> Result<TwoStepEstimate> {
    if r < data.p() + 1 {
        return Err(OsmacError::InvalidParameter(format!(
            "subsample size r={r} must be at least p+1={}",
            data.p() + 1
        )));
    }
    let (sample, fit, attempts) = pilot_estimate(data, weights, r, rng)?;
    let vcov = estimate_variance(&sample, &fit.beta)?;
    Ok(TwoStepEstimate {
        beta: fit.beta,
        vcov,
        pilot_beta: None,
        r0: 0,
        r,
        pilot_converged: true,
        converged: true,
        iterations: fit.iterations,
        pilot_attempts: attempts,
        sample,
    })
}

/// Sandwich estimate J⁻¹ V_c J⁻¹ over the pooled draws, with
/// J = [n R]⁻¹ Σ ψ̈(βᵀx*) x*x*ᵀ/π* and V_c = [n R]⁻² Σ {y* − ψ̇(βᵀx*)}² x*x*ᵀ/(π*)²,
/// R the total number of draws and n the population size.
pub fn estimate_variance(combined: &WeightedSample, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
    let info = solver::observed_information(combined, beta)?;
    let n = combined.total_n() as f64;
    let big_r = combined.draws() as f64;
    let fam = combined.family();
    let theta = combined.x() * beta;
    let w: Vec<f64> = theta
        .iter()
        .zip(combined.y().iter())
        .zip(combined.probs().iter().zip(combined.counts()))
        .map(|((t, y), (p, c))| {
            let e = y - fam.mean(*t);
            let s = n * big_r * p;
            *c as f64 * e * e / (s * s)
        })
        .collect();
    let vc = linalg::weighted_gram(combined.x(), &w);
    let inv = linalg::spd_inverse(&info, "information matrix of the combined subsample")?;
    let mut v = &inv * vc * &inv;
    linalg::symmetrize(&mut v);
    if v.iter().any(|x| !x.is_finite()) {
        return Err(OsmacError::Numeric("non-finite variance estimate".into()));
    }
    Ok(v)
}

/// z such that P(|Z| ≤ z) = level for standard normal Z.
pub fn normal_quantile_two_sided(level: f64) -> Result<f64> {
    check_level(level)?;
    let std = Normal::standard();
    Ok(std.inverse_cdf(0.5 * (1.0 + level)))
}

/// Wald interval β̆ⱼ ± z·√V̆ⱼⱼ.
pub fn confidence_interval(est: &TwoStepEstimate, coord: usize, level: f64) -> Result<(f64, f64)> {
    let z = normal_quantile_two_sided(level)?;
    let se = est.std_error(coord)?;
    let b = est.beta[coord];
    Ok((b - z * se, b + z * se))
}

/// Limiting covariance of the two-step estimator around the full-data MLE:
/// J⁻¹ V_c J⁻¹ with V_c the product of averages
/// (rn)⁻¹ Σ eᵢ² xᵢxᵢᵀ / (max(|eᵢ|,δ) gᵢ) × n⁻¹ Σ max(|eᵢ|,δ) gᵢ,
/// where gᵢ = ‖J⁻¹xᵢ‖ for mV and ‖xᵢ‖ for mVc.
pub fn asymptotic_variance_opt(
    data: &FullData,
    beta_mle: &DVector<f64>,
    info: &DMatrix<f64>,
    method: SecondStage,
    delta: f64,
    r: usize,
) -> Result<DMatrix<f64>> {
    if r == 0 {
        return Err(OsmacError::InvalidParameter("r must be at least 1".into()));
    }
    let inv = linalg::spd_inverse(info, "full-data information matrix")?;
    let g = match method {
        SecondStage::Mv => sampling::transformed_row_norms(data.x(), &inv),
        SecondStage::Mvc => linalg::row_norms(data.x()),
        other => {
            return Err(OsmacError::InvalidParameter(format!(
                "limiting variance is available for mV and mVc only, not {other}"
            )))
        }
    };
    let resid = data.residuals(beta_mle)?;
    let n = data.n() as f64;
    let denom: Vec<f64> = resid.iter().zip(&g).map(|(e, gi)| e.abs().max(delta) * gi).collect();
    let avg = denom.iter().sum::<f64>() / n;
    let w: Vec<f64> = resid
        .iter()
        .zip(&denom)
        .map(|(e, d)| if *e == 0.0 { 0.0 } else { e * e / d })
        .collect();
    let vc = linalg::weighted_gram(data.x(), &w) * (avg / (r as f64 * n));
    let mut v = &inv * vc * &inv;
    linalg::symmetrize(&mut v);
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfam::Family;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn poisson_data(n: usize, seed: u64) -> FullData {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 3, |_, j| if j == 0 { 1.0 } else { rng.random::<f64>() });
        let beta = DVector::from_vec(vec![0.2, 0.5, -0.3]);
        let theta = &x * &beta;
        let y = DVector::from_fn(n, |i, _| Family::Poisson.sample_response(theta[i], &mut rng).unwrap());
        FullData::new(x, y, Family::Poisson).unwrap()
    }

    #[test]
    fn config_validation() {
        let data = poisson_data(50, 1);
        assert!(TwoStepConfig::new(3, 10, SecondStage::Mv).validate(&data).is_err());
        assert!(TwoStepConfig::new(4, 0, SecondStage::Mv).validate(&data).is_err());
        let mut c = TwoStepConfig::new(4, 10, SecondStage::Mv);
        c.delta = -1.0;
        assert!(c.validate(&data).is_err());
        c.delta = 0.0;
        assert!(c.validate(&data).is_ok());
        c.ci_level = 1.0;
        assert!(c.validate(&data).is_err());
    }

    #[test]
    fn quantile_and_interval() {
        let z = normal_quantile_two_sided(0.95).unwrap();
        assert!((z - 1.959963984540054).abs() < 1e-9);
        assert!(normal_quantile_two_sided(0.0).is_err());
        assert!(normal_quantile_two_sided(1.0).is_err());
    }

    #[test]
    fn variance_is_zero_for_perfect_gaussian_fit() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let beta = DVector::from_vec(vec![1.0, 2.0]);
        let y = &x * &beta;
        let s = WeightedSample::new(x, y, vec![0.25; 4], 4, Family::Gaussian).unwrap();
        let v = estimate_variance(&s, &beta).unwrap();
        assert!(v.abs().max() < 1e-15);
    }

    #[test]
    fn variance_matches_hand_formula_for_scalar_poisson() {
        // three draws with x = 1, 2, 1; n = 10
        let x = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 1.0]);
        let y = DVector::from_vec(vec![2.0, 0.0, 1.0]);
        let probs = vec![0.1, 0.3, 0.2];
        let s = WeightedSample::new(x, y, probs.clone(), 10, Family::Poisson).unwrap();
        let b = 0.3_f64;
        let v = estimate_variance(&s, &DVector::from_vec(vec![b])).unwrap()[(0, 0)];

        let xs = [1.0_f64, 2.0, 1.0];
        let ys = [2.0_f64, 0.0, 1.0];
        let (n, r) = (10.0_f64, 3.0_f64);
        let mut j = 0.0;
        let mut vc = 0.0;
        for i in 0..3 {
            let mu = (b * xs[i]).exp();
            j += mu * xs[i] * xs[i] / probs[i];
            vc += (ys[i] - mu).powi(2) * xs[i] * xs[i] / (probs[i] * probs[i]);
        }
        j /= n * r;
        vc /= n * n * r * r;
        let expect = vc / (j * j);
        assert!(((v - expect) / expect).abs() < 1e-12);
    }

    #[test]
    fn counts_give_same_variance_as_repeated_rows() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, 1.0, -0.2, 1.0, 1.5]);
        let y = DVector::from_vec(vec![1.0, 0.0, 3.0]);
        let probs = vec![0.2, 0.5, 0.3];
        let compact =
            WeightedSample::with_counts(x.clone(), y.clone(), probs.clone(), vec![2, 1, 3], 20, Family::Poisson)
                .unwrap();
        let idx = [0, 0, 1, 2, 2, 2];
        let xr = DMatrix::from_fn(6, 2, |i, j| x[(idx[i], j)]);
        let yr = DVector::from_fn(6, |i, _| y[idx[i]]);
        let pr = idx.iter().map(|&i| probs[i]).collect();
        let expanded = WeightedSample::new(xr, yr, pr, 20, Family::Poisson).unwrap();
        let b = DVector::from_vec(vec![0.1, 0.4]);
        let a = estimate_variance(&compact, &b).unwrap();
        let e = estimate_variance(&expanded, &b).unwrap();
        assert!((a - e).abs().max() < 1e-14);
    }

    #[test]
    fn interval_half_width() {
        let data = poisson_data(200, 2);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut est = one_step_estimate(&data, &sampling::uniform_probs(200).unwrap(), 50, &mut rng).unwrap();
        est.vcov[(1, 1)] = 0.01;
        let (lo, hi) = confidence_interval(&est, 1, 0.95).unwrap();
        assert!(((hi - lo) / 2.0 - 0.1959963984540054).abs() < 1e-9);
        est.vcov[(1, 1)] = 0.0;
        let (lo, hi) = confidence_interval(&est, 1, 0.95).unwrap();
        assert_eq!(lo, est.beta[1]);
        assert_eq!(hi, est.beta[1]);
        est.vcov[(1, 1)] = -1.0;
        assert!(matches!(confidence_interval(&est, 1, 0.95), Err(OsmacError::Internal(_))));
        assert!(confidence_interval(&est, 7, 0.95).is_err());
    }

    #[test]
    fn two_step_is_deterministic() {
        let data = poisson_data(2000, 4);
        for method in [SecondStage::Mv, SecondStage::Mvc, SecondStage::AdjustedLeverage] {
            let cfg = TwoStepConfig::new(100, 300, method);
            let a = two_step_estimate(&data, &cfg, &mut ChaCha20Rng::seed_from_u64(9)).unwrap();
            let b = two_step_estimate(&data, &cfg, &mut ChaCha20Rng::seed_from_u64(9)).unwrap();
            assert_eq!(a.beta, b.beta);
            assert_eq!(a.vcov, b.vcov);
            assert_eq!(a.sample.draws(), 400);
            let min_eig = a.vcov.clone().symmetric_eigen().eigenvalues.min();
            assert!(min_eig >= -1e-12 * a.vcov.norm());
        }
    }

    #[test]
    fn uniform_second_stage_matches_weights_of_one_uniform_sample() {
        // both stages uniform: every draw weighs 1/((r0+r)·n⁻¹)
        let data = poisson_data(500, 5);
        let cfg = TwoStepConfig::new(40, 60, SecondStage::Uniform);
        let est = two_step_estimate(&data, &cfg, &mut ChaCha20Rng::seed_from_u64(1)).unwrap();
        let w = est.sample.weights().unwrap();
        assert!(w.iter().all(|v| (v - 500.0 / 100.0).abs() < 1e-12));
    }

    #[test]
    fn pilot_failure_is_reported() {
        // separated logistic data: every pilot fit diverges
        let n = 40;
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { i as f64 - 19.5 });
        let y = DVector::from_fn(n, |i, _| if i >= 20 { 1.0 } else { 0.0 });
        let data = FullData::new(x, y, Family::Bernoulli).unwrap();
        let cfg = TwoStepConfig::new(10, 10, SecondStage::Mvc);
        match two_step_estimate(&data, &cfg, &mut ChaCha20Rng::seed_from_u64(0)) {
            Err(OsmacError::PilotFailure { attempts, .. }) => assert_eq!(attempts, PILOT_ATTEMPTS),
            other => panic!("expected pilot failure, got {other:?}"),
        }
    }

    #[test]
    fn opt_variance_with_large_delta() {
        let data = poisson_data(100, 6);
        let fit = solver::fit_mle(&data, None).unwrap();
        let resid = data.residuals(&fit.beta).unwrap();
        let delta = 1e3;
        let v = asymptotic_variance_opt(&data, &fit.beta, &fit.info, SecondStage::Mvc, delta, 50).unwrap();
        let norms = linalg::row_norms(data.x());
        let n = 100.0;
        let mut vc = DMatrix::zeros(3, 3);
        let mut s = 0.0;
        for i in 0..100 {
            let xi = data.x().row(i).transpose();
            vc += (resid[i] * resid[i] / (delta * norms[i])) * &xi * xi.transpose();
            s += delta * norms[i];
        }
        vc *= s / (50.0 * n * n);
        let inv = linalg::spd_inverse(&fit.info, "t").unwrap();
        let expect = &inv * vc * &inv;
        assert!((v - &expect).abs().max() < 1e-10 * expect.abs().max());
    }

    #[test]
    fn opt_variance_equals_one_step_variance_at_optimal_probs() {
        let data = poisson_data(150, 7);
        let fit = solver::fit_mle(&data, None).unwrap();
        for (method, probs) in [
            (SecondStage::Mvc, sampling::mvc_probs(&data, &fit.beta, 0.0).unwrap()),
            (SecondStage::Mv, sampling::mv_probs(&data, &fit.beta, &fit.info, 0.0).unwrap()),
        ] {
            let v = asymptotic_variance_opt(&data, &fit.beta, &fit.info, method, 0.0, 30).unwrap();
            let (expect, _) = sampling::asymptotic_variance(&data, &fit.beta, &fit.info, probs.probs(), 30).unwrap();
            assert!((v - &expect).abs().max() < 1e-10 * expect.abs().max());
        }
    }
}
