//! Spectral summaries of the design, the finite-sample prediction error bound
//! for optimally subsampled estimators, and the matching subsample size rule.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{OsmacError, Result};
use crate::linalg;
use crate::sampling::{SamplingMethod, Subsample};
use crate::solver::{FitResult, FullData, GlmObservations, WeightedSample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectralSummary {
    pub sigma_max: f64,
    /// Smallest singular value above σ_max · max(n,p) · machine epsilon.
    pub sigma_min: f64,
    pub kappa: f64,
    pub n: usize,
    pub p: usize,
}

pub fn spectral_summary(x: &DMatrix<f64>) -> Result<SpectralSummary> {
    let (n, p) = x.shape();
    if n == 0 || p == 0 {
        return Err(OsmacError::Dimension("empty matrix".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(OsmacError::Domain("matrix has non-finite entries".into()));
    }
    let sv = linalg::singular_values(x);
    let sigma_max = sv[0];
    if sigma_max == 0.0 {
        return Err(OsmacError::Degenerate("all-zero matrix has no condition number".into()));
    }
    let tol = sigma_max * n.max(p) as f64 * f64::EPSILON;
    let sigma_min = sv.iter().copied().filter(|s| *s > tol).fold(f64::INFINITY, f64::min);
    Ok(SpectralSummary {
        sigma_max,
        sigma_min,
        kappa: sigma_max / sigma_min,
        n,
        p,
    })
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps < 1.0 / 3.0) {
        return Err(OsmacError::InvalidParameter(format!("eps must lie in (0, 1/3), got {eps}")));
    }
    Ok(())
}

/// α in the error bound: κ(J⁻¹) = κ(J) for mV probabilities, 1 for mVc.
pub fn bound_alpha(fit: &FitResult, method: SamplingMethod) -> Result<f64> {
    match method {
        SamplingMethod::Mv | SamplingMethod::MvThresh => linalg::spd_condition_number(&fit.info),
        SamplingMethod::Mvc | SamplingMethod::MvcThresh => Ok(1.0),
        other => Err(OsmacError::InvalidParameter(format!(
            "error bound is defined for mV and mVc probabilities, not {other}"
        ))),
    }
}

/// 8 α κ²(X) √(p log(1/ε)) / √r · ‖y − ψ̇(Xβ̂)‖: with probability at least 1 − ε
/// this bounds ‖ψ̇(Xβ̂) − ψ̇(Xβ̃)‖ for the estimator β̃ from r draws under the
/// optimal probabilities, provided the rescaled subsample design keeps
/// σ²_min ≥ σ²_min(X)/2.
pub fn prediction_error_bound(
    data: &FullData,
    fit: &FitResult,
    r: u64,
    eps: f64,
    method: SamplingMethod,
) -> Result<f64> {
    check_eps(eps)?;
    if r == 0 {
        return Err(OsmacError::InvalidParameter("r must be at least 1".into()));
    }
    let summary = spectral_summary(data.x())?;
    let alpha = bound_alpha(fit, method)?;
    let resid_norm = data.residuals(&fit.beta)?.norm();
    let p = data.p() as f64;
    Ok(8.0 * alpha * summary.kappa.powi(2) * (p * (1.0 / eps).ln()).sqrt() / (r as f64).sqrt() * resid_norm)
}

/// ⌈64 c_d² log(1/ε) κ⁴(X) α² p²⌉, the subsample size beyond which the
/// rescaled subsample design keeps half of the smallest squared singular value
/// with probability at least 1 − ε.
pub fn recommended_subsample_size(summary: &SpectralSummary, eps: f64, alpha: f64, c_d: f64) -> Result<u64> {
    check_eps_for_size(eps)?;
    if !(c_d > 0.0 && c_d <= 1.0) {
        return Err(OsmacError::InvalidParameter(format!("c_d must lie in (0, 1], got {c_d}")));
    }
    if !(alpha >= 1.0 && alpha.is_finite()) {
        return Err(OsmacError::InvalidParameter(format!("alpha must be a condition number >= 1, got {alpha}")));
    }
    let p = summary.p as f64;
    let v = 64.0 * c_d * c_d * (1.0 / eps).ln() * summary.kappa.powi(4) * alpha * alpha * p * p;
    if !v.is_finite() || v >= u64::MAX as f64 {
        return Err(OsmacError::Numeric(format!("recommended size {v:e} is not representable")));
    }
    // values within rounding noise of an integer are not bumped to the next one
    let k = v.round();
    let size = if (v - k).abs() <= 1e-9 * v.max(1.0) { k } else { v.ceil() };
    Ok(size.max(1.0) as u64)
}

fn check_eps_for_size(eps: f64) -> Result<()> {
    // ε = e⁻¹ is a common plug-in just above 1/3; the size rule itself only needs ε ∈ (0,1)
    if !(eps > 0.0 && eps < 1.0) {
        return Err(OsmacError::InvalidParameter(format!("eps must lie in (0, 1), got {eps}")));
    }
    Ok(())
}

/// σ²_p(X̃) ≥ σ²_min(X)/2 where X̃ stacks the drawn rows rescaled by 1/√(rπ*)
/// and σ_p is the p-th largest singular value (zero when X̃ has fewer than p rows).
pub fn check_singular_condition(subsample: &Subsample, data: &FullData, r: usize) -> Result<bool> {
    if subsample.x().ncols() != data.p() {
        return Err(OsmacError::Dimension("subsample and data have different column counts".into()));
    }
    if subsample.source_n() != data.n() {
        return Err(OsmacError::Dimension("subsample was not drawn from this data".into()));
    }
    if r == 0 || subsample.is_empty() {
        return Ok(false);
    }
    let scale: Vec<f64> = subsample.probs().iter().map(|p| 1.0 / (r as f64 * p).sqrt()).collect();
    let xt = linalg::scale_rows(subsample.x(), &scale);
    let sv = linalg::singular_values(&xt);
    let sigma_p = sv.get(data.p() - 1).copied().unwrap_or(0.0);
    let full = spectral_summary(data.x())?;
    Ok(sigma_p * sigma_p >= 0.5 * full.sigma_min * full.sigma_min)
}

/// Same condition for a sample with multiplicities, via the smallest
/// eigenvalue of X̃ᵀX̃ = Σ cᵢ xᵢxᵢᵀ / (r πᵢ).
pub fn check_singular_condition_weighted(sample: &WeightedSample, data: &FullData) -> Result<bool> {
    if sample.x().ncols() != data.p() {
        return Err(OsmacError::Dimension("sample and data have different column counts".into()));
    }
    let w = sample.weights().unwrap_or(&[]);
    let gram = linalg::weighted_gram(sample.x(), w);
    let lambda_min = gram.symmetric_eigen().eigenvalues.min().max(0.0);
    let full = spectral_summary(data.x())?;
    Ok(lambda_min >= 0.5 * full.sigma_min * full.sigma_min)
}
