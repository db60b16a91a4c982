//! Subsampling distributions and with-replacement draws.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{OsmacError, Result};
use crate::linalg;
use crate::solver::{FullData, WeightedSample};

/// Default floor on |yᵢ − ψ̇(xᵢᵀβ)| in the practical probabilities.
pub const DEFAULT_DELTA: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SamplingMethod {
    #[serde(rename = "UNIF")]
    Unif,
    #[serde(rename = "mV")]
    Mv,
    #[serde(rename = "mVc")]
    Mvc,
    #[serde(rename = "mV_thresh")]
    MvThresh,
    #[serde(rename = "mVc_thresh")]
    MvcThresh,
    #[serde(rename = "Lev")]
    Lev,
    #[serde(rename = "LevA")]
    LevA,
}

impl fmt::Display for SamplingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SamplingMethod::Unif => "UNIF",
            SamplingMethod::Mv => "mV",
            SamplingMethod::Mvc => "mVc",
            SamplingMethod::MvThresh => "mV_thresh",
            SamplingMethod::MvcThresh => "mVc_thresh",
            SamplingMethod::Lev => "Lev",
            SamplingMethod::LevA => "LevA",
        };
        f.write_str(s)
    }
}

impl FromStr for SamplingMethod {
    type Err = OsmacError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "unif" | "uniform" => Ok(SamplingMethod::Unif),
            "mv" => Ok(SamplingMethod::Mv),
            "mvc" => Ok(SamplingMethod::Mvc),
            "mv_thresh" => Ok(SamplingMethod::MvThresh),
            "mvc_thresh" => Ok(SamplingMethod::MvcThresh),
            "lev" => Ok(SamplingMethod::Lev),
            "leva" | "lev_a" => Ok(SamplingMethod::LevA),
            other => Err(OsmacError::InvalidParameter(format!("unknown sampling method '{other}'"))),
        }
    }
}

/// A probability vector over the n full-data points.
#[derive(Debug, Clone, Serialize)]
pub struct SamplingWeights {
    probs: Vec<f64>,
    method: SamplingMethod,
    delta: f64,
}

impl SamplingWeights {
    /// Wrap an explicit distribution. Entries must be nonnegative and sum to one.
    pub fn from_probs(probs: Vec<f64>, method: SamplingMethod, delta: f64) -> Result<Self> {
        if probs.is_empty() {
            return Err(OsmacError::InvalidParameter("empty distribution".into()));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(OsmacError::Domain("probabilities must be finite and nonnegative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(OsmacError::Domain(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self { probs, method, delta })
    }

    fn normalize(scores: Vec<f64>, method: SamplingMethod, delta: f64) -> Result<Self> {
        if let Some(bad) = scores.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(OsmacError::Numeric(format!("invalid sampling score {bad}")));
        }
        let total = neumaier_sum(&scores);
        if !(total > 0.0) || !total.is_finite() {
            return Err(OsmacError::Degenerate(format!(
                "{method} scores sum to {total}; every point has zero weight"
            )));
        }
        let probs = scores.into_iter().map(|s| s / total).collect();
        Ok(Self { probs, method, delta })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn method(&self) -> SamplingMethod {
        self.method
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// max over i of (n πᵢ)⁻¹; infinite when some πᵢ = 0.
    pub fn max_inverse_scaled(&self) -> f64 {
        let n = self.probs.len() as f64;
        self.probs.iter().fold(0.0_f64, |acc, p| acc.max(1.0 / (n * p)))
    }
}

fn neumaier_sum(xs: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for &x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

pub fn uniform_probs(n: usize) -> Result<SamplingWeights> {
    if n == 0 {
        return Err(OsmacError::InvalidParameter("uniform distribution over zero points".into()));
    }
    Ok(SamplingWeights {
        probs: vec![1.0 / n as f64; n],
        method: SamplingMethod::Unif,
        delta: 0.0,
    })
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(OsmacError::InvalidParameter(format!("threshold delta must be >= 0, got {delta}")));
    }
    Ok(())
}

/// max(|yᵢ − ψ̇(xᵢᵀβ)|, δ) for every point.
fn floored_residuals(data: &FullData, beta: &DVector<f64>, delta: f64) -> Result<Vec<f64>> {
    Ok(data.residuals(beta)?.iter().map(|e| e.abs().max(delta)).collect())
}

/// ‖M xᵢ‖ for every row, M symmetric.
pub(crate) fn transformed_row_norms(x: &DMatrix<f64>, m: &DMatrix<f64>) -> Vec<f64> {
    linalg::row_norms(&(x * m))
}

/// A-optimal probabilities πᵢ ∝ max(|yᵢ − ψ̇(xᵢᵀβ)|, δ) ‖info⁻¹ xᵢ‖.
///
/// With `beta` the full-data MLE, `info` the full-data information and δ = 0
/// this minimizes the trace of the asymptotic variance; with a pilot estimate
/// and pilot information it gives the practical thresholded version.
pub fn mv_probs(data: &FullData, beta: &DVector<f64>, info: &DMatrix<f64>, delta: f64) -> Result<SamplingWeights> {
    check_delta(delta)?;
    if info.shape() != (data.p(), data.p()) {
        return Err(OsmacError::Dimension(format!(
            "information matrix is {:?}, expected {p}x{p}",
            info.shape(),
            p = data.p()
        )));
    }
    let inv = linalg::spd_inverse(info, "information matrix for mV probabilities")?;
    let resid = floored_residuals(data, beta, delta)?;
    let norms = transformed_row_norms(data.x(), &inv);
    let scores = resid.iter().zip(&norms).map(|(e, g)| e * g).collect();
    let method = if delta > 0.0 { SamplingMethod::MvThresh } else { SamplingMethod::Mv };
    SamplingWeights::normalize(scores, method, delta)
}

/// L-optimal probabilities πᵢ ∝ max(|yᵢ − ψ̇(xᵢᵀβ)|, δ) ‖xᵢ‖. O(np), no inverse.
pub fn mvc_probs(data: &FullData, beta: &DVector<f64>, delta: f64) -> Result<SamplingWeights> {
    check_delta(delta)?;
    let resid = floored_residuals(data, beta, delta)?;
    let norms = linalg::row_norms(data.x());
    let scores = resid.iter().zip(&norms).map(|(e, g)| e * g).collect();
    let method = if delta > 0.0 { SamplingMethod::MvcThresh } else { SamplingMethod::Mvc };
    SamplingWeights::normalize(scores, method, delta)
}

/// Exact leverage scores hᵢ = xᵢᵀ(XᵀX)⁻¹xᵢ of `x`.
pub fn leverage_scores(x: &DMatrix<f64>) -> Result<Vec<f64>> {
    let gram = x.tr_mul(x);
    let chol = linalg::cholesky(&gram, "XᵀX for leverage scores (rank deficient design?)")?;
    // L⁻¹ xᵢ for every row at once: solve L Z = Xᵀ
    let z = chol.l().solve_lower_triangular(&x.transpose()).ok_or_else(|| OsmacError::Singular {
        context: "triangular factor for leverage scores".into(),
    })?;
    Ok(z.column_iter().map(|c| c.norm_squared()).collect())
}

/// Leverage sampling πᵢ = hᵢ / Σh. With `adjusted`, rows are rescaled by
/// √ψ̈(xᵢᵀβ) at `pilot_beta` before computing leverage.
pub fn leverage_probs(data: &FullData, adjusted: bool, pilot_beta: Option<&DVector<f64>>) -> Result<SamplingWeights> {
    let (h, method) = if adjusted {
        let beta = pilot_beta.ok_or_else(|| {
            OsmacError::InvalidParameter("adjusted leverage needs a pilot coefficient vector".into())
        })?;
        if beta.len() != data.p() {
            return Err(OsmacError::Dimension("pilot coefficient length".into()));
        }
        let theta = data.x() * beta;
        let scale: Vec<f64> = theta.iter().map(|t| data.family().variance(*t).sqrt()).collect();
        let xt = linalg::scale_rows(data.x(), &scale);
        (leverage_scores(&xt)?, SamplingMethod::LevA)
    } else {
        (leverage_scores(data.x())?, SamplingMethod::Lev)
    };
    SamplingWeights::normalize(h, method, 0.0)
}

/// Alias table over the points with positive mass: O(n) construction, O(1) per draw.
/// Zero-mass points are left out so rounding can never make them reachable.
#[derive(Debug, Clone)]
pub struct AliasTable {
    support: Vec<usize>,
    index: WeightedAliasIndex<f64>,
    len: usize,
}

impl AliasTable {
    pub fn new(probs: &[f64]) -> Result<Self> {
        if probs.is_empty() {
            return Err(OsmacError::Degenerate("empty distribution".into()));
        }
        let total: f64 = probs.iter().sum();
        if !(total > 0.0) || !total.is_finite() || probs.iter().any(|p| *p < 0.0 || !p.is_finite()) {
            return Err(OsmacError::Degenerate("alias table needs nonnegative weights with positive mass".into()));
        }
        let support: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
        let index = WeightedAliasIndex::new(support.iter().map(|&i| probs[i]).collect())
            .map_err(|e| OsmacError::Degenerate(format!("alias table: {e}")))?;
        Ok(Self {
            support,
            index,
            len: probs.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.support[self.index.sample(rng)]
    }
}

/// r with-replacement draws from a full data set.
#[derive(Debug, Clone)]
pub struct Subsample {
    indices: Vec<usize>,
    probs: Vec<f64>,
    x: DMatrix<f64>,
    y: DVector<f64>,
    source_n: usize,
}

impl Subsample {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// π of each draw, in draw order.
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn source_n(&self) -> usize {
        self.source_n
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn to_weighted(&self, data: &FullData) -> Result<WeightedSample> {
        WeightedSample::new(self.x.clone(), self.y.clone(), self.probs.clone(), self.source_n, data.family())
    }
}

fn draw_indices<R: Rng + ?Sized>(weights: &SamplingWeights, r: usize, rng: &mut R) -> Result<Vec<usize>> {
    let n = weights.len();
    if weights.method() == SamplingMethod::Unif {
        return Ok((0..r).map(|_| rng.random_range(0..n)).collect());
    }
    let table = AliasTable::new(weights.probs())?;
    Ok((0..r).map(|_| table.sample(rng)).collect())
}

/// Draw r points independently with replacement according to `weights`.
pub fn draw_subsample<R: Rng + ?Sized>(
    weights: &SamplingWeights,
    data: &FullData,
    r: usize,
    rng: &mut R,
) -> Result<Subsample> {
    if r == 0 {
        return Err(OsmacError::InvalidParameter("subsample size must be at least 1".into()));
    }
    if weights.len() != data.n() {
        return Err(OsmacError::Dimension(format!(
            "distribution over {} points but data has {}",
            weights.len(),
            data.n()
        )));
    }
    let indices = draw_indices(weights, r, rng)?;
    let p = data.p();
    let x = DMatrix::from_fn(r, p, |i, j| data.x()[(indices[i], j)]);
    let y = DVector::from_fn(r, |i, _| data.y()[indices[i]]);
    let probs = indices.iter().map(|&i| weights.probs()[i]).collect();
    Ok(Subsample {
        indices,
        probs,
        x,
        y,
        source_n: data.n(),
    })
}

/// Multiplicity of each point in r with-replacement draws, drawn as a
/// multinomial through conditional binomials. Same law as counting the
/// indices of [`draw_subsample`], but O(n) regardless of r.
pub fn draw_multiplicities<R: Rng + ?Sized>(weights: &SamplingWeights, r: u64, rng: &mut R) -> Result<Vec<u64>> {
    let mut remaining = r;
    let mut mass_left = 1.0;
    let mut counts = Vec::with_capacity(weights.len());
    for &p in weights.probs() {
        if remaining == 0 || p <= 0.0 {
            counts.push(0);
            continue;
        }
        let q = (p / mass_left).clamp(0.0, 1.0);
        let c = if q >= 1.0 {
            remaining
        } else {
            Binomial::new(remaining, q)
                .map_err(|e| OsmacError::Numeric(format!("binomial draw: {e}")))?
                .sample(rng)
        };
        counts.push(c);
        remaining -= c;
        mass_left -= p;
    }
    if remaining > 0 {
        // rounding left mass unassigned; give it to the last positive point
        if let Some(last) = weights.probs().iter().rposition(|p| *p > 0.0) {
            counts[last] += remaining;
        }
    }
    Ok(counts)
}

/// Compact weighted sample built from multiplicities: one row per distinct point.
pub fn sample_from_multiplicities(
    weights: &SamplingWeights,
    data: &FullData,
    counts: &[u64],
) -> Result<WeightedSample> {
    let idx: Vec<usize> = counts.iter().enumerate().filter(|(_, c)| **c > 0).map(|(i, _)| i).collect();
    if idx.is_empty() {
        return Err(OsmacError::Dimension("no draws".into()));
    }
    let x = DMatrix::from_fn(idx.len(), data.p(), |i, j| data.x()[(idx[i], j)]);
    let y = DVector::from_fn(idx.len(), |i, _| data.y()[idx[i]]);
    let probs = idx.iter().map(|&i| weights.probs()[i]).collect();
    let c = idx.iter().map(|&i| counts[i]).collect();
    WeightedSample::with_counts(x, y, probs, c, data.n(), data.family())
}

/// Asymptotic covariance pieces of the one-step subsample estimator under `probs`:
/// returns (V, V_c) with V_c = (r n²)⁻¹ Σ eᵢ² xᵢxᵢᵀ/πᵢ and V = info⁻¹ V_c info⁻¹,
/// where terms with eᵢ = 0 contribute nothing even if πᵢ = 0.
pub fn asymptotic_variance(
    data: &FullData,
    beta: &DVector<f64>,
    info: &DMatrix<f64>,
    probs: &[f64],
    r: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if probs.len() != data.n() {
        return Err(OsmacError::Dimension("probability vector length".into()));
    }
    let resid = data.residuals(beta)?;
    let n = data.n() as f64;
    let w: Vec<f64> = resid
        .iter()
        .zip(probs)
        .map(|(e, p)| if *e == 0.0 { 0.0 } else { e * e / p })
        .collect();
    let mut vc = linalg::weighted_gram(data.x(), &w) / (r as f64 * n * n);
    linalg::symmetrize(&mut vc);
    let inv = linalg::spd_inverse(info, "information matrix")?;
    let mut v = &inv * &vc * &inv;
    linalg::symmetrize(&mut v);
    Ok((v, vc))
}
