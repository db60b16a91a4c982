//! Full-data and inverse-probability-weighted maximum likelihood for
//! canonical-link GLMs, solved by safeguarded Newton–Raphson.

use nalgebra::{DMatrix, DVector};

use crate::error::{OsmacError, Result};
use crate::expfam::Family;
use crate::linalg;

/// Complete data set: an n×p design, n responses and the response family.
#[derive(Debug, Clone)]
pub struct FullData {
    x: DMatrix<f64>,
    y: DVector<f64>,
    family: Family,
}

impl FullData {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, family: Family) -> Result<Self> {
        let (n, p) = x.shape();
        if p == 0 || n < p {
            return Err(OsmacError::Dimension(format!(
                "need n >= p >= 1, got n={n}, p={p}"
            )));
        }
        if y.len() != n {
            return Err(OsmacError::Dimension(format!(
                "design has {n} rows but response has {} entries",
                y.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(OsmacError::Domain("design matrix has non-finite entries".into()));
        }
        let bad: Vec<usize> = y
            .iter()
            .enumerate()
            .filter(|(_, v)| !family.in_support(**v))
            .map(|(i, _)| i)
            .collect();
        if !bad.is_empty() {
            return Err(OsmacError::Support { rows: bad });
        }
        Ok(Self { x, y, family })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn family(&self) -> Family {
        self.family
    }

    /// Residuals y − ψ̇(xᵀβ) over the full data.
    pub fn residuals(&self, beta: &DVector<f64>) -> Result<DVector<f64>> {
        check_beta(self.p(), beta)?;
        let theta = &self.x * beta;
        let mut r = self.y.clone();
        for (ri, t) in r.iter_mut().zip(theta.iter()) {
            *ri -= self.family.mean(*t);
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(OsmacError::Numeric("non-finite residual".into()));
        }
        Ok(r)
    }
}

/// Anything that defines a (possibly weighted) GLM log-likelihood
/// `Σ wᵢ [yᵢ xᵢᵀβ − ψ(xᵢᵀβ)]`.
pub trait GlmObservations {
    fn design(&self) -> &DMatrix<f64>;
    fn response(&self) -> &DVector<f64>;
    fn family(&self) -> Family;
    /// Per-row likelihood weights, `None` for unit weights.
    fn weights(&self) -> Option<&[f64]>;
    /// Size of the population the information matrix is normalized by.
    fn population_size(&self) -> usize;
}

impl GlmObservations for FullData {
    fn design(&self) -> &DMatrix<f64> {
        &self.x
    }
    fn response(&self) -> &DVector<f64> {
        &self.y
    }
    fn family(&self) -> Family {
        self.family
    }
    fn weights(&self) -> Option<&[f64]> {
        None
    }
    fn population_size(&self) -> usize {
        self.n()
    }
}

/// Subsample rows with the selection probability of every row.
///
/// Each stored row may stand for several identical draws (`counts`). The
/// likelihood weight of a row is `countᵢ / (r πᵢ)` where `r` is the total
/// number of draws, so the weighted log-likelihood is the inverse-probability
/// weighted average over draws.
#[derive(Debug, Clone)]
pub struct WeightedSample {
    x: DMatrix<f64>,
    y: DVector<f64>,
    probs: Vec<f64>,
    counts: Vec<u64>,
    total_draws: u64,
    total_n: usize,
    family: Family,
    weights: Vec<f64>,
}

impl WeightedSample {
    /// One row per draw.
    pub fn new(
        x: DMatrix<f64>,
        y: DVector<f64>,
        probs: Vec<f64>,
        total_n: usize,
        family: Family,
    ) -> Result<Self> {
        let counts = vec![1; x.nrows()];
        Self::with_counts(x, y, probs, counts, total_n, family)
    }

    /// Rows carrying a multiplicity each; the number of draws is the sum of counts.
    pub fn with_counts(
        x: DMatrix<f64>,
        y: DVector<f64>,
        probs: Vec<f64>,
        counts: Vec<u64>,
        total_n: usize,
        family: Family,
    ) -> Result<Self> {
        let m = x.nrows();
        if m == 0 {
            return Err(OsmacError::Dimension("empty subsample".into()));
        }
        if y.len() != m || probs.len() != m || counts.len() != m {
            return Err(OsmacError::Dimension(format!(
                "subsample has {m} rows but {} responses, {} probabilities, {} counts",
                y.len(),
                probs.len(),
                counts.len()
            )));
        }
        if let Some(bad) = probs.iter().find(|p| !(**p > 0.0 && p.is_finite())) {
            return Err(OsmacError::Domain(format!(
                "subsampling probability {bad} is not positive"
            )));
        }
        let total_draws: u64 = counts.iter().sum();
        if total_draws == 0 {
            return Err(OsmacError::Dimension("subsample has no draws".into()));
        }
        if total_n == 0 {
            return Err(OsmacError::Dimension("population size is zero".into()));
        }
        let weights = compute_weights(&probs, &counts, total_draws);
        Ok(Self {
            x,
            y,
            probs,
            counts,
            total_draws,
            total_n,
            family,
            weights,
        })
    }

    /// Pool two samples into one likelihood over all their draws; every draw
    /// keeps the probability it was drawn with.
    pub fn concat(&self, other: &WeightedSample) -> Result<Self> {
        if self.x.ncols() != other.x.ncols() || self.total_n != other.total_n {
            return Err(OsmacError::Dimension("cannot pool samples of different shape".into()));
        }
        if self.family != other.family {
            return Err(OsmacError::InvalidParameter("cannot pool samples of different families".into()));
        }
        let m = self.x.nrows() + other.x.nrows();
        let p = self.x.ncols();
        let mut x = DMatrix::zeros(m, p);
        x.rows_mut(0, self.x.nrows()).copy_from(&self.x);
        x.rows_mut(self.x.nrows(), other.x.nrows()).copy_from(&other.x);
        let y = DVector::from_iterator(m, self.y.iter().chain(other.y.iter()).copied());
        let probs = self.probs.iter().chain(&other.probs).copied().collect();
        let counts = self.counts.iter().chain(&other.counts).copied().collect();
        Self::with_counts(x, y, probs, counts, self.total_n, self.family)
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Number of draws r (rows weighted by their counts).
    pub fn draws(&self) -> u64 {
        self.total_draws
    }

    pub fn rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn total_n(&self) -> usize {
        self.total_n
    }
}

fn compute_weights(probs: &[f64], counts: &[u64], total_draws: u64) -> Vec<f64> {
    let r = total_draws as f64;
    probs
        .iter()
        .zip(counts)
        .map(|(p, c)| *c as f64 / (r * p))
        .collect()
}

impl GlmObservations for WeightedSample {
    fn design(&self) -> &DMatrix<f64> {
        &self.x
    }
    fn response(&self) -> &DVector<f64> {
        &self.y
    }
    fn family(&self) -> Family {
        self.family
    }
    fn weights(&self) -> Option<&[f64]> {
        Some(&self.weights)
    }
    fn population_size(&self) -> usize {
        self.total_n
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub beta: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Max-abs norm of the score at `beta`.
    pub grad_norm: f64,
    /// Observed information at `beta`, normalized by the population size.
    pub info: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub max_iter: usize,
    pub step_tol: f64,
    pub score_tol: f64,
    pub max_halvings: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            step_tol: 1e-8,
            score_tol: 1e-8,
            max_halvings: 30,
        }
    }
}

fn check_beta(p: usize, beta: &DVector<f64>) -> Result<()> {
    if beta.len() != p {
        return Err(OsmacError::Dimension(format!(
            "coefficient vector has length {} but design has {p} columns",
            beta.len()
        )));
    }
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(OsmacError::Numeric("non-finite coefficient".into()));
    }
    Ok(())
}

/// Per-row log-likelihood term y θ − ψ(θ), evaluated stably.
#[inline]
fn loglik_term(family: Family, y: f64, theta: f64) -> f64 {
    match family {
        // y θ − ψ(θ) with y ∈ {0,1} equals −ψ(−θ) when y = 1 and −ψ(θ) when y = 0.
        Family::Bernoulli => -(1.0 - y) * family.psi_unchecked(theta) - y * family.psi_unchecked(-theta),
        _ => y * theta - family.psi_unchecked(theta),
    }
}

/// Σ wᵢ [yᵢ xᵢᵀβ − ψ(xᵢᵀβ)].
pub fn log_likelihood<O: GlmObservations + ?Sized>(obs: &O, beta: &DVector<f64>) -> Result<f64> {
    check_beta(obs.design().ncols(), beta)?;
    let theta = obs.design() * beta;
    let fam = obs.family();
    let y = obs.response();
    let ll = match obs.weights() {
        None => theta.iter().zip(y.iter()).map(|(t, yi)| loglik_term(fam, *yi, *t)).sum(),
        Some(w) => theta
            .iter()
            .zip(y.iter())
            .zip(w)
            .map(|((t, yi), wi)| wi * loglik_term(fam, *yi, *t))
            .sum(),
    };
    Ok(ll)
}

/// Gradient of [`log_likelihood`]: Σ wᵢ {yᵢ − ψ̇(xᵢᵀβ)} xᵢ.
pub fn score<O: GlmObservations + ?Sized>(obs: &O, beta: &DVector<f64>) -> Result<DVector<f64>> {
    check_beta(obs.design().ncols(), beta)?;
    let theta = obs.design() * beta;
    let fam = obs.family();
    let mut resid: DVector<f64> = DVector::from_iterator(
        theta.len(),
        theta.iter().zip(obs.response().iter()).map(|(t, y)| y - fam.mean(*t)),
    );
    if let Some(w) = obs.weights() {
        for (r, wi) in resid.iter_mut().zip(w) {
            *r *= wi;
        }
    }
    let g = obs.design().tr_mul(&resid);
    if g.iter().any(|v| !v.is_finite()) {
        return Err(OsmacError::Numeric("non-finite score".into()));
    }
    Ok(g)
}

/// Σ wᵢ ψ̈(xᵢᵀβ) xᵢxᵢᵀ divided by the population size n.
///
/// For full data this is n⁻¹ Σ ψ̈ xxᵀ; for a subsample of r draws with
/// weights 1/(rπᵢ) it is (nr)⁻¹ Σ ψ̈ xxᵀ/πᵢ.
pub fn observed_information<O: GlmObservations + ?Sized>(
    obs: &O,
    beta: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let h = negative_hessian(obs, beta)?;
    Ok(h / obs.population_size() as f64)
}

fn negative_hessian<O: GlmObservations + ?Sized>(obs: &O, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
    check_beta(obs.design().ncols(), beta)?;
    let theta = obs.design() * beta;
    let fam = obs.family();
    let mut v: Vec<f64> = theta.iter().map(|t| fam.variance(*t)).collect();
    if let Some(w) = obs.weights() {
        for (vi, wi) in v.iter_mut().zip(w) {
            *vi *= wi;
        }
    }
    let h = linalg::weighted_gram(obs.design(), &v);
    if h.iter().any(|x| !x.is_finite()) {
        return Err(OsmacError::Numeric("non-finite Hessian".into()));
    }
    Ok(h)
}

/// Full-data maximum likelihood. Starts from zero unless `init` is given.
pub fn fit_mle(data: &FullData, init: Option<&DVector<f64>>) -> Result<FitResult> {
    let start = init.cloned().unwrap_or_else(|| DVector::zeros(data.p()));
    newton(data, start, &NewtonOptions::default())
}

/// Maximizer of the inverse-probability weighted log-likelihood, warm-started at `init`.
pub fn fit_weighted_mle(sample: &WeightedSample, init: &DVector<f64>) -> Result<FitResult> {
    newton(sample, init.clone(), &NewtonOptions::default())
}

/// Newton–Raphson with step halving and a one-shot ridge fallback.
///
/// Stops when the step is below `step_tol·(1+‖β‖)`, or when the score is
/// below `score_tol·max(1,‖y‖∞)·Σw` and the pending Newton step is below
/// `√step_tol·(1+‖β‖)`. The second guard keeps separated logistic data from
/// being declared converged while the coefficients drift to infinity.
pub fn newton<O: GlmObservations + ?Sized>(
    obs: &O,
    init: DVector<f64>,
    opts: &NewtonOptions,
) -> Result<FitResult> {
    let p = obs.design().ncols();
    check_beta(p, &init)?;
    let y_scale = linalg::inf_norm(obs.response()).max(1.0);
    let weight_total = match obs.weights() {
        None => obs.design().nrows() as f64,
        Some(w) => w.iter().sum(),
    };
    let score_tol = opts.score_tol * y_scale * weight_total;

    let mut beta = init;
    let mut ll = log_likelihood(obs, &beta)?;
    if !ll.is_finite() {
        return Err(OsmacError::Numeric("log-likelihood is not finite at the start value".into()));
    }
    let mut converged = false;
    let mut iterations = 0;

    for iter in 1..=opts.max_iter {
        iterations = iter;
        let grad = score(obs, &beta)?;
        let hess = negative_hessian(obs, &beta)?;
        let step = solve_newton_system(&hess, &grad, iter)?;
        let beta_norm = beta.norm();
        if linalg::inf_norm(&grad) <= score_tol && step.norm() <= opts.step_tol.sqrt() * (1.0 + beta_norm) {
            converged = true;
            iterations = iter - 1;
            break;
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let cand = &beta + &step * t;
            if cand.iter().all(|v| v.is_finite()) {
                if let Ok(ll_c) = log_likelihood(obs, &cand) {
                    if ll_c.is_finite() && ll_c >= ll - 1e-12 * ll.abs().max(1.0) {
                        accepted = Some((cand, ll_c));
                        break;
                    }
                }
            }
            t *= 0.5;
        }
        let Some((cand, ll_c)) = accepted else {
            // No ascent direction left: treat as converged when the score is small.
            converged = linalg::inf_norm(&grad) <= score_tol.sqrt().max(score_tol);
            break;
        };
        let moved = (&cand - &beta).norm();
        beta = cand;
        ll = ll_c;
        if moved <= opts.step_tol * (1.0 + beta_norm) {
            converged = true;
            break;
        }
    }

    let grad = score(obs, &beta)?;
    let info = observed_information(obs, &beta)?;
    Ok(FitResult {
        beta,
        converged,
        iterations,
        grad_norm: linalg::inf_norm(&grad),
        info,
    })
}

fn solve_newton_system(hess: &DMatrix<f64>, grad: &DVector<f64>, iter: usize) -> Result<DVector<f64>> {
    let step = match linalg::spd_solve(hess, grad, "Newton system") {
        Ok(s) => s,
        Err(OsmacError::Singular { .. }) => {
            let p = hess.nrows() as f64;
            let ridge = (1e-10 * hess.trace() / p).max(f64::MIN_POSITIVE);
            let mut damped = hess.clone();
            for i in 0..hess.nrows() {
                damped[(i, i)] += ridge;
            }
            linalg::spd_solve(&damped, grad, "Newton system").map_err(|_| OsmacError::Singular {
                context: format!("Hessian singular at iteration {iter} even after ridge {ridge:e}"),
            })?
        }
        Err(e) => return Err(e),
    };
    if step.iter().any(|v| !v.is_finite()) {
        return Err(OsmacError::Numeric(format!("non-finite Newton step at iteration {iter}")));
    }
    Ok(step)
}
