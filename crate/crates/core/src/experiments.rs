//! Monte-Carlo harness: estimation error versus subsample size, interval
//! coverage, pilot/second-stage allocation, prediction error and timing.
//!
//! Every replicate draws from its own ChaCha20 stream. The stream for
//! replicate k of a cell is
//!
//! ```text
//! seed   = splitmix64(master ^ splitmix64(cell_key))
//! rng    = ChaCha20Rng::seed_from_u64(seed), stream k
//! ```
//!
//! where `cell_key` depends on the experiment kind and the subsample sizes
//! but not on the sampling method. Different methods therefore see the same
//! uniform pilot draws in replicate k (common random numbers), which makes
//! paired comparisons between methods sharp, and raising K leaves the first
//! replicates untouched.
//!
//! Estimation error is ‖β̃ − β̂_MLE‖ (not squared) unless `squared_error` is set;
//! the reported `mse` is its average over successful replicates.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::datagen::{self, CaseSpec, CsvOptions};
use crate::diagnostics;
use crate::error::{OsmacError, Result};
use crate::expfam::Family;
use crate::sampling::{self, SamplingMethod, SamplingWeights, DEFAULT_DELTA};
use crate::solver::{self, FullData};
use crate::stats::{self, PairedTest};
use crate::twostep::{self, SecondStage, TwoStepConfig, TwoStepEstimate};

pub const DEFAULT_FAILURE_THRESHOLD: f64 = 0.1;

const KEY_DATA: u64 = 0x0DA7_A5E7;
const KEY_GRID: u64 = 0x6121_D000;
const KEY_ALLOCATION: u64 = 0xA110_C000;
const KEY_TIMING: u64 = 0x7133_0000;

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn cell_key(kind: u64, r0: usize, r: usize) -> u64 {
    splitmix64(splitmix64(kind ^ r0 as u64) ^ r as u64)
}

/// Random stream of replicate `k` in the cell identified by `cell_key`.
pub fn replicate_rng(master: u64, cell_key: u64, k: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(splitmix64(master ^ splitmix64(cell_key)));
    rng.set_stream(k as u64);
    rng
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Case {
        case_id: u8,
        n: usize,
        p: usize,
        family: Family,
    },
    Csv {
        path: PathBuf,
        response: String,
        covariates: Vec<String>,
        family: Family,
        add_intercept: bool,
        standardize: bool,
        standardize_response: bool,
    },
}

impl DataSource {
    pub fn case(case_id: u8, n: usize, p: usize, family: Family) -> Self {
        DataSource::Case { case_id, n, p, family }
    }

    pub fn family(&self) -> Family {
        match self {
            DataSource::Case { family, .. } | DataSource::Csv { family, .. } => *family,
        }
    }

    /// Build the full data. Synthetic data uses its own stream of `seed`.
    pub fn load(&self, seed: u64) -> Result<FullData> {
        match self {
            DataSource::Case { case_id, n, p, family } => {
                let spec = CaseSpec::with_p(*case_id, *n, *p)?;
                let mut rng = replicate_rng(seed, KEY_DATA, 0);
                datagen::generate_case(&spec, *family, &mut rng)
            }
            DataSource::Csv {
                path,
                response,
                covariates,
                family,
                add_intercept,
                standardize,
                standardize_response,
            } => {
                let mut opts = CsvOptions::new(response.clone(), *family);
                opts.covariates = covariates.clone();
                opts.add_intercept = *add_intercept;
                opts.standardize = *standardize;
                opts.standardize_response = *standardize_response;
                Ok(datagen::load_csv(path, &opts)?.data)
            }
        }
    }

    fn true_beta(&self) -> Option<DVector<f64>> {
        match self {
            DataSource::Case { p, .. } => Some(DVector::from_element(*p, 0.5)),
            DataSource::Csv { .. } => None,
        }
    }
}

/// What a confidence interval is checked against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageTarget {
    /// The full-data MLE, the centre of the conditional limiting distribution.
    Mle,
    /// The coefficient the synthetic data were generated from.
    Truth,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub source: DataSource,
    pub methods: Vec<SamplingMethod>,
    pub r0: usize,
    pub r_grid: Vec<usize>,
    pub k_reps: usize,
    pub seed: u64,
    pub delta: f64,
    pub ci_level: f64,
    /// Zero-based coefficient index for intervals (1 is the second coefficient).
    pub coord: usize,
    pub squared_error: bool,
    pub failure_threshold: f64,
    pub coverage_target: CoverageTarget,
    /// Allocation study: total budget r0 + r.
    pub total: Option<usize>,
    /// Allocation study: values of r0 / (r0 + r).
    pub proportions: Vec<f64>,
    pub warmup: usize,
    pub timing_reps: usize,
    /// Include per-replicate records in serialized reports.
    pub keep_replicates: bool,
}

impl ExperimentConfig {
    pub fn new(source: DataSource) -> Self {
        Self {
            source,
            methods: vec![SamplingMethod::Unif, SamplingMethod::Mv, SamplingMethod::Mvc],
            r0: 200,
            r_grid: vec![300, 500, 1000],
            k_reps: 500,
            seed: 0,
            delta: DEFAULT_DELTA,
            ci_level: 0.95,
            coord: 1,
            squared_error: false,
            failure_threshold: DEFAULT_FAILURE_THRESHOLD,
            coverage_target: CoverageTarget::Mle,
            total: None,
            proportions: (1..=9).map(|i| i as f64 / 10.0).collect(),
            warmup: 5,
            timing_reps: 50,
            keep_replicates: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_reps == 0 {
            return Err(OsmacError::InvalidParameter("K must be at least 1".into()));
        }
        if self.r_grid.is_empty() {
            return Err(OsmacError::InvalidParameter("r grid is empty".into()));
        }
        if self.methods.is_empty() {
            return Err(OsmacError::InvalidParameter("no sampling methods selected".into()));
        }
        for m in &self.methods {
            if !matches!(
                m,
                SamplingMethod::Unif | SamplingMethod::Mv | SamplingMethod::Mvc | SamplingMethod::Lev | SamplingMethod::LevA
            ) {
                return Err(OsmacError::InvalidParameter(format!(
                    "method {m} is not available in experiments (use UNIF, mV, mVc, Lev, LevA)"
                )));
            }
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(OsmacError::InvalidParameter(format!("level must be in (0,1), got {}", self.ci_level)));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(OsmacError::InvalidParameter(format!("delta must be >= 0, got {}", self.delta)));
        }
        if !(0.0..=1.0).contains(&self.failure_threshold) {
            return Err(OsmacError::InvalidParameter("failure threshold must be in [0,1]".into()));
        }
        if self.coverage_target == CoverageTarget::Truth && self.source.true_beta().is_none() {
            return Err(OsmacError::InvalidParameter("true coefficients are unknown for CSV data".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Mse,
    Coverage,
    Allocation,
    Timing,
}

/// Outcome of one replicate; value fields are `None` when it failed.
#[derive(Debug, Clone, Serialize)]
pub struct ReplicateRecord {
    pub k: usize,
    pub ok: bool,
    pub error: Option<String>,
    pub estimation_error: Option<f64>,
    pub mspe: Option<f64>,
    pub beta_coord: Option<f64>,
    pub se_coord: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub covered: Option<bool>,
    pub pilot_attempts: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellTiming {
    pub total_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellReport {
    pub method: SamplingMethod,
    pub r0: usize,
    pub r: usize,
    pub proportion: Option<f64>,
    pub replicates: usize,
    pub successes: usize,
    pub failures: usize,
    /// More than `failure_threshold · K` replicates failed.
    pub flagged: bool,
    pub mse: Option<f64>,
    pub mse_std_error: Option<f64>,
    pub median_error: Option<f64>,
    pub mspe: Option<f64>,
    pub coverage: Option<f64>,
    pub mean_ci_length: Option<f64>,
    /// Mean of the estimated variance of the interval coordinate.
    pub mean_estimated_variance: Option<f64>,
    /// Sample variance of the interval coordinate across replicates.
    pub empirical_variance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw: Option<Vec<ReplicateRecord>>,
    pub timing: CellTiming,
    #[serde(skip)]
    pub records: Vec<ReplicateRecord>,
}

impl CellReport {
    /// Values of `f` over successful replicates, in replicate order.
    pub fn values(&self, f: impl Fn(&ReplicateRecord) -> Option<f64>) -> Vec<f64> {
        self.records.iter().filter_map(f).collect()
    }
}

/// Paired one-sided test that `metric` of (method, r) is below that of
/// (against_method, against_r), over replicates where both succeeded.
#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub metric: String,
    pub method: SamplingMethod,
    pub r: usize,
    pub against_method: SamplingMethod,
    pub against_r: usize,
    pub proportion: Option<f64>,
    pub test: PairedTest,
}

#[derive(Debug, Clone, Serialize)]
pub struct DataSummary {
    pub n: usize,
    pub p: usize,
    pub family: Family,
    pub kappa: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub method: String,
    pub r0: usize,
    pub r: usize,
    pub warmup: usize,
    pub reps: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

/// Wall-clock measurements; excluded when comparing reports for reproducibility.
#[derive(Debug, Clone, Serialize)]
pub struct RunTiming {
    pub total_ms: f64,
    pub full_fit_ms: f64,
    pub benchmarks: Vec<BenchRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub kind: ExperimentKind,
    pub config: ExperimentConfig,
    pub data: DataSummary,
    pub beta_mle: Vec<f64>,
    pub cells: Vec<CellReport>,
    pub comparisons: Vec<Comparison>,
    pub timing: RunTiming,
}

impl ExperimentReport {
    pub fn cell(&self, method: SamplingMethod, r: usize) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.method == method && c.r == r)
    }

    pub fn comparison(&self, metric: &str, method: SamplingMethod, r: usize) -> Option<&Comparison> {
        self.comparisons
            .iter()
            .find(|c| c.metric == metric && c.method == method && c.r == r)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| OsmacError::Internal(e.to_string()))
    }

    /// Aligned-column text table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:?} experiment: n={} p={} family={} kappa={:.3} seed={} K={}",
            self.kind, self.data.n, self.data.p, self.data.family, self.data.kappa, self.config.seed, self.config.k_reps
        );
        let beta: Vec<String> = self.beta_mle.iter().map(|b| format!("{b:.5}")).collect();
        let _ = writeln!(s, "full-data MLE: [{}]", beta.join(", "));
        if !self.cells.is_empty() {
            let _ = writeln!(
                s,
                "{:<6} {:>6} {:>6} {:>6} {:>5} {:>5} {:>12} {:>12} {:>9} {:>10} {:>5}",
                "method", "r0", "r", "prop", "ok", "fail", "mse", "mspe", "coverage", "ci_length", "flag"
            );
            let opt = |v: Option<f64>, prec: usize| v.map_or("-".to_string(), |x| format!("{x:.prec$}"));
            for c in &self.cells {
                let _ = writeln!(
                    s,
                    "{:<6} {:>6} {:>6} {:>6} {:>5} {:>5} {:>12} {:>12} {:>9} {:>10} {:>5}",
                    c.method.to_string(),
                    c.r0,
                    c.r,
                    opt(c.proportion, 2),
                    c.successes,
                    c.failures,
                    opt(c.mse, 6),
                    opt(c.mspe, 6),
                    opt(c.coverage, 3),
                    opt(c.mean_ci_length, 5),
                    if c.flagged { "yes" } else { "" }
                );
            }
        }
        if !self.comparisons.is_empty() {
            let _ = writeln!(s, "paired one-sided tests (H1: first < second)");
            for c in &self.comparisons {
                let _ = writeln!(
                    s,
                    "  {:<18} {:>5}@{:<6} < {:>5}@{:<6} mean diff {:>12.4e}  p = {:.3e}",
                    c.metric,
                    c.method.to_string(),
                    c.r,
                    c.against_method.to_string(),
                    c.against_r,
                    c.test.mean_diff,
                    c.test.p_value
                );
            }
        }
        if !self.timing.benchmarks.is_empty() {
            let _ = writeln!(
                s,
                "{:<6} {:>6} {:>6} {:>5} {:>12} {:>12} {:>12}",
                "method", "r0", "r", "reps", "mean_ms", "median_ms", "min_ms"
            );
            for b in &self.timing.benchmarks {
                let _ = writeln!(
                    s,
                    "{:<6} {:>6} {:>6} {:>5} {:>12.3} {:>12.3} {:>12.3}",
                    b.method, b.r0, b.r, b.reps, b.mean_ms, b.median_ms, b.min_ms
                );
            }
        }
        s
    }

    /// Per-replicate values of every cell as CSV, for external plotting.
    pub fn write_replicates_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        w.write_record([
            "method",
            "r0",
            "r",
            "proportion",
            "k",
            "ok",
            "error",
            "estimation_error",
            "mspe",
            "beta_coord",
            "se_coord",
            "ci_lo",
            "ci_hi",
            "covered",
            "pilot_attempts",
        ])?;
        for c in &self.cells {
            for rec in &c.records {
                w.write_record([
                    c.method.to_string(),
                    c.r0.to_string(),
                    c.r.to_string(),
                    fmt_opt(c.proportion),
                    rec.k.to_string(),
                    rec.ok.to_string(),
                    rec.error.clone().unwrap_or_default(),
                    fmt_opt(rec.estimation_error),
                    fmt_opt(rec.mspe),
                    fmt_opt(rec.beta_coord),
                    fmt_opt(rec.se_coord),
                    fmt_opt(rec.ci_lo),
                    fmt_opt(rec.ci_hi),
                    rec.covered.map(|b| b.to_string()).unwrap_or_default(),
                    rec.pilot_attempts.map(|a| a.to_string()).unwrap_or_default(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

/// n⁻¹ Σ (yᵢ − ψ̇(xᵢᵀβ))².
pub fn compute_mspe(data: &FullData, beta: &DVector<f64>) -> Result<f64> {
    let e = data.residuals(beta)?;
    let v = e.norm_squared() / data.n() as f64;
    if !v.is_finite() {
        return Err(OsmacError::Numeric("prediction error overflowed".into()));
    }
    Ok(v)
}

/// Everything a replicate needs that does not change between replicates.
struct Prepared {
    data: FullData,
    beta_mle: DVector<f64>,
    target: DVector<f64>,
    uniform: SamplingWeights,
    leverage: Option<SamplingWeights>,
    summary: DataSummary,
    full_fit_ms: f64,
}

fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate()?;
    let data = config.source.load(config.seed)?;
    if config.coord >= data.p() {
        return Err(OsmacError::InvalidParameter(format!(
            "interval coordinate {} out of range for p={}",
            config.coord,
            data.p()
        )));
    }
    let start = Instant::now();
    let fit = solver::fit_mle(&data, None)?;
    let full_fit_ms = start.elapsed().as_secs_f64() * 1e3;
    if !fit.converged {
        return Err(OsmacError::FitFailure(format!(
            "full-data fit did not converge after {} iterations",
            fit.iterations
        )));
    }
    let target = match config.coverage_target {
        CoverageTarget::Mle => fit.beta.clone(),
        CoverageTarget::Truth => config.source.true_beta().expect("checked in validate"),
    };
    let leverage = if config.methods.contains(&SamplingMethod::Lev) {
        Some(sampling::leverage_probs(&data, false, None)?)
    } else {
        None
    };
    let summary = DataSummary {
        n: data.n(),
        p: data.p(),
        family: data.family(),
        kappa: diagnostics::spectral_summary(data.x())?.kappa,
    };
    Ok(Prepared {
        uniform: sampling::uniform_probs(data.n())?,
        data,
        beta_mle: fit.beta,
        target,
        leverage,
        summary,
        full_fit_ms,
    })
}

fn second_stage(method: SamplingMethod) -> Option<SecondStage> {
    match method {
        SamplingMethod::Mv => Some(SecondStage::Mv),
        SamplingMethod::Mvc => Some(SecondStage::Mvc),
        SamplingMethod::LevA => Some(SecondStage::AdjustedLeverage),
        _ => None,
    }
}

/// One estimate with the given budget. UNIF and Lev use r0 + r draws from a
/// fixed distribution; mV, mVc and LevA run the two-step algorithm, which
/// degenerates to the uniform pilot estimator when r = 0.
fn estimate_once(
    prep: &Prepared,
    config: &ExperimentConfig,
    method: SamplingMethod,
    r0: usize,
    r: usize,
    rng: &mut ChaCha20Rng,
) -> Result<TwoStepEstimate> {
    let data = &prep.data;
    match second_stage(method) {
        None => {
            let weights = match method {
                SamplingMethod::Lev => prep.leverage.as_ref().ok_or_else(|| {
                    OsmacError::Internal("leverage probabilities were not prepared".into())
                })?,
                _ => &prep.uniform,
            };
            twostep::one_step_estimate(data, weights, r0 + r, rng)
        }
        Some(_) if r == 0 => twostep::one_step_estimate(data, &prep.uniform, r0, rng),
        Some(stage) => {
            let mut cfg = TwoStepConfig::new(r0, r, stage);
            cfg.delta = config.delta;
            cfg.ci_level = config.ci_level;
            twostep::two_step_estimate(data, &cfg, rng)
        }
    }
}

fn replicate(
    prep: &Prepared,
    config: &ExperimentConfig,
    method: SamplingMethod,
    r0: usize,
    r: usize,
    key: u64,
    k: usize,
) -> ReplicateRecord {
    let mut rng = replicate_rng(config.seed, key, k);
    let outcome = estimate_once(prep, config, method, r0, r, &mut rng).and_then(|est| {
        let diff = &est.beta - &prep.beta_mle;
        let err = if config.squared_error { diff.norm_squared() } else { diff.norm() };
        let mspe = compute_mspe(&prep.data, &est.beta)?;
        let (lo, hi) = twostep::confidence_interval(&est, config.coord, config.ci_level)?;
        let t = prep.target[config.coord];
        Ok(ReplicateRecord {
            k,
            ok: true,
            error: None,
            estimation_error: Some(err),
            mspe: Some(mspe),
            beta_coord: Some(est.beta[config.coord]),
            se_coord: Some(est.std_error(config.coord)?),
            ci_lo: Some(lo),
            ci_hi: Some(hi),
            covered: Some(lo <= t && t <= hi),
            pilot_attempts: Some(est.pilot_attempts),
        })
    });
    outcome.unwrap_or_else(|e| ReplicateRecord {
        k,
        ok: false,
        error: Some(e.to_string()),
        estimation_error: None,
        mspe: None,
        beta_coord: None,
        se_coord: None,
        ci_lo: None,
        ci_hi: None,
        covered: None,
        pilot_attempts: None,
    })
}

fn run_cell(
    prep: &Prepared,
    config: &ExperimentConfig,
    method: SamplingMethod,
    r0: usize,
    r: usize,
    key: u64,
    proportion: Option<f64>,
) -> CellReport {
    let start = Instant::now();
    let records: Vec<ReplicateRecord> = (0..config.k_reps)
        .into_par_iter()
        .map(|k| replicate(prep, config, method, r0, r, key, k))
        .collect();
    let total_ms = start.elapsed().as_secs_f64() * 1e3;
    summarize(config, method, r0, r, proportion, records, total_ms)
}

fn summarize(
    config: &ExperimentConfig,
    method: SamplingMethod,
    r0: usize,
    r: usize,
    proportion: Option<f64>,
    records: Vec<ReplicateRecord>,
    total_ms: f64,
) -> CellReport {
    let ok: Vec<&ReplicateRecord> = records.iter().filter(|r| r.ok).collect();
    let successes = ok.len();
    let failures = records.len() - successes;
    let pick = |f: &dyn Fn(&ReplicateRecord) -> Option<f64>| -> Vec<f64> { ok.iter().filter_map(|r| f(r)).collect() };
    let errs = pick(&|r| r.estimation_error);
    let nonempty = |v: &[f64], f: fn(&[f64]) -> f64| if v.is_empty() { None } else { Some(f(v)) };
    let lengths = pick(&|r| Some(r.ci_hi? - r.ci_lo?));
    let vars = pick(&|r| r.se_coord.map(|s| s * s));
    let coords = pick(&|r| r.beta_coord);
    let covered = ok.iter().filter(|r| r.covered == Some(true)).count();
    CellReport {
        method,
        r0,
        r,
        proportion,
        replicates: records.len(),
        successes,
        failures,
        flagged: failures as f64 > config.failure_threshold * records.len() as f64,
        mse: nonempty(&errs, stats::mean),
        mse_std_error: if errs.len() > 1 { Some((stats::variance(&errs) / errs.len() as f64).sqrt()) } else { None },
        median_error: nonempty(&errs, stats::median),
        mspe: nonempty(&pick(&|r| r.mspe), stats::mean),
        coverage: if successes > 0 { Some(covered as f64 / successes as f64) } else { None },
        mean_ci_length: nonempty(&lengths, stats::mean),
        mean_estimated_variance: nonempty(&vars, stats::mean),
        empirical_variance: if coords.len() > 1 { Some(stats::variance(&coords)) } else { None },
        raw: if config.keep_replicates { Some(records.clone()) } else { None },
        timing: CellTiming { total_ms },
        records,
    }
}

/// Paired test of `metric(a) < metric(b)` over replicate indices where both succeeded.
fn compare(
    metric: &str,
    a: &CellReport,
    b: &CellReport,
    f: impl Fn(&ReplicateRecord) -> Option<f64>,
) -> Option<Comparison> {
    let mut xa = Vec::new();
    let mut xb = Vec::new();
    for (ra, rb) in a.records.iter().zip(&b.records) {
        if let (Some(va), Some(vb)) = (f(ra), f(rb)) {
            xa.push(va);
            xb.push(vb);
        }
    }
    let test = stats::paired_one_sided(&xa, &xb).ok()?;
    Some(Comparison {
        metric: metric.to_string(),
        method: a.method,
        r: a.r,
        against_method: b.method,
        against_r: b.r,
        proportion: a.proportion,
        test,
    })
}

fn ci_length(r: &ReplicateRecord) -> Option<f64> {
    Some(r.ci_hi? - r.ci_lo?)
}

fn versus_uniform(cells: &[CellReport], same_cell: impl Fn(&CellReport, &CellReport) -> bool) -> Vec<Comparison> {
    let mut out = Vec::new();
    for c in cells.iter().filter(|c| c.method != SamplingMethod::Unif) {
        if let Some(u) = cells.iter().find(|u| u.method == SamplingMethod::Unif && same_cell(c, u)) {
            out.extend(compare("estimation_error", c, u, |r| r.estimation_error));
        }
    }
    out
}

fn grid_cells(prep: &Prepared, config: &ExperimentConfig) -> Vec<CellReport> {
    let mut cells = Vec::new();
    for &r in &config.r_grid {
        let key = cell_key(KEY_GRID, config.r0, r);
        for &m in &config.methods {
            cells.push(run_cell(prep, config, m, config.r0, r, key, None));
        }
    }
    cells
}

fn assemble(
    kind: ExperimentKind,
    config: &ExperimentConfig,
    prep: Prepared,
    cells: Vec<CellReport>,
    comparisons: Vec<Comparison>,
    start: Instant,
    benchmarks: Vec<BenchRow>,
) -> ExperimentReport {
    ExperimentReport {
        kind,
        config: config.clone(),
        data: prep.summary,
        beta_mle: prep.beta_mle.iter().copied().collect(),
        cells,
        comparisons,
        timing: RunTiming {
            total_ms: start.elapsed().as_secs_f64() * 1e3,
            full_fit_ms: prep.full_fit_ms,
            benchmarks,
        },
    }
}

/// K replicates per (method, r); UNIF and Lev get r0 + r draws so every
/// method uses the same budget. Reports the error against the full-data MLE
/// and paired tests of each method against UNIF.
pub fn run_mse_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let start = Instant::now();
    let prep = prepare(config)?;
    let cells = grid_cells(&prep, config);
    let comparisons = versus_uniform(&cells, |a, b| a.r == b.r);
    Ok(assemble(ExperimentKind::Mse, config, prep, cells, comparisons, start, Vec::new()))
}

/// As [`run_mse_experiment`], additionally testing that the mean interval
/// length shrinks between consecutive grid values of r for every method.
pub fn run_coverage_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let start = Instant::now();
    let prep = prepare(config)?;
    let cells = grid_cells(&prep, config);
    let mut comparisons = versus_uniform(&cells, |a, b| a.r == b.r);
    let mut grid = config.r_grid.clone();
    grid.sort_unstable();
    grid.dedup();
    for &m in &config.methods {
        for w in grid.windows(2) {
            let lo = cells.iter().find(|c| c.method == m && c.r == w[0]);
            let hi = cells.iter().find(|c| c.method == m && c.r == w[1]);
            if let (Some(lo), Some(hi)) = (lo, hi) {
                comparisons.extend(compare("ci_length", hi, lo, ci_length));
            }
        }
    }
    Ok(assemble(ExperimentKind::Coverage, config, prep, cells, comparisons, start, Vec::new()))
}

/// Fixed total budget split as r0 = round(q·total), r = total − r0 for every
/// proportion q = r0/(r0 + r). A proportion of 1 leaves no second stage and
/// gives the uniform pilot estimator itself.
pub fn run_allocation_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let start = Instant::now();
    let total = config
        .total
        .ok_or_else(|| OsmacError::InvalidParameter("allocation study needs a total budget".into()))?;
    if config.proportions.is_empty() {
        return Err(OsmacError::InvalidParameter("proportion grid is empty".into()));
    }
    if let Some(q) = config.proportions.iter().find(|q| !(**q > 0.0 && **q <= 1.0)) {
        return Err(OsmacError::InvalidParameter(format!("proportion {q} is outside (0,1]")));
    }
    let prep = prepare(config)?;
    let mut cells = Vec::new();
    for &q in &config.proportions {
        let r0 = (q * total as f64).round() as usize;
        if r0 < prep.data.p() + 1 {
            return Err(OsmacError::InvalidParameter(format!(
                "proportion {q} of {total} gives a pilot of {r0} < p+1"
            )));
        }
        let r = total - r0.min(total);
        let key = cell_key(KEY_ALLOCATION, r0, r);
        for &m in &config.methods {
            cells.push(run_cell(&prep, config, m, r0, r, key, Some(q)));
        }
    }
    let comparisons = versus_uniform(&cells, |a, b| a.proportion == b.proportion);
    Ok(assemble(ExperimentKind::Allocation, config, prep, cells, comparisons, start, Vec::new()))
}

fn bench(
    label: &str,
    r0: usize,
    r: usize,
    config: &ExperimentConfig,
    mut f: impl FnMut(usize) -> Result<()>,
) -> Result<BenchRow> {
    for i in 0..config.warmup {
        f(i)?;
    }
    let mut ms = Vec::with_capacity(config.timing_reps);
    for i in 0..config.timing_reps {
        let t = Instant::now();
        f(config.warmup + i)?;
        ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(BenchRow {
        method: label.to_string(),
        r0,
        r,
        warmup: config.warmup,
        reps: config.timing_reps,
        mean_ms: stats::mean(&ms),
        median_ms: stats::median(&ms),
        min_ms: ms.iter().copied().fold(f64::INFINITY, f64::min),
        max_ms: ms.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Wall time of each method end to end (probabilities, draws, fits) for every
/// r in the grid, plus the full-data fit. Runs sequentially on the calling thread.
pub fn run_timing_benchmark(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let start = Instant::now();
    if config.timing_reps == 0 {
        return Err(OsmacError::InvalidParameter("timing needs at least one repetition".into()));
    }
    let prep = prepare(config)?;
    let mut rows = Vec::new();
    rows.push(bench("FULL", 0, prep.data.n(), config, |_| {
        solver::fit_mle(&prep.data, None).map(|_| ())
    })?);
    for &r in &config.r_grid {
        let key = cell_key(KEY_TIMING, config.r0, r);
        for &m in &config.methods {
            rows.push(bench(&m.to_string(), config.r0, r, config, |i| {
                let mut rng = replicate_rng(config.seed, key, i);
                match m {
                    // leverage scores are part of the cost of the method
                    SamplingMethod::Lev => {
                        let w = sampling::leverage_probs(&prep.data, false, None)?;
                        twostep::one_step_estimate(&prep.data, &w, config.r0 + r, &mut rng).map(|_| ())
                    }
                    _ => estimate_once(&prep, config, m, config.r0, r, &mut rng).map(|_| ()),
                }
            })?);
        }
    }
    Ok(assemble(ExperimentKind::Timing, config, prep, Vec::new(), Vec::new(), start, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(case: u8) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(DataSource::case(case, 2000, 7, Family::Poisson));
        c.r0 = 100;
        c.r_grid = vec![200, 400];
        c.k_reps = 20;
        c.seed = 11;
        c
    }

    #[test]
    fn mspe_examples() {
        let x = nalgebra::DMatrix::from_element(2, 1, 1.0);
        let d = FullData::new(x, DVector::from_vec(vec![0.0, 2.0]), Family::Poisson).unwrap();
        assert!((compute_mspe(&d, &DVector::zeros(1)).unwrap() - 1.0).abs() < 1e-15);
        let x = nalgebra::DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        let g = FullData::new(x, DVector::from_vec(vec![2.0, 4.0, 6.0]), Family::Gaussian).unwrap();
        assert_eq!(compute_mspe(&g, &DVector::from_vec(vec![2.0])).unwrap(), 0.0);
    }

    #[test]
    fn replicate_streams_are_stable_in_k() {
        use rand::Rng;
        let key = cell_key(KEY_GRID, 200, 500);
        let a: u64 = replicate_rng(3, key, 7).random();
        let b: u64 = replicate_rng(3, key, 7).random();
        let c: u64 = replicate_rng(3, key, 8).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(cell_key(KEY_GRID, 200, 500), cell_key(KEY_GRID, 500, 200));
    }

    #[test]
    fn accounting_and_reproducibility() {
        let cfg = small(1);
        let a = run_mse_experiment(&cfg).unwrap();
        assert_eq!(a.cells.len(), 6);
        for c in &a.cells {
            assert_eq!(c.successes + c.failures, cfg.k_reps);
            assert!(c.mse.unwrap() > 0.0);
        }
        let b = run_mse_experiment(&cfg).unwrap();
        for (x, y) in a.cells.iter().zip(&b.cells) {
            assert_eq!(x.mse, y.mse);
            assert_eq!(x.coverage, y.coverage);
        }
        assert_eq!(a.comparisons.len(), 4);
    }

    #[test]
    fn raising_k_keeps_earlier_replicates() {
        let mut cfg = small(1);
        cfg.methods = vec![SamplingMethod::Mvc];
        cfg.r_grid = vec![200];
        let a = run_mse_experiment(&cfg).unwrap();
        cfg.k_reps = 30;
        let b = run_mse_experiment(&cfg).unwrap();
        for (x, y) in a.cells[0].records.iter().zip(&b.cells[0].records) {
            assert_eq!(x.estimation_error, y.estimation_error);
        }
    }

    #[test]
    fn full_proportion_equals_pilot_estimator() {
        let mut cfg = small(4);
        cfg.methods = vec![SamplingMethod::Unif, SamplingMethod::Mv, SamplingMethod::Mvc];
        cfg.total = Some(300);
        cfg.proportions = vec![0.2, 1.0];
        cfg.k_reps = 10;
        let rep = run_allocation_experiment(&cfg).unwrap();
        let at = |m: SamplingMethod, q: f64| {
            rep.cells
                .iter()
                .find(|c| c.method == m && c.proportion == Some(q))
                .unwrap()
        };
        let u = at(SamplingMethod::Unif, 1.0);
        for m in [SamplingMethod::Mv, SamplingMethod::Mvc] {
            let c = at(m, 1.0);
            assert_eq!((c.r0, c.r), (300, 0));
            for (x, y) in c.records.iter().zip(&u.records) {
                assert_eq!(x.estimation_error, y.estimation_error);
            }
        }
    }

    #[test]
    fn leverage_methods_run() {
        let mut cfg = small(3);
        cfg.methods = vec![SamplingMethod::Lev, SamplingMethod::LevA];
        cfg.r_grid = vec![200];
        cfg.k_reps = 5;
        let rep = run_coverage_experiment(&cfg).unwrap();
        assert!(rep.cells.iter().all(|c| c.successes == 5));
    }

    #[test]
    fn config_validation() {
        let mut cfg = small(1);
        cfg.k_reps = 0;
        assert!(run_mse_experiment(&cfg).is_err());
        let mut cfg = small(1);
        cfg.methods = vec![SamplingMethod::MvThresh];
        assert!(cfg.validate().is_err());
        let mut cfg = small(1);
        cfg.coord = 7;
        assert!(run_mse_experiment(&cfg).is_err());
        let cfg = small(1);
        assert!(run_allocation_experiment(&cfg).is_err());
    }

    #[test]
    fn replicate_csv_has_one_line_per_replicate() {
        let mut cfg = small(1);
        cfg.k_reps = 4;
        cfg.methods = vec![SamplingMethod::Unif];
        let rep = run_mse_experiment(&cfg).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        rep.write_replicates_csv(f.path()).unwrap();
        let text = std::fs::read_to_string(f.path()).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 4);
        assert!(rep.to_text().contains("UNIF"));
    }
}
