use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use rand_chacha::ChaCha20Rng;
use rand::SeedableRng;
use serde::Serialize;

use osmac::diagnostics;
use osmac::experiments::{
    self, CoverageTarget, DataSource, ExperimentConfig, ExperimentReport,
};
use osmac::sampling::{self, SamplingMethod, DEFAULT_DELTA};
use osmac::solver;
use osmac::twostep::{self, SecondStage, TwoStepConfig};
use osmac::{Family, FullData, OsmacError, Result};

#[derive(Parser)]
#[command(name = "osmac", version, about = "Optimal subsampling estimators for generalized linear models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimation error against the full-data MLE over a grid of subsample sizes
    Mse(ExperimentArgs),
    /// Coverage and length of confidence intervals over a grid of subsample sizes
    Coverage(ExperimentArgs),
    /// Error for different splits r0/(r0+r) of a fixed total budget
    Allocation(ExperimentArgs),
    /// Wall time of each method and of the full-data fit
    Timing(ExperimentArgs),
    /// Full-data fit, or a single two-step fit with --r
    Fit(FitArgs),
    /// Subsampling probabilities of one method
    Probs(ProbsArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Synthetic design case (1-4); ignored with --csv
    #[arg(long, default_value_t = 1)]
    case: u8,
    /// Read data from a CSV file with a header line
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Response column of the CSV file
    #[arg(long, default_value = "y")]
    response: String,
    /// Comma-separated covariate columns (default: all but the response)
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    /// Prepend an intercept column to CSV data
    #[arg(long)]
    intercept: bool,
    /// Standardize CSV covariates
    #[arg(long)]
    standardize: bool,
    /// Standardize a Gaussian CSV response
    #[arg(long)]
    standardize_response: bool,
    #[arg(long, default_value = "poisson")]
    family: Family,
    /// Full-data size for synthetic cases
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    /// Number of covariates for synthetic cases
    #[arg(long, default_value_t = 7)]
    p: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl DataArgs {
    fn source(&self) -> DataSource {
        match &self.csv {
            Some(path) => DataSource::Csv {
                path: path.clone(),
                response: self.response.clone(),
                covariates: self.covariates.clone(),
                family: self.family,
                add_intercept: self.intercept,
                standardize: self.standardize,
                standardize_response: self.standardize_response,
            },
            None => DataSource::case(self.case, self.n, self.p, self.family),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Text,
}

#[derive(Args, Clone)]
struct OutputArgs {
    /// Write the report here instead of standard output
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report format (default: json with --out, text otherwise)
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Mle,
    Truth,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    output: OutputArgs,
    /// Pilot subsample size
    #[arg(long, default_value_t = 200)]
    r0: usize,
    /// Comma-separated second-stage sizes
    #[arg(long, value_delimiter = ',', default_value = "300,500,1000")]
    r: Vec<usize>,
    /// Replicates per cell
    #[arg(long, default_value_t = 500)]
    k_reps: usize,
    /// Comma-separated methods from UNIF, mV, mVc, Lev, LevA
    #[arg(long, value_delimiter = ',', default_value = "UNIF,mV,mVc")]
    methods: Vec<SamplingMethod>,
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    delta: f64,
    /// Confidence level of the intervals
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Zero-based coefficient the intervals are built for
    #[arg(long, default_value_t = 1)]
    coord: usize,
    /// Use the squared norm for the estimation error
    #[arg(long)]
    squared: bool,
    /// Value the intervals are checked against
    #[arg(long, value_enum, default_value = "mle")]
    target: Target,
    /// Allocation: total budget r0 + r
    #[arg(long)]
    total: Option<usize>,
    /// Allocation: comma-separated proportions r0/(r0+r)
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
    proportions: Vec<f64>,
    /// Timing: warmup runs per method
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    /// Timing: measured runs per method
    #[arg(long, default_value_t = 50)]
    reps: usize,
    /// Write every replicate as a CSV row here
    #[arg(long)]
    raw_csv: Option<PathBuf>,
    /// Include every replicate in the JSON report
    #[arg(long)]
    keep_replicates: bool,
}

impl ExperimentArgs {
    fn config(&self) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(self.data.source());
        c.methods = self.methods.clone();
        c.r0 = self.r0;
        c.r_grid = self.r.clone();
        c.k_reps = self.k_reps;
        c.seed = self.data.seed;
        c.delta = self.delta;
        c.ci_level = self.level;
        c.coord = self.coord;
        c.squared_error = self.squared;
        c.coverage_target = match self.target {
            Target::Mle => CoverageTarget::Mle,
            Target::Truth => CoverageTarget::Truth,
        };
        c.total = self.total;
        c.proportions = self.proportions.clone();
        c.warmup = self.warmup;
        c.timing_reps = self.reps;
        c.keep_replicates = self.keep_replicates;
        c
    }
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    output: OutputArgs,
    /// Run the two-step estimator with this second-stage size instead of the full-data fit
    #[arg(long)]
    r: Option<usize>,
    #[arg(long, default_value_t = 200)]
    r0: usize,
    /// Second-stage method: mV, mVc, LevA or UNIF
    #[arg(long, default_value = "mV")]
    method: SecondStage,
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    delta: f64,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
}

#[derive(Args)]
struct ProbsArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    output: OutputArgs,
    /// One of UNIF, mV, mVc, Lev, LevA
    #[arg(long, default_value = "mV")]
    method: SamplingMethod,
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    delta: f64,
    /// Evaluate at the full-data MLE instead of a uniform pilot estimate
    #[arg(long)]
    oracle: bool,
    /// Pilot size when not in oracle mode
    #[arg(long, default_value_t = 200)]
    r0: usize,
}

fn emit<T: Serialize>(output: &OutputArgs, value: &T, text: impl FnOnce() -> String) -> Result<()> {
    let format = output.format.unwrap_or(if output.out.is_some() { Format::Json } else { Format::Text });
    let body = match format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(value).map_err(|e| OsmacError::Internal(e.to_string()))?;
            s.push('\n');
            s
        }
        Format::Text => text(),
    };
    match &output.out {
        Some(path) => fs::write(path, body)?,
        None => print!("{body}"),
    }
    Ok(())
}

fn run_experiment(args: &ExperimentArgs, run: fn(&ExperimentConfig) -> Result<ExperimentReport>) -> Result<()> {
    let report = run(&args.config())?;
    if let Some(path) = &args.raw_csv {
        report.write_replicates_csv(path)?;
    }
    for c in report.cells.iter().filter(|c| c.flagged) {
        eprintln!(
            "warning: {} at r0={} r={} failed in {} of {} replicates",
            c.method, c.r0, c.r, c.failures, c.replicates
        );
    }
    emit(&args.output, &report, || report.to_text())
}

#[derive(Serialize)]
struct FitReport {
    n: usize,
    p: usize,
    family: Family,
    kappa: f64,
    beta: Vec<f64>,
    converged: bool,
    iterations: usize,
    grad_norm: f64,
    std_errors: Option<Vec<f64>>,
    intervals: Option<Vec<(f64, f64)>>,
    r0: Option<usize>,
    r: Option<usize>,
    method: Option<SecondStage>,
}

impl FitReport {
    fn text(&self) -> String {
        let mut s = format!(
            "n={} p={} family={} kappa={:.4} converged={} iterations={}\n",
            self.n, self.p, self.family, self.kappa, self.converged, self.iterations
        );
        for (j, b) in self.beta.iter().enumerate() {
            s.push_str(&format!("beta[{j}] = {b:>12.6}"));
            if let (Some(se), Some(ci)) = (&self.std_errors, &self.intervals) {
                s.push_str(&format!("  se {:>10.6}  ci [{:.6}, {:.6}]", se[j], ci[j].0, ci[j].1));
            }
            s.push('\n');
        }
        s
    }
}

fn run_fit(args: &FitArgs) -> Result<()> {
    let data = args.data.source().load(args.data.seed)?;
    let kappa = diagnostics::spectral_summary(data.x())?.kappa;
    let report = match args.r {
        None => {
            let fit = solver::fit_mle(&data, None)?;
            FitReport {
                n: data.n(),
                p: data.p(),
                family: data.family(),
                kappa,
                beta: fit.beta.iter().copied().collect(),
                converged: fit.converged,
                iterations: fit.iterations,
                grad_norm: fit.grad_norm,
                std_errors: None,
                intervals: None,
                r0: None,
                r: None,
                method: None,
            }
        }
        Some(r) => {
            let mut cfg = TwoStepConfig::new(args.r0, r, args.method);
            cfg.delta = args.delta;
            cfg.ci_level = args.level;
            let mut rng = experiments::replicate_rng(args.data.seed, experiments::cell_key(0, args.r0, r), 0);
            let est = twostep::two_step_estimate(&data, &cfg, &mut rng)?;
            let p = data.p();
            let se = (0..p).map(|j| est.std_error(j)).collect::<Result<Vec<_>>>()?;
            let ci = (0..p)
                .map(|j| twostep::confidence_interval(&est, j, args.level))
                .collect::<Result<Vec<_>>>()?;
            FitReport {
                n: data.n(),
                p,
                family: data.family(),
                kappa,
                beta: est.beta.iter().copied().collect(),
                converged: est.converged,
                iterations: est.iterations,
                grad_norm: solver::score(&est.sample, &est.beta)?.amax(),
                std_errors: Some(se),
                intervals: Some(ci),
                r0: Some(args.r0),
                r: Some(r),
                method: Some(args.method),
            }
        }
    };
    emit(&args.output, &report, || report.text())
}

#[derive(Serialize)]
struct ProbsReport {
    method: SamplingMethod,
    delta: f64,
    oracle: bool,
    n: usize,
    min: f64,
    max: f64,
    /// max over i of 1/(n πᵢ)
    max_inverse_scaled: f64,
    probs: Vec<f64>,
}

fn probs_at(data: &FullData, method: SamplingMethod, beta: &DVector<f64>, info: &nalgebra::DMatrix<f64>, delta: f64) -> Result<sampling::SamplingWeights> {
    match method {
        SamplingMethod::Unif => sampling::uniform_probs(data.n()),
        SamplingMethod::Mv | SamplingMethod::MvThresh => sampling::mv_probs(data, beta, info, delta),
        SamplingMethod::Mvc | SamplingMethod::MvcThresh => sampling::mvc_probs(data, beta, delta),
        SamplingMethod::Lev => sampling::leverage_probs(data, false, None),
        SamplingMethod::LevA => sampling::leverage_probs(data, true, Some(beta)),
    }
}

fn run_probs(args: &ProbsArgs) -> Result<()> {
    let data = args.data.source().load(args.data.seed)?;
    let (beta, info) = if args.oracle {
        let fit = solver::fit_mle(&data, None)?;
        (fit.beta, fit.info)
    } else {
        let mut rng = ChaCha20Rng::seed_from_u64(experiments::splitmix64(args.data.seed));
        let unif = sampling::uniform_probs(data.n())?;
        let (sample, fit, _) = twostep::pilot_estimate(&data, &unif, args.r0, &mut rng)?;
        let info = solver::observed_information(&sample, &fit.beta)?;
        (fit.beta, info)
    };
    let w = probs_at(&data, args.method, &beta, &info, args.delta)?;
    let probs = w.probs().to_vec();
    let report = ProbsReport {
        method: w.method(),
        delta: w.delta(),
        oracle: args.oracle,
        n: data.n(),
        min: probs.iter().copied().fold(f64::INFINITY, f64::min),
        max: probs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        max_inverse_scaled: w.max_inverse_scaled(),
        probs,
    };
    emit(&args.output, &report, || {
        let mut s = format!(
            "method={} delta={} oracle={} n={} min={:.6e} max={:.6e} max 1/(n pi)={:.4}\n",
            report.method, report.delta, report.oracle, report.n, report.min, report.max, report.max_inverse_scaled
        );
        for (i, p) in report.probs.iter().enumerate() {
            s.push_str(&format!("{i}\t{p:.10e}\n"));
        }
        s
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Mse(a) => run_experiment(a, experiments::run_mse_experiment),
        Command::Coverage(a) => run_experiment(a, experiments::run_coverage_experiment),
        Command::Allocation(a) => run_experiment(a, experiments::run_allocation_experiment),
        Command::Timing(a) => run_experiment(a, experiments::run_timing_benchmark),
        Command::Fit(a) => run_fit(a),
        Command::Probs(a) => run_probs(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
