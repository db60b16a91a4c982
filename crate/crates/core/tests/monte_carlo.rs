//! Monte-Carlo checks of the estimators' distributional behaviour on small instances.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use osmac::datagen::{generate_case, CaseSpec};
use osmac::diagnostics;
use osmac::experiments::{self, replicate_rng, DataSource, ExperimentConfig};
use osmac::sampling::{self, SamplingMethod};
use osmac::solver;
use osmac::stats;
use osmac::twostep::{self, SecondStage, TwoStepConfig};
use osmac::Family;

fn case_data(case_id: u8, n: usize, p: usize, seed: u64) -> osmac::FullData {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    generate_case(&CaseSpec::with_p(case_id, n, p).unwrap(), Family::Poisson, &mut rng).unwrap()
}

#[test]
fn two_step_covariance_matches_limiting_variance() {
    let data = case_data(1, 1000, 3, 21);
    let fit = solver::fit_mle(&data, None).unwrap();
    let (r0, r, k) = (200, 1000, 2000);
    for method in [SecondStage::Mv, SecondStage::Mvc] {
        let config = TwoStepConfig::new(r0, r, method);
        let diffs: Vec<DVector<f64>> = (0..k)
            .map(|i| {
                let est = twostep::two_step_estimate(&data, &config, &mut replicate_rng(5, 77, i)).unwrap();
                (est.beta - &fit.beta) * (r as f64).sqrt()
            })
            .collect();
        let mean = diffs.iter().fold(DVector::zeros(3), |acc, d| acc + d) / k as f64;
        let cov = diffs
            .iter()
            .fold(DMatrix::zeros(3, 3), |acc, d| acc + (d - &mean) * (d - &mean).transpose())
            / (k - 1) as f64;
        let limit = twostep::asymptotic_variance_opt(&data, &fit.beta, &fit.info, method, config.delta, r).unwrap()
            * r as f64;
        let rel = (&cov - &limit).norm() / limit.norm();
        assert!(rel <= 0.15, "{method}: relative Frobenius gap {rel}");
    }
}

#[test]
fn oracle_probability_covariance_matches_sandwich() {
    let data = case_data(1, 1000, 3, 21);
    let fit = solver::fit_mle(&data, None).unwrap();
    let (r, k) = (1000, 2000);
    let w = sampling::mv_probs(&data, &fit.beta, &fit.info, 1e-6).unwrap();
    let diffs: Vec<DVector<f64>> = (0..k)
        .map(|i| {
            let est = twostep::one_step_estimate(&data, &w, r, &mut replicate_rng(5, 9, i)).unwrap();
            (est.beta - &fit.beta) * (r as f64).sqrt()
        })
        .collect();
    let mean = diffs.iter().fold(DVector::zeros(3), |acc, d| acc + d) / k as f64;
    let cov = diffs
        .iter()
        .fold(DMatrix::zeros(3, 3), |acc, d| acc + (d - &mean) * (d - &mean).transpose())
        / (k - 1) as f64;
    let (v, _) = sampling::asymptotic_variance(&data, &fit.beta, &fit.info, w.probs(), r).unwrap();
    let rel = (&cov - v * r as f64).norm() / cov.norm();
    assert!(rel <= 0.15, "relative Frobenius gap {rel}");
}

#[test]
fn full_data_fit_has_smallest_mean_prediction_error() {
    let data = case_data(1, 2000, 7, 22);
    let fit = solver::fit_mle(&data, None).unwrap();
    let full = experiments::compute_mspe(&data, &fit.beta).unwrap();
    let unif = sampling::uniform_probs(data.n()).unwrap();
    let sub: Vec<f64> = (0..500)
        .map(|i| {
            let est = twostep::one_step_estimate(&data, &unif, 300, &mut replicate_rng(6, 1, i)).unwrap();
            experiments::compute_mspe(&data, &est.beta).unwrap()
        })
        .collect();
    assert!(full <= stats::mean(&sub), "{full} vs {}", stats::mean(&sub));
}

#[test]
fn estimated_variance_is_smaller_under_optimal_probabilities() {
    let data = case_data(1, 5000, 7, 23);
    let trace = |method| {
        let config = TwoStepConfig::new(200, 500, method);
        (0..200)
            .map(|i| {
                twostep::two_step_estimate(&data, &config, &mut replicate_rng(7, 2, i))
                    .unwrap()
                    .vcov
                    .trace()
            })
            .collect::<Vec<_>>()
    };
    let mv = trace(SecondStage::Mv);
    let unif = trace(SecondStage::Uniform);
    let test = stats::paired_one_sided(&mv, &unif).unwrap();
    assert!(test.p_value < 0.01, "{test:?}");
}

#[test]
fn singular_condition_holds_at_recommended_size() {
    let eps = 0.1;
    let data = case_data(1, 500, 3, 24);
    let fit = solver::fit_mle(&data, None).unwrap();
    let w = sampling::mvc_probs(&data, &fit.beta, 1e-6).unwrap();
    let summary = diagnostics::spectral_summary(data.x()).unwrap();
    let r = diagnostics::recommended_subsample_size(&summary, eps, 1.0, 1.0).unwrap() as usize;
    let reps = 200;
    let mut rng = ChaCha20Rng::seed_from_u64(25);
    let held = (0..reps)
        .filter(|_| {
            let sub = sampling::draw_subsample(&w, &data, r, &mut rng).unwrap();
            diagnostics::check_singular_condition(&sub, &data, r).unwrap()
        })
        .count() as f64;
    let expected = (1.0 - eps) * reps as f64;
    let sigma = (reps as f64 * eps * (1.0 - eps)).sqrt();
    assert!(held >= expected - 3.0 * sigma, "condition held in {held} of {reps}");
}

#[test]
fn correlated_design_favours_mv_over_mvc() {
    let mut config = ExperimentConfig::new(DataSource::case(2, 10_000, 7, Family::Poisson));
    config.methods = vec![SamplingMethod::Mv, SamplingMethod::Mvc];
    config.r_grid = vec![1000];
    let report = experiments::run_mse_experiment(&config).unwrap();
    let err = |m| report.cell(m, 1000).unwrap().values(|r| r.estimation_error);
    let test = stats::paired_one_sided(&err(SamplingMethod::Mv), &err(SamplingMethod::Mvc)).unwrap();
    assert!(test.p_value < 0.01, "{test:?}");
}

#[test]
fn correlated_design_gives_longer_intervals() {
    let run = |case_id| {
        let mut config = ExperimentConfig::new(DataSource::case(case_id, 10_000, 7, Family::Poisson));
        config.r_grid = vec![1000];
        config.k_reps = 100;
        experiments::run_coverage_experiment(&config).unwrap()
    };
    let (one, two) = (run(1), run(2));
    for m in [SamplingMethod::Unif, SamplingMethod::Mv, SamplingMethod::Mvc] {
        let l1 = one.cell(m, 1000).unwrap().mean_ci_length.unwrap();
        let l2 = two.cell(m, 1000).unwrap().mean_ci_length.unwrap();
        assert!(l2 > l1, "{m}: {l2} <= {l1}");
    }
}

#[test]
fn two_step_methods_beat_uniform_across_allocations() {
    let mut config = ExperimentConfig::new(DataSource::case(1, 10_000, 7, Family::Poisson));
    config.total = Some(1200);
    config.k_reps = 300;
    let report = experiments::run_allocation_experiment(&config).unwrap();
    for c in report.comparisons.iter().filter(|c| c.metric == "estimation_error") {
        assert!(c.test.mean_diff < 0.0, "{} at proportion {:?}: {:?}", c.method, c.proportion, c.test);
    }
    assert_eq!(report.comparisons.iter().filter(|c| c.metric == "estimation_error").count(), 18);
}

#[test]
fn uniform_error_shrinks_with_subsample_size() {
    let mut config = ExperimentConfig::new(DataSource::case(1, 2000, 7, Family::Poisson));
    config.methods = vec![SamplingMethod::Unif];
    config.r_grid = vec![300, 1000, 2000];
    config.k_reps = 20;
    let report = experiments::run_mse_experiment(&config).unwrap();
    let mse: Vec<f64> = config.r_grid.iter().map(|r| report.cell(SamplingMethod::Unif, *r).unwrap().mse.unwrap()).collect();
    assert!(mse.windows(2).all(|w| w[1] < w[0]), "{mse:?}");
    assert!(mse[2] < 0.2);
}
