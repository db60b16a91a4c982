//! Synthetic designs for the four simulation cases, response generation, and
//! CSV ingestion.
//!
//! Case 1: every covariate i.i.d. U[0,1].
//! Case 2: as case 1 but x₂ = x₁ + U[0, 0.1] (strongly correlated pair).
//! Case 3: as case 2 with x₂ = x₁ + U[0, 1].
//! Case 4: as case 3 with x₆, x₇ ~ U[−1, 1].
//! Columns past the seventh are U[0,1]. No intercept column is added.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::error::{OsmacError, Result};
use crate::expfam::Family;
use crate::solver::FullData;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseSpec {
    pub case_id: u8,
    pub n: usize,
    pub p: usize,
    pub beta_true: Vec<f64>,
}

impl CaseSpec {
    /// Seven covariates and β = 0.5·𝟙.
    pub fn new(case_id: u8, n: usize) -> Result<Self> {
        Self::with_p(case_id, n, 7)
    }

    /// `p` covariates and β = 0.5·𝟙ₚ.
    pub fn with_p(case_id: u8, n: usize, p: usize) -> Result<Self> {
        let spec = Self {
            case_id,
            n,
            p,
            beta_true: vec![0.5; p],
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.case_id) {
            return Err(OsmacError::InvalidParameter(format!("case must be 1..=4, got {}", self.case_id)));
        }
        if self.p == 0 || self.n < self.p {
            return Err(OsmacError::InvalidParameter(format!(
                "need n >= p >= 1, got n={}, p={}",
                self.n, self.p
            )));
        }
        if self.beta_true.len() != self.p {
            return Err(OsmacError::Dimension(format!(
                "true coefficient has length {} but p={}",
                self.beta_true.len(),
                self.p
            )));
        }
        Ok(())
    }

    pub fn beta(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.beta_true)
    }
}

/// n×p covariates for the case, drawn row by row.
pub fn generate_covariates<R: Rng + ?Sized>(spec: &CaseSpec, rng: &mut R) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let (n, p) = (spec.n, spec.p);
    let mut x = DMatrix::zeros(n, p);
    let noise_width = match spec.case_id {
        2 => 0.1,
        _ => 1.0,
    };
    for i in 0..n {
        for j in 0..p {
            let v = match j {
                1 if spec.case_id >= 2 => x[(i, 0)] + noise_width * rng.random::<f64>(),
                5 | 6 if spec.case_id == 4 => rng.random_range(-1.0..1.0),
                _ => rng.random::<f64>(),
            };
            x[(i, j)] = v;
        }
    }
    Ok(x)
}

/// Independent responses yᵢ with natural parameter xᵢᵀβ.
pub fn generate_responses<R: Rng + ?Sized>(
    x: DMatrix<f64>,
    beta: &DVector<f64>,
    family: Family,
    rng: &mut R,
) -> Result<FullData> {
    if beta.len() != x.ncols() {
        return Err(OsmacError::Dimension(format!(
            "coefficient has length {} but design has {} columns",
            beta.len(),
            x.ncols()
        )));
    }
    let theta = &x * beta;
    let mut y = DVector::zeros(x.nrows());
    for (yi, t) in y.iter_mut().zip(theta.iter()) {
        *yi = family.sample_response(*t, rng)?;
    }
    FullData::new(x, y, family)
}

/// Covariates and responses for a case in one go.
pub fn generate_case<R: Rng + ?Sized>(spec: &CaseSpec, family: Family, rng: &mut R) -> Result<FullData> {
    let x = generate_covariates(spec, rng)?;
    generate_responses(x, &spec.beta(), family, rng)
}

#[derive(Debug, Clone)]
pub struct CsvOptions {
    pub response: String,
    /// Covariate columns in order; every column except the response when empty.
    pub covariates: Vec<String>,
    pub family: Family,
    pub add_intercept: bool,
    /// Center and scale every covariate column (not the intercept) to unit sample variance.
    pub standardize: bool,
    /// Center and scale the response; only meaningful for the Gaussian family.
    pub standardize_response: bool,
}

impl CsvOptions {
    pub fn new(response: impl Into<String>, family: Family) -> Self {
        Self {
            response: response.into(),
            covariates: Vec::new(),
            family,
            add_intercept: false,
            standardize: false,
            standardize_response: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadedCsv {
    pub data: FullData,
    /// Names of the design columns, "(intercept)" first when added.
    pub columns: Vec<String>,
    /// Rows skipped because a used cell was empty or NA.
    pub rows_dropped: usize,
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c.eq_ignore_ascii_case("na")
}

/// Read a comma-separated file with a header line. Rows with a missing value
/// in any used column are dropped and counted. Reported row numbers are file
/// line numbers (the header is line 1).
pub fn load_csv(path: impl AsRef<Path>, opts: &CsvOptions) -> Result<LoadedCsv> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let position: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();
    let find = |name: &str| {
        position.get(name).copied().ok_or_else(|| OsmacError::Parse {
            row: 1,
            column: name.to_string(),
            message: "no such column in header".into(),
        })
    };
    let y_col = find(&opts.response)?;
    let cov_names: Vec<String> = if opts.covariates.is_empty() {
        headers.iter().filter(|h| **h != opts.response).cloned().collect()
    } else {
        opts.covariates.clone()
    };
    if cov_names.is_empty() && !opts.add_intercept {
        return Err(OsmacError::InvalidParameter("no covariate columns selected".into()));
    }
    let x_cols = cov_names.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;

    let mut rows: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut lines: Vec<usize> = Vec::new();
    let mut dropped = 0;
    for (k, record) in reader.records().enumerate() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(k + 2);
        let cell = |col: usize| record.get(col).unwrap_or("");
        if std::iter::once(y_col).chain(x_cols.iter().copied()).any(|c| is_missing(cell(c))) {
            dropped += 1;
            continue;
        }
        let parse = |col: usize| -> Result<f64> {
            let raw = cell(col).trim();
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| OsmacError::Parse {
                    row: line,
                    column: headers[col].clone(),
                    message: format!("'{raw}' is not a finite number"),
                })
        };
        ys.push(parse(y_col)?);
        if opts.add_intercept {
            rows.push(1.0);
        }
        for &c in &x_cols {
            rows.push(parse(c)?);
        }
        lines.push(line);
    }
    let n = ys.len();
    let p = x_cols.len() + usize::from(opts.add_intercept);
    if n == 0 {
        return Err(OsmacError::Dimension("no complete rows in file".into()));
    }
    let mut x = DMatrix::from_row_slice(n, p, &rows);
    let mut y = DVector::from_vec(ys);
    if opts.standardize {
        let start = usize::from(opts.add_intercept);
        for j in start..p {
            standardize_in_place(x.column_mut(j).as_mut_slice(), &cov_names[j - start])?;
        }
    }
    if opts.standardize_response {
        if opts.family != Family::Gaussian {
            return Err(OsmacError::InvalidParameter(
                "only Gaussian responses can be standardized".into(),
            ));
        }
        standardize_in_place(y.as_mut_slice(), &opts.response)?;
    }
    let data = FullData::new(x, y, opts.family).map_err(|e| match e {
        OsmacError::Support { rows } => OsmacError::Support {
            rows: rows.into_iter().map(|i| lines[i]).collect(),
        },
        other => other,
    })?;
    let mut columns = Vec::with_capacity(p);
    if opts.add_intercept {
        columns.push("(intercept)".to_string());
    }
    columns.extend(cov_names);
    Ok(LoadedCsv {
        data,
        columns,
        rows_dropped: dropped,
    })
}

fn standardize_in_place(v: &mut [f64], name: &str) -> Result<()> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    if !(var > 0.0) {
        return Err(OsmacError::Degenerate(format!("column '{name}' is constant and cannot be standardized")));
    }
    let sd = var.sqrt();
    for x in v.iter_mut() {
        *x = (*x - mean) / sd;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::io::Write;

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    fn col(x: &DMatrix<f64>, j: usize) -> Vec<f64> {
        x.column(j).iter().copied().collect()
    }

    #[test]
    fn case_one_columns_are_independent_uniforms() {
        let spec = CaseSpec::new(1, 100_000).unwrap();
        let x = generate_covariates(&spec, &mut ChaCha20Rng::seed_from_u64(1)).unwrap();
        for j in 0..7 {
            let m = x.column(j).mean();
            assert!((0.497..=0.503).contains(&m), "col {j} mean {m}");
            for k in (j + 1)..7 {
                assert!(corr(&col(&x, j), &col(&x, k)).abs() <= 0.01);
            }
        }
    }

    #[test]
    fn correlated_cases() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let x2 = generate_covariates(&CaseSpec::new(2, 100_000).unwrap(), &mut rng).unwrap();
        let c2 = corr(&col(&x2, 0), &col(&x2, 1));
        assert!((0.97..=1.0).contains(&c2), "{c2}");
        let x3 = generate_covariates(&CaseSpec::new(3, 100_000).unwrap(), &mut rng).unwrap();
        // x₂ = x₁ + U[0,1] with independent equal-variance parts: ρ = 1/√2
        let c3 = corr(&col(&x3, 0), &col(&x3, 1));
        assert!((c3 - std::f64::consts::FRAC_1_SQRT_2).abs() < 0.01, "{c3}");
        let x4 = generate_covariates(&CaseSpec::new(4, 100_000).unwrap(), &mut rng).unwrap();
        assert!(x4.column(5).min() < -0.9);
        assert!(x4.column(6).min() < -0.9);
        assert!(x4.column(4).min() >= 0.0);
    }

    #[test]
    fn wide_case_keeps_extra_columns_uniform() {
        let spec = CaseSpec::with_p(4, 2000, 40).unwrap();
        assert_eq!(spec.beta_true, vec![0.5; 40]);
        let x = generate_covariates(&spec, &mut ChaCha20Rng::seed_from_u64(3)).unwrap();
        assert_eq!(x.shape(), (2000, 40));
        assert!(x.columns(7, 33).min() >= 0.0);
    }

    #[test]
    fn invalid_specs() {
        assert!(CaseSpec::new(0, 10).is_err());
        assert!(CaseSpec::new(5, 10).is_err());
        assert!(CaseSpec::new(1, 3).is_err());
    }

    #[test]
    fn poisson_responses() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let x = DMatrix::from_element(100_000, 1, 1.0);
        let d = generate_responses(x, &DVector::zeros(1), Family::Poisson, &mut rng).unwrap();
        let m = d.y().mean();
        assert!((0.99..=1.01).contains(&m), "{m}");
    }

    #[test]
    fn case_one_response_mean_matches_conditional_means() {
        let spec = CaseSpec::new(1, 100_000).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let d = generate_case(&spec, Family::Poisson, &mut rng).unwrap();
        let theta = d.x() * spec.beta();
        assert!((theta.mean() - 1.75).abs() < 0.01);
        let mu: Vec<f64> = theta.iter().map(|t| t.exp()).collect();
        let expect = mu.iter().sum::<f64>() / mu.len() as f64;
        // Var(ȳ | X) = Σ μᵢ / n²
        let se = (expect / mu.len() as f64).sqrt();
        assert!((d.y().mean() - expect).abs() < 5.0 * se);
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let spec = CaseSpec::new(3, 500).unwrap();
        let a = generate_case(&spec, Family::Poisson, &mut ChaCha20Rng::seed_from_u64(8)).unwrap();
        let b = generate_case(&spec, Family::Poisson, &mut ChaCha20Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a.x(), b.x());
        assert_eq!(a.y(), b.y());
    }

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_well_formed() {
        let f = write("y,a,b\n1,0.5,2\n0,1.5,3\n3,2.5,4\n");
        let mut opts = CsvOptions::new("y", Family::Poisson);
        opts.covariates = vec!["b".into(), "a".into()];
        let loaded = load_csv(f.path(), &opts).unwrap();
        assert_eq!(loaded.data.n(), 3);
        assert_eq!(loaded.columns, vec!["b", "a"]);
        assert_eq!(loaded.data.x()[(1, 0)], 3.0);
        assert_eq!(loaded.data.x()[(1, 1)], 1.5);
        assert_eq!(loaded.data.y()[2], 3.0);

        opts.add_intercept = true;
        let loaded = load_csv(f.path(), &opts).unwrap();
        assert_eq!(loaded.data.p(), 3);
        assert!(loaded.data.x().column(0).iter().all(|v| *v == 1.0));
    }

    #[test]
    fn csv_errors_name_location() {
        let f = write("y,a\n1,0.5\n2,abc\n");
        match load_csv(f.path(), &CsvOptions::new("y", Family::Poisson)) {
            Err(OsmacError::Parse { row, column, .. }) => {
                assert_eq!(row, 3);
                assert_eq!(column, "a");
            }
            other => panic!("unexpected {other:?}"),
        }
        let f = write("y,a\n1,0.5\n-2,1\n3,2\n");
        match load_csv(f.path(), &CsvOptions::new("y", Family::Poisson)) {
            Err(OsmacError::Support { rows }) => assert_eq!(rows, vec![3]),
            other => panic!("unexpected {other:?}"),
        }
        assert!(load_csv(f.path(), &CsvOptions::new("z", Family::Poisson)).is_err());
    }

    #[test]
    fn csv_missing_rows_are_dropped_and_counted() {
        let f = write("y,a,b\n1,0.5,1\n2,NA,2\n,1,3\n0,2,4\n");
        let mut opts = CsvOptions::new("y", Family::Gaussian);
        opts.standardize = true;
        opts.standardize_response = true;
        let loaded = load_csv(f.path(), &opts).unwrap();
        assert_eq!(loaded.rows_dropped, 2);
        assert_eq!(loaded.data.n(), 2);
        assert!(loaded.data.x().column(0).sum().abs() < 1e-12);
        assert!(loaded.data.y().sum().abs() < 1e-12);
    }
}
