//! Weighted linear regression engine: WLS, just-identified 2SLS,
//! Frisch–Waugh residualization, fixed-effect absorption and HC1 sandwich
//! standard errors.
//!
//! Every fit works on `diag(sqrt(w)) X` with a column-order Householder
//! factorization. Columns whose pivot falls below `1e-10` times the largest
//! pivot seen so far are dropped and reported by label.

mod fe;
mod qr;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{RdaError, Result};

pub use fe::{
    absorb_fixed_effects, absorb_with_cap, absorbed_dof, FixedEffect, DEFAULT_ABSORB_TOL,
    MAX_ABSORB_ITERATIONS,
};
pub use qr::{WeightedQr, PIVOT_TOLERANCE};

/// Default first-stage partial F below which a weak-instrument warning is raised.
pub const DEFAULT_WEAK_F: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
struct Column {
    label: String,
    values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct Instrument {
    endogenous: String,
    label: String,
    values: Vec<f64>,
}

/// A weighted linear model with optional excluded instruments.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionProblem {
    response: Vec<f64>,
    columns: Vec<Column>,
    weights: Vec<f64>,
    instruments: Vec<Instrument>,
    absorbed_dof: usize,
    weak_f_threshold: f64,
}

impl RegressionProblem {
    pub fn new(response: Vec<f64>, weights: Vec<f64>) -> Self {
        Self {
            response,
            columns: Vec::new(),
            weights,
            instruments: Vec::new(),
            absorbed_dof: 0,
            weak_f_threshold: DEFAULT_WEAK_F,
        }
    }

    pub fn unweighted(response: Vec<f64>) -> Self {
        let n = response.len();
        Self::new(response, vec![1.0; n])
    }

    pub fn with_column(mut self, label: impl Into<String>, values: Vec<f64>) -> Self {
        self.columns.push(Column {
            label: label.into(),
            values,
        });
        self
    }

    pub fn with_intercept(self) -> Self {
        let n = self.response.len();
        self.with_column("intercept", vec![1.0; n])
    }

    /// Marks regressor `endogenous` as instrumented by `values`.
    pub fn with_instrument(
        mut self,
        endogenous: impl Into<String>,
        label: impl Into<String>,
        values: Vec<f64>,
    ) -> Self {
        self.instruments.push(Instrument {
            endogenous: endogenous.into(),
            label: label.into(),
            values,
        });
        self
    }

    /// Degrees of freedom consumed outside the explicit columns (absorbed fixed effects).
    pub fn with_absorbed_dof(mut self, dof: usize) -> Self {
        self.absorbed_dof = dof;
        self
    }

    pub fn with_weak_f_threshold(mut self, threshold: f64) -> Self {
        self.weak_f_threshold = threshold;
        self
    }

    pub fn n_rows(&self) -> usize {
        self.response.len()
    }

    pub fn labels(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.label.as_str()).collect()
    }

    pub fn has_instruments(&self) -> bool {
        !self.instruments.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let n = self.response.len();
        if n == 0 {
            return Err(RdaError::EmptySample("regression has no rows".into()));
        }
        if self.weights.len() != n {
            return Err(RdaError::LengthMismatch {
                what: "weights".into(),
                expected: n,
                got: self.weights.len(),
            });
        }
        for c in &self.columns {
            if c.values.len() != n {
                return Err(RdaError::LengthMismatch {
                    what: format!("column `{}`", c.label),
                    expected: n,
                    got: c.values.len(),
                });
            }
        }
        for z in &self.instruments {
            if z.values.len() != n {
                return Err(RdaError::LengthMismatch {
                    what: format!("instrument `{}`", z.label),
                    expected: n,
                    got: z.values.len(),
                });
            }
        }
        for (row, &w) in self.weights.iter().enumerate() {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(RdaError::InvalidWeight { row, value: w });
            }
        }
        if self.weights.iter().all(|&w| w == 0.0) {
            return Err(RdaError::AllWeightsZero);
        }
        Ok(())
    }

    fn design(&self, cols: &[&[f64]]) -> DMatrix<f64> {
        let n = self.n_rows();
        DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Coefficient {
    pub label: String,
    pub estimate: f64,
    pub robust_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FirstStage {
    pub endogenous: String,
    pub instrument: String,
    pub coefficient: f64,
    pub robust_se: f64,
    pub partial_f: f64,
}

/// Output of [`wls_fit`] or [`tsls_fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub coefficients: Vec<Coefficient>,
    /// Robust covariance aligned with `coefficients`.
    pub covariance: DMatrix<f64>,
    pub n_obs: usize,
    pub dof: isize,
    pub residuals: Vec<f64>,
    pub dropped_columns: Vec<String>,
    pub weighted_rss: f64,
    pub first_stage: Vec<FirstStage>,
    pub warnings: Vec<String>,
}

impl FitResult {
    fn index(&self, label: &str) -> Option<usize> {
        self.coefficients.iter().position(|c| c.label == label)
    }

    /// Coefficient estimate; `None` when the column was dropped.
    pub fn coef(&self, label: &str) -> Option<f64> {
        self.index(label).map(|i| self.coefficients[i].estimate)
    }

    pub fn se(&self, label: &str) -> Option<f64> {
        self.index(label).map(|i| self.coefficients[i].robust_se)
    }

    /// Robust Wald test that every listed coefficient is zero.
    pub fn robust_wald(&self, labels: &[&str]) -> Result<WaldTest> {
        let idx: Vec<usize> = labels
            .iter()
            .filter_map(|l| self.index(l))
            .filter(|&i| self.coefficients[i].estimate.is_finite())
            .collect();
        wald_from_parts(&self.coefficients, &self.covariance, &idx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WaldTest {
    pub statistic: f64,
    pub df: usize,
    /// Statistic divided by its degrees of freedom.
    pub f: f64,
    /// Upper tail of chi-square with `df` degrees of freedom.
    pub p_value: f64,
}

fn wald_from_parts(coefs: &[Coefficient], cov: &DMatrix<f64>, idx: &[usize]) -> Result<WaldTest> {
    let k = idx.len();
    if k == 0 {
        return Ok(WaldTest {
            statistic: 0.0,
            df: 0,
            f: f64::NAN,
            p_value: 1.0,
        });
    }
    let b = DVector::from_fn(k, |i, _| coefs[idx[i]].estimate);
    let v = DMatrix::from_fn(k, k, |i, j| cov[(idx[i], idx[j])]);
    let vinv = v
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| v.pseudo_inverse(1e-14).ok())
        .ok_or_else(|| RdaError::Singular("Wald covariance".into()))?;
    let stat = (b.transpose() * vinv * &b)[(0, 0)];
    let p_value = if stat.is_finite() {
        let chi = ChiSquared::new(k as f64).map_err(|e| RdaError::Config(e.to_string()))?;
        1.0 - chi.cdf(stat)
    } else {
        f64::NAN
    };
    Ok(WaldTest {
        statistic: stat,
        df: k,
        f: stat / k as f64,
        p_value,
    })
}

fn positive_count(weights: &[f64]) -> usize {
    weights.iter().filter(|&&w| w > 0.0).count()
}

/// HC1 sandwich covariance: `n/(n-p) · B (Σ (w e)² x x') B` with `B = (X'WX)^{-1}`.
pub fn hc1_covariance(
    design: &DMatrix<f64>,
    weights: &[f64],
    residuals: &[f64],
    bread: &DMatrix<f64>,
    absorbed_dof: usize,
) -> Result<DMatrix<f64>> {
    let n = positive_count(weights);
    let p = design.ncols() + absorbed_dof;
    if n <= p {
        return Err(RdaError::NoDegreesOfFreedom {
            n_obs: n,
            n_params: p,
        });
    }
    let k = design.ncols();
    let mut meat = DMatrix::<f64>::zeros(k, k);
    for i in 0..design.nrows() {
        let s = weights[i] * residuals[i];
        if s == 0.0 {
            continue;
        }
        let s2 = s * s;
        for a in 0..k {
            let xa = design[(i, a)] * s2;
            for b in 0..=a {
                meat[(a, b)] += xa * design[(i, b)];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            meat[(b, a)] = meat[(a, b)];
        }
    }
    let scale = n as f64 / (n - p) as f64;
    Ok(bread * meat * bread * scale)
}

/// Per-coefficient HC1 standard errors.
pub fn hc1_se(
    design: &DMatrix<f64>,
    weights: &[f64],
    residuals: &[f64],
    absorbed_dof: usize,
) -> Result<Vec<f64>> {
    let qr = WeightedQr::new(design, weights);
    if !qr.dropped().is_empty() {
        return Err(RdaError::Singular("design passed to hc1_se is rank deficient".into()));
    }
    let cov = hc1_covariance(design, weights, residuals, &qr.xtwx_inverse(), absorbed_dof)?;
    Ok((0..cov.nrows()).map(|i| cov[(i, i)].max(0.0).sqrt()).collect())
}

struct Solved {
    retained: Vec<usize>,
    dropped: Vec<usize>,
    beta: DVector<f64>,
    bread: DMatrix<f64>,
}

fn solve(x: &DMatrix<f64>, y: &[f64], w: &[f64]) -> Solved {
    let qr = WeightedQr::new(x, w);
    Solved {
        retained: qr.retained().to_vec(),
        dropped: qr.dropped().to_vec(),
        beta: qr.solve(y),
        bread: qr.xtwx_inverse(),
    }
}

fn select_columns(x: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), idx.len(), |i, j| x[(i, idx[j])])
}

fn finish(
    problem: &RegressionProblem,
    labels: &[&str],
    original: &DMatrix<f64>,
    score_design: &DMatrix<f64>,
    solved: &Solved,
    first_stage: Vec<FirstStage>,
    mut warnings: Vec<String>,
    non_finite: &[usize],
) -> FitResult {
    let n = problem.n_rows();
    let x_ret = select_columns(original, &solved.retained);
    let fitted = &x_ret * &solved.beta;
    let residuals: Vec<f64> = (0..n).map(|i| problem.response[i] - fitted[i]).collect();
    let weighted_rss = residuals
        .iter()
        .zip(&problem.weights)
        .map(|(e, w)| w * e * e)
        .sum();

    let n_obs = positive_count(&problem.weights);
    let dof = n_obs as isize - solved.retained.len() as isize - problem.absorbed_dof as isize;
    let score_ret = select_columns(score_design, &solved.retained);
    let cov = match hc1_covariance(
        &score_ret,
        &problem.weights,
        &residuals,
        &solved.bread,
        problem.absorbed_dof,
    ) {
        Ok(c) => c,
        Err(e) => {
            warnings.push(format!("robust standard errors unavailable: {e}"));
            DMatrix::from_element(solved.retained.len(), solved.retained.len(), f64::NAN)
        }
    };

    // assemble in column order, keeping dropped endogenous columns as non-finite entries
    let mut coefficients = Vec::new();
    let mut positions = Vec::new();
    let mut r = 0;
    for (k, label) in labels.iter().enumerate() {
        if solved.retained.get(r) == Some(&k) {
            coefficients.push(Coefficient {
                label: label.to_string(),
                estimate: solved.beta[r],
                robust_se: cov[(r, r)].max(0.0).sqrt(),
            });
            positions.push(Some(r));
            r += 1;
        } else if non_finite.contains(&k) {
            coefficients.push(Coefficient {
                label: label.to_string(),
                estimate: f64::NAN,
                robust_se: f64::NAN,
            });
            positions.push(None);
        }
    }
    let m = coefficients.len();
    let covariance = DMatrix::from_fn(m, m, |i, j| match (positions[i], positions[j]) {
        (Some(a), Some(b)) => cov[(a, b)],
        _ => f64::NAN,
    });

    let dropped_columns = solved
        .dropped
        .iter()
        .map(|&k| labels[k].to_string())
        .collect();

    FitResult {
        coefficients,
        covariance,
        n_obs,
        dof,
        residuals,
        dropped_columns,
        weighted_rss,
        first_stage,
        warnings,
    }
}

/// Weighted least squares with HC1 standard errors.
pub fn wls_fit(problem: &RegressionProblem) -> Result<FitResult> {
    problem.validate()?;
    if problem.has_instruments() {
        return Err(RdaError::Instruments(
            "wls_fit called on a problem with instruments; use tsls_fit".into(),
        ));
    }
    let cols: Vec<&[f64]> = problem.columns.iter().map(|c| c.values.as_slice()).collect();
    let x = problem.design(&cols);
    let labels = problem.labels();
    let solved = solve(&x, &problem.response, &problem.weights);
    Ok(finish(problem, &labels, &x, &x, &solved, Vec::new(), Vec::new(), &[]))
}

/// Just-identified two-stage least squares.
///
/// The second stage replaces every endogenous column with its first-stage
/// fitted values; residuals and the sandwich meat use the original
/// endogenous values. An endogenous column whose fitted values are collinear
/// with the exogenous controls is reported with a non-finite estimate.
pub fn tsls_fit(problem: &RegressionProblem) -> Result<FitResult> {
    problem.validate()?;
    if problem.instruments.is_empty() {
        return Err(RdaError::Instruments("tsls_fit requires instruments".into()));
    }
    let labels = problem.labels();
    let mut endo_idx = Vec::new();
    for z in &problem.instruments {
        let k = labels
            .iter()
            .position(|l| *l == z.endogenous)
            .ok_or_else(|| RdaError::UnknownColumn(z.endogenous.clone()))?;
        if endo_idx.contains(&k) {
            return Err(RdaError::Instruments(format!(
                "column `{}` has more than one instrument (over-identified systems are not supported)",
                z.endogenous
            )));
        }
        endo_idx.push(k);
    }
    let exog_idx: Vec<usize> = (0..labels.len()).filter(|k| !endo_idx.contains(k)).collect();

    // first stage: every endogenous column on (exogenous, instruments)
    let mut fs_cols: Vec<&[f64]> = exog_idx
        .iter()
        .map(|&k| problem.columns[k].values.as_slice())
        .collect();
    fs_cols.extend(problem.instruments.iter().map(|z| z.values.as_slice()));
    let fs_x = problem.design(&fs_cols);
    let fs_qr = WeightedQr::new(&fs_x, &problem.weights);
    let fs_bread = fs_qr.xtwx_inverse();
    let fs_ret = select_columns(&fs_x, fs_qr.retained());
    let n_exog = exog_idx.len();

    let mut warnings = Vec::new();
    let mut first_stage = Vec::new();
    let mut fitted_cols: Vec<Vec<f64>> = Vec::new();
    for (e, z) in endo_idx.iter().zip(&problem.instruments) {
        let x_e = &problem.columns[*e].values;
        let b = fs_qr.solve(x_e);
        let fitted = &fs_ret * &b;
        let resid: Vec<f64> = x_e.iter().zip(fitted.iter()).map(|(a, f)| a - f).collect();
        let cov = hc1_covariance(&fs_ret, &problem.weights, &resid, &fs_bread, problem.absorbed_dof);

        let inst_positions: Vec<usize> = (0..problem.instruments.len())
            .filter_map(|j| fs_qr.retained().iter().position(|&r| r == n_exog + j))
            .collect();
        let own = problem
            .instruments
            .iter()
            .position(|zz| zz.label == z.label)
            .and_then(|j| fs_qr.retained().iter().position(|&r| r == n_exog + j));

        let (coef, se, f) = match (&cov, own) {
            (Ok(cov), Some(pos)) => {
                let coefs: Vec<Coefficient> = (0..b.len())
                    .map(|i| Coefficient {
                        label: String::new(),
                        estimate: b[i],
                        robust_se: 0.0,
                    })
                    .collect();
                let wald = wald_from_parts(&coefs, cov, &inst_positions)?;
                (b[pos], cov[(pos, pos)].max(0.0).sqrt(), wald.f)
            }
            (Err(_), Some(pos)) => (b[pos], f64::NAN, f64::NAN),
            (_, None) => (0.0, f64::NAN, 0.0),
        };
        if own.is_none() {
            warnings.push(format!(
                "instrument `{}` is collinear with the exogenous controls",
                z.label
            ));
        }
        if !(f >= problem.weak_f_threshold) {
            warnings.push(format!(
                "weak instrument for `{}`: first-stage partial F = {:.3} < {}",
                z.endogenous, f, problem.weak_f_threshold
            ));
        }
        first_stage.push(FirstStage {
            endogenous: z.endogenous.clone(),
            instrument: z.label.clone(),
            coefficient: coef,
            robust_se: se,
            partial_f: f,
        });
        if own.is_some() {
            fitted_cols.push(fitted.iter().copied().collect());
        } else {
            // unidentified: a zero column is dropped from the second stage
            fitted_cols.push(vec![0.0; fitted.len()]);
        }
    }

    // second stage on fitted endogenous values
    let mut ss_cols: Vec<&[f64]> = problem.columns.iter().map(|c| c.values.as_slice()).collect();
    for (slot, e) in endo_idx.iter().enumerate() {
        ss_cols[*e] = fitted_cols[slot].as_slice();
    }
    let x_hat = problem.design(&ss_cols);
    let orig_cols: Vec<&[f64]> = problem.columns.iter().map(|c| c.values.as_slice()).collect();
    let x = problem.design(&orig_cols);
    let solved = solve(&x_hat, &problem.response, &problem.weights);

    let mut non_finite = Vec::new();
    for &e in &endo_idx {
        if solved.dropped.contains(&e) {
            non_finite.push(e);
            warnings.push(format!(
                "no first-stage variation left in `{}` after controls; its estimate is not finite",
                labels[e]
            ));
        }
    }
    let mut fit = finish(
        problem,
        &labels,
        &x,
        &x_hat,
        &solved,
        first_stage,
        warnings,
        &non_finite,
    );
    fit.dropped_columns.retain(|l| !endo_idx.iter().any(|&e| labels[e] == l));
    Ok(fit)
}

/// Returns `columns` minus their weighted projection on `on`.
pub fn residualize(
    columns: &DMatrix<f64>,
    on: &DMatrix<f64>,
    weights: &[f64],
) -> Result<DMatrix<f64>> {
    let n = columns.nrows();
    if n == 0 {
        return Err(RdaError::EmptySample("residualize on empty sample".into()));
    }
    if on.nrows() != n {
        return Err(RdaError::LengthMismatch {
            what: "projection basis".into(),
            expected: n,
            got: on.nrows(),
        });
    }
    if weights.len() != n {
        return Err(RdaError::LengthMismatch {
            what: "weights".into(),
            expected: n,
            got: weights.len(),
        });
    }
    for (row, &w) in weights.iter().enumerate() {
        if !(w >= 0.0) || !w.is_finite() {
            return Err(RdaError::InvalidWeight { row, value: w });
        }
    }
    if weights.iter().all(|&w| w == 0.0) {
        return Err(RdaError::AllWeightsZero);
    }
    if on.ncols() == 0 {
        return Ok(columns.clone());
    }
    let qr = WeightedQr::new(on, weights);
    let basis = select_columns(on, qr.retained());
    let mut out = columns.clone();
    for c in 0..columns.ncols() {
        let y: Vec<f64> = columns.column(c).iter().copied().collect();
        let b = qr.solve(&y);
        let fitted = &basis * b;
        for i in 0..n {
            out[(i, c)] -= fitted[i];
        }
    }
    Ok(out)
}
