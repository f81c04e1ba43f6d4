//! Application diagnostics: balance tests, RD plot data, variance
//! decomposition and counterfactual paths.

mod balance;
mod plot;

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{RdaError, Result};

pub use balance::{balance_test, BalanceCoefficient, BalanceReport, BalanceTarget, FKind};
pub use plot::{rd_plot_data, FittedLine, PlotBin, PlotPoint, RdPlot, Side, DEFAULT_BINS_PER_SIDE};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceRecord {
    pub cell: String,
    pub value: f64,
    pub weight: f64,
}

impl VarianceRecord {
    pub fn new(cell: impl Into<String>, value: f64, weight: f64) -> Self {
        Self {
            cell: cell.into(),
            value,
            weight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceDecomposition {
    pub total: f64,
    pub within: f64,
    pub between: f64,
}

/// Weighted variance split into within-cell and between-cell parts.
pub fn variance_decomposition(records: &[VarianceRecord]) -> Result<VarianceDecomposition> {
    if records.is_empty() {
        return Err(RdaError::EmptySample("variance decomposition needs at least one record".into()));
    }
    for r in records {
        if !(r.weight >= 0.0) || !r.weight.is_finite() || !r.value.is_finite() {
            return Err(RdaError::InvalidRecord {
                id: r.cell.clone(),
                reason: "values must be finite and weights nonnegative".into(),
            });
        }
    }
    let w: f64 = records.iter().map(|r| r.weight).sum();
    if w <= 0.0 {
        return Err(RdaError::AllWeightsZero);
    }
    let mean = records.iter().map(|r| r.weight * r.value).sum::<f64>() / w;

    let mut cells: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for r in records {
        let e = cells.entry(&r.cell).or_default();
        e.0 += r.weight;
        e.1 += r.weight * r.value;
    }
    let cell_mean = |c: &str| {
        let (cw, cs) = cells[c];
        if cw > 0.0 {
            cs / cw
        } else {
            0.0
        }
    };
    let total = records.iter().map(|r| r.weight * (r.value - mean).powi(2)).sum::<f64>() / w;
    let within = records
        .iter()
        .map(|r| r.weight * (r.value - cell_mean(&r.cell)).powi(2))
        .sum::<f64>()
        / w;
    let between = cells
        .iter()
        .map(|(c, (cw, _))| cw * (cell_mean(c) - mean).powi(2))
        .sum::<f64>()
        / w;
    Ok(VarianceDecomposition { total, within, between })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ShortfallKind {
    #[default]
    Cumulative,
    /// Per-period shortfalls, accumulated before use.
    PerPeriod,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CounterfactualPoint {
    pub actual: f64,
    pub counterfactual: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub cumulative_shortfall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CounterfactualPath {
    pub beta: f64,
    pub beta_ci: (f64, f64),
    pub points: Vec<CounterfactualPoint>,
    /// `None` when the actual series does not change.
    pub contribution: Option<f64>,
}

/// `1 − (CF_T − actual_0) / (actual_T − actual_0)`; `None` for a flat actual series.
pub fn treatment_contribution(actual_start: f64, actual_end: f64, counterfactual_end: f64) -> Option<f64> {
    let change = actual_end - actual_start;
    (change != 0.0).then(|| 1.0 - (counterfactual_end - actual_start) / change)
}

/// `CF_t = actual_t + β · cumulative_shortfall_t`, with a band from the ends of the β interval.
pub fn counterfactual_path(
    actual: &[f64],
    shortfall: &[f64],
    kind: ShortfallKind,
    beta: f64,
    beta_ci: (f64, f64),
) -> Result<CounterfactualPath> {
    if actual.len() != shortfall.len() {
        return Err(RdaError::LengthMismatch {
            what: "shortfall series".into(),
            expected: actual.len(),
            got: shortfall.len(),
        });
    }
    if actual.is_empty() {
        return Err(RdaError::EmptySample("empty series".into()));
    }
    let cumulative: Vec<f64> = match kind {
        ShortfallKind::Cumulative => shortfall.to_vec(),
        ShortfallKind::PerPeriod => shortfall
            .iter()
            .scan(0.0, |acc, s| {
                *acc += s;
                Some(*acc)
            })
            .collect(),
    };
    let points: Vec<CounterfactualPoint> = actual
        .iter()
        .zip(&cumulative)
        .map(|(&a, &c)| {
            let lo = a + beta_ci.0 * c;
            let hi = a + beta_ci.1 * c;
            CounterfactualPoint {
                actual: a,
                counterfactual: a + beta * c,
                ci_lo: lo.min(hi),
                ci_hi: lo.max(hi),
                cumulative_shortfall: c,
            }
        })
        .collect();
    let last = points.last().unwrap();
    let contribution = treatment_contribution(actual[0], last.actual, last.counterfactual);
    Ok(CounterfactualPath {
        beta,
        beta_ci,
        points,
        contribution,
    })
}
