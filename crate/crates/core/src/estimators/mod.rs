//! RDA estimators assembled from the regression engine and the design
//! builders.
//!
//! * [`estimate_upper`]: unit-level IV of `Y` on `X` instrumented by the
//!   aggregated close-shock `Z`, controlling for the RDA controls.
//! * [`estimate_lower`]: fuzzy RD on the stack of close subunits, with the
//!   owning unit's outcome and treatment repeated on each row.
//! * [`verify_equivalence`]: checks that the upper-level estimate equals a
//!   subunit-level IV on unit-residualized outcome and treatment.

mod spillover;

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use serde::Serialize;

use crate::design::{
    aggregate_treatment, build_instrument, build_rda_controls, kernel_weight, stack_lower,
    ControlSet, Dataset, DesignConfig, LowerWeighting, RdaControls,
};
use crate::error::{RdaError, Result};
use crate::regress::{
    absorb_fixed_effects, absorbed_dof, residualize, tsls_fit, wls_fit, FitResult, FixedEffect,
    RegressionProblem, DEFAULT_ABSORB_TOL,
};

pub use spillover::{
    estimate_spillover_bilateral, estimate_spillover_collapsed, estimate_spillover_upper,
};

pub const TREATMENT: &str = "treatment";
pub const INSTRUMENT: &str = "instrument";
pub const INTERCEPT: &str = "intercept";
pub const TOTAL_WEIGHT: &str = "rda_total_weight";
pub const WEIGHTED_RUNNING: &str = "rda_weighted_running";
pub const WEIGHTED_RUNNING_RIGHT: &str = "rda_weighted_running_right";
pub const RUNNING: &str = "running";
pub const RUNNING_RIGHT: &str = "running_right";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StageSummary {
    pub coefficient: f64,
    pub robust_se: f64,
    /// Robust partial F of the excluded instrument (first stage only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub partial_f: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateResult {
    pub specification: String,
    pub beta: f64,
    pub robust_se: f64,
    pub n_units: usize,
    pub n_stacked_rows: usize,
    pub first_stage: Option<StageSummary>,
    pub reduced_form: Option<StageSummary>,
    pub control_coefficients: BTreeMap<String, f64>,
    pub dropped_columns: Vec<String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub beta_upper: f64,
    pub beta_lower_equivalent: f64,
    pub absolute_gap: f64,
    /// `|gap| / max(1, |beta_upper|)`
    pub relative_gap: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Unit-level ingredients shared by the upper-level variants.
pub(crate) struct UpperInputs {
    pub outcome: Vec<f64>,
    pub treatment: Vec<f64>,
    pub instrument: Vec<f64>,
    pub controls: Vec<RdaControls>,
}

fn rda_control_columns(set: ControlSet, q: &[RdaControls]) -> Vec<(String, Vec<f64>)> {
    let col = |f: fn(&RdaControls) -> f64| q.iter().map(f).collect::<Vec<f64>>();
    match set {
        ControlSet::AllThreeRda => vec![
            (TOTAL_WEIGHT.into(), col(|c| c.total_weight)),
            (WEIGHTED_RUNNING.into(), col(|c| c.weighted_running)),
            (WEIGHTED_RUNNING_RIGHT.into(), col(|c| c.weighted_running_right)),
        ],
        ControlSet::TotalWeightOnly => vec![(TOTAL_WEIGHT.into(), col(|c| c.total_weight))],
        ControlSet::None => Vec::new(),
    }
}

fn extra_control_columns(
    ds: &Dataset,
    cfg: &DesignConfig,
    rows: Option<&[usize]>,
) -> Result<Vec<(String, Vec<f64>)>> {
    let labels = ds.extra_control_labels(cfg)?;
    Ok(labels
        .into_iter()
        .map(|l| {
            let values = match rows {
                None => ds.units().iter().map(|u| u.extra_controls[&l]).collect(),
                Some(rows) => rows.iter().map(|&i| ds.units()[i].extra_controls[&l]).collect(),
            };
            (l, values)
        })
        .collect())
}

fn fixed_effects(ds: &Dataset, cfg: &DesignConfig, rows: Option<&[usize]>) -> Result<Vec<FixedEffect>> {
    let keys = ds.fe_keys(cfg)?;
    Ok(cfg
        .fe_dimensions
        .iter()
        .zip(keys)
        .map(|(name, k)| match rows {
            None => FixedEffect::from_keys(name.clone(), &k),
            Some(rows) => {
                let picked: Vec<&str> = rows.iter().map(|&i| k[i].as_str()).collect();
                FixedEffect::from_keys(name.clone(), &picked)
            }
        })
        .collect())
}

/// Ingredients of a just-identified IV with one endogenous regressor.
pub(crate) struct IvSpec<'a> {
    pub tag: String,
    pub outcome: Vec<f64>,
    pub treatment: Vec<f64>,
    pub instrument: Vec<f64>,
    pub controls: Vec<(String, Vec<f64>)>,
    pub weights: Vec<f64>,
    pub fixed_effects: Vec<FixedEffect>,
    pub intercept: bool,
    pub cfg: &'a DesignConfig,
    pub n_units: usize,
    pub n_stacked_rows: usize,
}

pub(crate) fn run_iv(spec: IvSpec<'_>) -> Result<EstimateResult> {
    let IvSpec {
        tag,
        mut outcome,
        mut treatment,
        mut instrument,
        mut controls,
        weights,
        fixed_effects,
        intercept,
        cfg,
        n_units,
        n_stacked_rows,
    } = spec;
    let n = outcome.len();
    if n == 0 {
        return Err(RdaError::EmptySample(format!("{tag}: no observations")));
    }
    let mut absorbed = 0;
    let use_intercept = intercept && fixed_effects.is_empty();
    if !fixed_effects.is_empty() {
        let k = 3 + controls.len();
        let m = DMatrix::from_fn(n, k, |i, c| match c {
            0 => outcome[i],
            1 => treatment[i],
            2 => instrument[i],
            _ => controls[c - 3].1[i],
        });
        let a = absorb_fixed_effects(&m, &fixed_effects, &weights, DEFAULT_ABSORB_TOL)?;
        outcome = a.column(0).iter().copied().collect();
        treatment = a.column(1).iter().copied().collect();
        instrument = a.column(2).iter().copied().collect();
        for (c, col) in controls.iter_mut().enumerate() {
            col.1 = a.column(3 + c).iter().copied().collect();
        }
        absorbed = absorbed_dof(&fixed_effects, &weights);
    }

    let build = |first: (&str, &Vec<f64>)| {
        let mut p = RegressionProblem::new(outcome.clone(), weights.clone())
            .with_absorbed_dof(absorbed)
            .with_weak_f_threshold(cfg.weak_f_threshold)
            .with_column(first.0, first.1.clone());
        if use_intercept {
            p = p.with_intercept();
        }
        for (l, v) in &controls {
            p = p.with_column(l.clone(), v.clone());
        }
        p
    };

    let iv = tsls_fit(&build((TREATMENT, &treatment)).with_instrument(TREATMENT, INSTRUMENT, instrument.clone()))?;
    let rf = wls_fit(&build((INSTRUMENT, &instrument)))?;
    Ok(assemble(tag, &iv, Some(&rf), n_units, n_stacked_rows))
}

fn assemble(
    tag: String,
    fit: &FitResult,
    rf: Option<&FitResult>,
    n_units: usize,
    n_stacked_rows: usize,
) -> EstimateResult {
    let beta = fit.coef(TREATMENT).unwrap_or(f64::NAN);
    let robust_se = fit.se(TREATMENT).unwrap_or(f64::NAN);
    let first_stage = fit.first_stage.first().map(|fs| StageSummary {
        coefficient: fs.coefficient,
        robust_se: fs.robust_se,
        partial_f: Some(fs.partial_f),
    });
    let reduced_form = rf.map(|rf| StageSummary {
        coefficient: rf.coef(INSTRUMENT).unwrap_or(f64::NAN),
        robust_se: rf.se(INSTRUMENT).unwrap_or(f64::NAN),
        partial_f: None,
    });
    let control_coefficients = fit
        .coefficients
        .iter()
        .filter(|c| c.label != TREATMENT)
        .map(|c| (c.label.clone(), c.estimate))
        .collect();
    let mut warnings = fit.warnings.clone();
    if let Some(rf) = rf {
        warnings.extend(rf.warnings.iter().map(|w| format!("reduced form: {w}")));
    }
    EstimateResult {
        specification: tag,
        beta,
        robust_se,
        n_units,
        n_stacked_rows,
        first_stage,
        reduced_form,
        control_coefficients,
        dropped_columns: fit.dropped_columns.clone(),
        warnings,
    }
}

fn upper_tag(set: ControlSet) -> &'static str {
    match set {
        ControlSet::AllThreeRda => "upper",
        ControlSet::TotalWeightOnly => "upper_benchmark",
        ControlSet::None => "upper_no_rda_controls",
    }
}

pub(crate) fn estimate_upper_from(
    ds: &Dataset,
    cfg: &DesignConfig,
    inputs: UpperInputs,
    tag: String,
) -> Result<EstimateResult> {
    if cfg.control_set == ControlSet::None && !cfg.include_intercept && cfg.fe_dimensions.is_empty() {
        return Err(RdaError::Config(
            "identification needs at least the total close weight or an intercept".into(),
        ));
    }
    let mut controls = rda_control_columns(cfg.control_set, &inputs.controls);
    controls.extend(extra_control_columns(ds, cfg, None)?);
    run_iv(IvSpec {
        tag,
        outcome: inputs.outcome,
        treatment: inputs.treatment,
        instrument: inputs.instrument,
        controls,
        weights: ds.analysis_weights(),
        fixed_effects: fixed_effects(ds, cfg, None)?,
        intercept: cfg.include_intercept,
        cfg,
        n_units: ds.units().len(),
        n_stacked_rows: 0,
    })
}

/// Upper-level IV with the configured control set, extra controls and absorbed fixed effects.
pub fn estimate_upper(ds: &Dataset, cfg: &DesignConfig) -> Result<EstimateResult> {
    cfg.validate()?;
    let inputs = UpperInputs {
        outcome: ds.outcomes(),
        treatment: aggregate_treatment(ds, cfg)?,
        instrument: build_instrument(ds, cfg)?,
        controls: build_rda_controls(ds, cfg)?,
    };
    estimate_upper_from(ds, cfg, inputs, upper_tag(cfg.control_set).into())
}

/// The under-controlled benchmark: upper-level IV controlling only for `Σs` (and the intercept).
pub fn estimate_benchmark(ds: &Dataset, cfg: &DesignConfig) -> Result<EstimateResult> {
    let cfg = DesignConfig {
        control_set: ControlSet::TotalWeightOnly,
        ..cfg.clone()
    };
    estimate_upper(ds, &cfg)
}

/// A row of a subunit-level (or pair-level) fuzzy RD sample.
pub(crate) struct PairRow {
    pub unit: usize,
    pub outcome: f64,
    pub treatment: f64,
    pub q: [f64; 3],
    pub instrument: f64,
    pub weight: f64,
}

pub(crate) fn row_weight(cfg: &DesignConfig, importance: f64, running: f64, analysis: f64) -> Result<f64> {
    let k = kernel_weight(running, cfg.bandwidth, cfg.kernel)?;
    Ok(match cfg.lower_weighting {
        LowerWeighting::Importance => importance * k,
        LowerWeighting::ImportanceTimesAnalysis => importance * k * analysis,
    })
}

pub(crate) fn stacked_iv(ds: &Dataset, cfg: &DesignConfig, rows: &[PairRow], tag: &str) -> Result<EstimateResult> {
    if rows.is_empty() {
        return Err(RdaError::EmptySample(format!("{tag}: no close subunits in the stacked sample")));
    }
    let units: Vec<usize> = rows.iter().map(|r| r.unit).collect();
    let mut controls = vec![
        (RUNNING.to_string(), rows.iter().map(|r| r.q[1]).collect::<Vec<_>>()),
        (RUNNING_RIGHT.to_string(), rows.iter().map(|r| r.q[2]).collect()),
    ];
    controls.extend(extra_control_columns(ds, cfg, Some(&units))?);
    let n_units = units.iter().collect::<BTreeSet<_>>().len();
    run_iv(IvSpec {
        tag: tag.to_string(),
        outcome: rows.iter().map(|r| r.outcome).collect(),
        treatment: rows.iter().map(|r| r.treatment).collect(),
        instrument: rows.iter().map(|r| r.instrument).collect(),
        controls,
        weights: rows.iter().map(|r| r.weight).collect(),
        fixed_effects: fixed_effects(ds, cfg, Some(&units))?,
        intercept: true,
        cfg,
        n_units,
        n_stacked_rows: rows.len(),
    })
}

/// Lower-level (stacking) fuzzy RD on all close subunits.
pub fn estimate_lower(ds: &Dataset, cfg: &DesignConfig) -> Result<EstimateResult> {
    cfg.validate()?;
    let stack = stack_lower(ds, cfg)?;
    let rows = stack
        .iter()
        .map(|r| {
            let s = &ds.subunits()[r.subunit];
            Ok(PairRow {
                unit: r.unit,
                outcome: r.outcome,
                treatment: r.treatment,
                q: r.q,
                instrument: r.instrument,
                weight: row_weight(cfg, s.importance, s.running, ds.units()[r.unit].analysis_weight)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    stacked_iv(ds, cfg, &rows, "lower")
}

/// Compares the upper-level estimate with the subunit-level IV on
/// unit-residualized outcome and treatment.
///
/// Path B residualizes `Y` and `X` on `W = (Q, W̃, fixed effects)` at the unit
/// level, copies the residuals onto the close subunits, and runs an IV on
/// `(1, r, r⁺)` with weights `s_j` times the owning unit's analysis weight
/// (which reduces to `s_j` when units are unweighted).
pub fn verify_equivalence(ds: &Dataset, cfg: &DesignConfig, tolerance: f64) -> Result<EquivalenceReport> {
    cfg.validate()?;
    cfg.uniform_kernel_required("the equivalence check")?;
    let cfg = DesignConfig {
        control_set: ControlSet::AllThreeRda,
        ..cfg.clone()
    };
    let (upper, lower) = rayon::join(|| estimate_upper(ds, &cfg), || lower_equivalent(ds, &cfg));
    let beta_upper = upper?.beta;
    let beta_lower_equivalent = lower?;
    let absolute_gap = (beta_upper - beta_lower_equivalent).abs();
    let relative_gap = absolute_gap / beta_upper.abs().max(1.0);
    Ok(EquivalenceReport {
        beta_upper,
        beta_lower_equivalent,
        absolute_gap,
        relative_gap,
        tolerance,
        pass: relative_gap <= tolerance,
    })
}

fn lower_equivalent(ds: &Dataset, cfg: &DesignConfig) -> Result<f64> {
    let n = ds.units().len();
    let w = ds.analysis_weights();
    let q = build_rda_controls(ds, cfg)?;
    let x = aggregate_treatment(ds, cfg)?;
    let y = ds.outcomes();

    let mut basis: Vec<Vec<f64>> = Vec::new();
    let fes = fixed_effects(ds, cfg, None)?;
    if fes.is_empty() && cfg.include_intercept {
        basis.push(vec![1.0; n]);
    }
    for (_, col) in rda_control_columns(ControlSet::AllThreeRda, &q) {
        basis.push(col);
    }
    for (_, col) in extra_control_columns(ds, cfg, None)? {
        basis.push(col);
    }
    let mut targets = DMatrix::from_fn(n, 2, |i, c| if c == 0 { y[i] } else { x[i] });
    let mut on = DMatrix::from_fn(n, basis.len(), |i, c| basis[c][i]);
    if !fes.is_empty() {
        targets = absorb_fixed_effects(&targets, &fes, &w, DEFAULT_ABSORB_TOL)?;
        on = absorb_fixed_effects(&on, &fes, &w, DEFAULT_ABSORB_TOL)?;
    }
    let resid = residualize(&targets, &on, &w)?;

    let stack = stack_lower(ds, cfg)?;
    if stack.is_empty() {
        return Err(RdaError::EmptySample("no close subunits".into()));
    }
    let col = |f: &dyn Fn(&crate::design::StackedRow) -> f64| stack.iter().map(f).collect::<Vec<f64>>();
    let problem = RegressionProblem::new(
        col(&|r| resid[(r.unit, 0)]),
        col(&|r| r.importance * w[r.unit]),
    )
    .with_column(TREATMENT, col(&|r| resid[(r.unit, 1)]))
    .with_intercept()
    .with_column(RUNNING, col(&|r| r.q[1]))
    .with_column(RUNNING_RIGHT, col(&|r| r.q[2]))
    .with_instrument(TREATMENT, INSTRUMENT, col(&|r| r.instrument));
    let fit = tsls_fit(&problem)?;
    Ok(fit.coef(TREATMENT).unwrap_or(f64::NAN))
}

/// One subunit with its own outcome, for conventional sharp RD.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubunitOutcome {
    pub subunit_id: String,
    pub running: f64,
    pub outcome: f64,
    pub importance: f64,
}

impl SubunitOutcome {
    pub fn new(id: impl Into<String>, running: f64, outcome: f64) -> Self {
        Self {
            subunit_id: id.into(),
            running,
            outcome,
            importance: 1.0,
        }
    }
}

pub const MIN_OBS_PER_SIDE: usize = 4;

/// Local linear sharp RD: WLS of `Y` on `(z, 1, r, r⁺)` within the band.
pub fn estimate_sharp_rd(obs: &[SubunitOutcome], cfg: &DesignConfig) -> Result<EstimateResult> {
    cfg.validate()?;
    let mut sorted: Vec<&SubunitOutcome> = obs.iter().filter(|o| o.running.abs() <= cfg.bandwidth).collect();
    sorted.sort_by(|a, b| a.subunit_id.cmp(&b.subunit_id));
    let right = sorted.iter().filter(|o| cfg.cutoff_rule.crosses(o.running)).count();
    let left = sorted.len() - right;
    for (side, count) in [("left", left), ("right", right)] {
        if count < MIN_OBS_PER_SIDE {
            return Err(RdaError::TooFewObservations {
                side,
                count,
                needed: MIN_OBS_PER_SIDE,
            });
        }
    }
    let weights = sorted
        .iter()
        .map(|o| {
            if !(o.importance > 0.0) {
                return Err(RdaError::InvalidRecord {
                    id: o.subunit_id.clone(),
                    reason: "importance weight must be positive".into(),
                });
            }
            Ok(o.importance * kernel_weight(o.running, cfg.bandwidth, cfg.kernel)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let col = |f: &dyn Fn(&SubunitOutcome) -> f64| sorted.iter().map(|o| f(o)).collect::<Vec<f64>>();
    let problem = RegressionProblem::new(col(&|o| o.outcome), weights)
        .with_column(TREATMENT, col(&|o| cfg.cutoff_rule.indicator(o.running)))
        .with_intercept()
        .with_column(RUNNING, col(&|o| o.running))
        .with_column(RUNNING_RIGHT, col(&|o| cfg.cutoff_rule.positive_part(o.running)));
    let fit = wls_fit(&problem)?;
    Ok(assemble("sharp_rd".into(), &fit, None, sorted.len(), 0))
}
