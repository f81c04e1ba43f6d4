use crate::design::{
    build_spillover_exposure, collapse_by_intervention, kernel_weight, Dataset, DesignConfig,
    SpilloverGraph,
};
use crate::error::{RdaError, Result};
use crate::regress::{tsls_fit, wls_fit, RegressionProblem};

use super::{
    assemble, estimate_upper_from, row_weight, stacked_iv, upper_tag, EstimateResult, PairRow,
    UpperInputs, INSTRUMENT, RUNNING, RUNNING_RIGHT, TREATMENT,
};

/// Upper-level IV where each unit's exposure set comes from the graph.
pub fn estimate_spillover_upper(
    graph: &SpilloverGraph,
    ds: &Dataset,
    cfg: &DesignConfig,
) -> Result<EstimateResult> {
    let exposure = build_spillover_exposure(graph, ds, cfg)?;
    let inputs = UpperInputs {
        outcome: ds.outcomes(),
        treatment: exposure.iter().map(|e| e.treatment).collect(),
        instrument: exposure.iter().map(|e| e.instrument).collect(),
        controls: exposure.iter().map(|e| e.controls).collect(),
    };
    estimate_upper_from(ds, cfg, inputs, format!("spillover_{}", upper_tag(cfg.control_set)))
}

/// Pair-level IV: one row per (close subunit, neighboring unit), ordered by subunit.
pub fn estimate_spillover_bilateral(
    graph: &SpilloverGraph,
    ds: &Dataset,
    cfg: &DesignConfig,
) -> Result<EstimateResult> {
    let exposure = build_spillover_exposure(graph, ds, cfg)?;
    let mut rows = Vec::new();
    for (j, s) in ds.subunits().iter().enumerate() {
        if !cfg.is_close(s) {
            continue;
        }
        for &i in graph.neighbors(j) {
            let u = &ds.units()[i];
            rows.push(PairRow {
                unit: i,
                outcome: u.outcome,
                treatment: exposure[i].treatment,
                q: [1.0, s.running, cfg.cutoff_rule.positive_part(s.running)],
                instrument: cfg.cutoff_rule.indicator(s.running),
                weight: row_weight(cfg, s.importance, s.running, u.analysis_weight)?,
            });
        }
    }
    stacked_iv(ds, cfg, &rows, "spillover_bilateral")
}

/// IV on one record per close subunit, with neighbor outcomes and treatments averaged.
///
/// Matches the bilateral estimator exactly when no unit-level controls or
/// fixed effects are configured; those are not defined at the subunit level
/// and are rejected here.
pub fn estimate_spillover_collapsed(
    graph: &SpilloverGraph,
    ds: &Dataset,
    cfg: &DesignConfig,
) -> Result<EstimateResult> {
    if !cfg.fe_dimensions.is_empty() || !ds.extra_control_labels(cfg)?.is_empty() {
        return Err(RdaError::Unsupported(
            "the collapsed estimator takes no unit-level controls or fixed effects".into(),
        ));
    }
    let collapse = collapse_by_intervention(graph, ds, cfg)?;
    let recs = &collapse.records;
    if recs.is_empty() {
        return Err(RdaError::EmptySample("spillover_collapsed: no close subunits with neighbors".into()));
    }
    let weights = recs
        .iter()
        .map(|r| Ok(r.weight * kernel_weight(r.q[1], cfg.bandwidth, cfg.kernel)?))
        .collect::<Result<Vec<_>>>()?;
    let col = |f: &dyn Fn(&crate::design::CollapsedRecord) -> f64| recs.iter().map(f).collect::<Vec<f64>>();
    let base = |first: &str, v: Vec<f64>| {
        RegressionProblem::new(col(&|r| r.mean_outcome), weights.clone())
            .with_weak_f_threshold(cfg.weak_f_threshold)
            .with_column(first, v)
            .with_intercept()
            .with_column(RUNNING, col(&|r| r.q[1]))
            .with_column(RUNNING_RIGHT, col(&|r| r.q[2]))
    };
    let iv = tsls_fit(
        &base(TREATMENT, col(&|r| r.mean_treatment)).with_instrument(TREATMENT, INSTRUMENT, col(&|r| r.instrument)),
    )?;
    let rf = wls_fit(&base(INSTRUMENT, col(&|r| r.instrument)))?;
    let mut out = assemble("spillover_collapsed".into(), &iv, Some(&rf), ds.units().len(), recs.len());
    out.n_units = recs
        .iter()
        .flat_map(|r| ds.subunit_index(&r.subunit_id).map(|j| graph.neighbors(j).to_vec()).unwrap_or_default())
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    out.warnings.extend(collapse.notices);
    Ok(out)
}
