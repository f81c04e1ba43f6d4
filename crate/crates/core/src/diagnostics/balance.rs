use nalgebra::DMatrix;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, FisherSnedecor, Normal};

use crate::design::{aggregate_treatment, build_instrument, build_rda_controls, ControlSet, Dataset, DesignConfig};
use crate::error::{RdaError, Result};
use crate::regress::{absorb_fixed_effects, absorbed_dof, wls_fit, FixedEffect, RegressionProblem, DEFAULT_ABSORB_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceTarget {
    Treatment,
    Instrument,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FKind {
    /// Robust Wald statistic divided by the number of covariates.
    #[default]
    RobustWald,
    /// Homoskedastic F from the two residual sums of squares.
    Classical,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceCoefficient {
    pub covariate: String,
    pub estimate: f64,
    pub robust_se: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceReport {
    pub target: BalanceTarget,
    pub control_set: ControlSet,
    pub coefficients: Vec<BalanceCoefficient>,
    pub n_significant: usize,
    pub partial_r2: f64,
    pub partial_f: f64,
    pub partial_f_pvalue: f64,
    pub f_kind: FKind,
    pub n_obs: usize,
    /// Units dropped for a missing covariate value.
    pub n_dropped_missing: usize,
    pub dropped_columns: Vec<String>,
    pub rss_controls_only: f64,
    pub rss_full: f64,
}

const RDA_LABELS: [&str; 3] = ["rda_total_weight", "rda_weighted_running", "rda_weighted_running_right"];

/// Regresses the treatment or instrument on unit covariates plus the chosen
/// RDA controls, and measures what the covariates add beyond the controls.
///
/// Covariates are read from the units' extra controls; units missing any of
/// them are dropped and counted.
pub fn balance_test(
    ds: &Dataset,
    target: BalanceTarget,
    covariates: &[String],
    control_set: ControlSet,
    cfg: &DesignConfig,
    f_kind: FKind,
) -> Result<BalanceReport> {
    cfg.validate()?;
    let y_all = match target {
        BalanceTarget::Treatment => aggregate_treatment(ds, cfg)?,
        BalanceTarget::Instrument => build_instrument(ds, cfg)?,
    };
    let q = build_rda_controls(ds, cfg)?;
    let keep: Vec<usize> = (0..ds.units().len())
        .filter(|&i| covariates.iter().all(|c| ds.units()[i].extra_controls.get(c).is_some_and(|v| v.is_finite())))
        .collect();
    let n_dropped_missing = ds.units().len() - keep.len();
    if keep.is_empty() {
        return Err(RdaError::EmptySample("no unit has every covariate".into()));
    }
    let n = keep.len();
    let weights: Vec<f64> = keep.iter().map(|&i| ds.units()[i].analysis_weight).collect();

    let n_rda = match control_set {
        ControlSet::AllThreeRda => 3,
        ControlSet::TotalWeightOnly => 1,
        ControlSet::None => 0,
    };
    let k = covariates.len();
    // column 0 target, then covariates, then RDA controls
    let mut m = DMatrix::from_fn(n, 1 + k + n_rda, |r, c| {
        let i = keep[r];
        if c == 0 {
            y_all[i]
        } else if c <= k {
            ds.units()[i].extra_controls[&covariates[c - 1]]
        } else {
            q[i].as_array()[c - 1 - k]
        }
    });

    let fe_keys = ds.fe_keys(cfg)?;
    let effects: Vec<FixedEffect> = cfg
        .fe_dimensions
        .iter()
        .zip(&fe_keys)
        .map(|(name, keys)| {
            let picked: Vec<&str> = keep.iter().map(|&i| keys[i].as_str()).collect();
            FixedEffect::from_keys(name.clone(), &picked)
        })
        .collect();
    let mut absorbed = 0;
    if !effects.is_empty() {
        m = absorb_fixed_effects(&m, &effects, &weights, DEFAULT_ABSORB_TOL)?;
        absorbed = absorbed_dof(&effects, &weights);
    }

    let build = |with_covariates: bool| {
        let mut p = RegressionProblem::new(m.column(0).iter().copied().collect(), weights.clone())
            .with_absorbed_dof(absorbed);
        if effects.is_empty() {
            p = p.with_intercept();
        }
        if with_covariates {
            for (c, name) in covariates.iter().enumerate() {
                p = p.with_column(name.clone(), m.column(1 + c).iter().copied().collect());
            }
        }
        for r in 0..n_rda {
            p = p.with_column(RDA_LABELS[r], m.column(1 + k + r).iter().copied().collect());
        }
        p
    };
    let full = wls_fit(&build(true))?;
    let restricted = wls_fit(&build(false))?;

    let z_crit = Normal::standard().inverse_cdf(0.975);
    let coefficients: Vec<BalanceCoefficient> = covariates
        .iter()
        .filter_map(|c| {
            let estimate = full.coef(c)?;
            let robust_se = full.se(c)?;
            Some(BalanceCoefficient {
                covariate: c.clone(),
                estimate,
                robust_se,
                significant: (estimate / robust_se).abs() > z_crit,
            })
        })
        .collect();
    let n_significant = coefficients.iter().filter(|c| c.significant).count();

    let rss_full = full.weighted_rss;
    let rss_controls_only = restricted.weighted_rss;
    let partial_r2 = if coefficients.is_empty() || rss_controls_only <= 0.0 {
        0.0
    } else {
        ((rss_controls_only - rss_full) / rss_controls_only).clamp(0.0, 1.0)
    };

    let kept: Vec<&str> = coefficients.iter().map(|c| c.covariate.as_str()).collect();
    let (partial_f, partial_f_pvalue) = if kept.is_empty() {
        (f64::NAN, 1.0)
    } else {
        match f_kind {
            FKind::RobustWald => {
                let w = full.robust_wald(&kept)?;
                (w.f, w.p_value)
            }
            FKind::Classical => {
                let df1 = kept.len() as f64;
                let df2 = full.dof as f64;
                if df2 <= 0.0 {
                    (f64::NAN, f64::NAN)
                } else {
                    let f = ((rss_controls_only - rss_full) / df1) / (rss_full / df2);
                    let dist = FisherSnedecor::new(df1, df2).map_err(|e| RdaError::Config(e.to_string()))?;
                    (f, if f.is_finite() { 1.0 - dist.cdf(f) } else { f64::NAN })
                }
            }
        }
    };

    Ok(BalanceReport {
        target,
        control_set,
        coefficients,
        n_significant,
        partial_r2,
        partial_f,
        partial_f_pvalue,
        f_kind,
        n_obs: full.n_obs,
        n_dropped_missing,
        dropped_columns: full.dropped_columns.clone(),
        rss_controls_only,
        rss_full,
    })
}
