use serde::Serialize;

use crate::design::{kernel_weight, Dataset, DesignConfig, StackedRow};
use crate::error::{RdaError, Result};
use crate::estimators::SubunitOutcome;
use crate::regress::{wls_fit, RegressionProblem};

pub const DEFAULT_BINS_PER_SIDE: usize = 20;

/// One plotted observation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlotPoint {
    pub id: String,
    pub running: f64,
    pub outcome: f64,
    pub weight: f64,
}

impl PlotPoint {
    /// Stacked rows, weighted by importance times kernel weight.
    pub fn from_stack(ds: &Dataset, rows: &[StackedRow]) -> Vec<PlotPoint> {
        rows.iter()
            .map(|r| PlotPoint {
                id: r.subunit_id.clone(),
                running: ds.subunits()[r.subunit].running,
                outcome: r.outcome,
                weight: r.importance * r.kernel_weight,
            })
            .collect()
    }

    pub fn from_outcomes(obs: &[SubunitOutcome], cfg: &DesignConfig) -> Result<Vec<PlotPoint>> {
        obs.iter()
            .filter(|o| o.running.abs() <= cfg.bandwidth)
            .map(|o| {
                Ok(PlotPoint {
                    id: o.subunit_id.clone(),
                    running: o.running,
                    outcome: o.outcome,
                    weight: o.importance * kernel_weight(o.running, cfg.bandwidth, cfg.kernel)?,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlotBin {
    pub side: Side,
    pub mean_running: f64,
    pub mean_outcome: f64,
    pub weight: f64,
    pub n: usize,
}

/// `outcome = intercept + slope · r` on one side of the cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FittedLine {
    pub intercept: f64,
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RdPlot {
    pub bins: Vec<PlotBin>,
    pub left_line: Option<FittedLine>,
    pub right_line: Option<FittedLine>,
    /// Target weight per bin on each side (total weight / bins).
    pub target_weight: [f64; 2],
    pub notices: Vec<String>,
}

/// Weight-balanced bins on each side of the cutoff plus the local linear fit.
///
/// Each side is sorted by `(r, id)` and cut where the cumulative weight comes
/// closest to `k · W / n_bins`. Observations heavier than a bin target can make
/// adjacent cuts coincide; the resulting empty bins are dropped.
pub fn rd_plot_data(points: &[PlotPoint], n_bins_per_side: usize, cfg: &DesignConfig) -> Result<RdPlot> {
    cfg.validate()?;
    if n_bins_per_side == 0 {
        return Err(RdaError::Config("need at least one bin per side".into()));
    }
    for p in points {
        if !(p.weight >= 0.0) || !p.weight.is_finite() {
            return Err(RdaError::InvalidRecord {
                id: p.id.clone(),
                reason: format!("weight {} is not a finite nonnegative number", p.weight),
            });
        }
    }
    let mut left: Vec<&PlotPoint> = points.iter().filter(|p| !cfg.cutoff_rule.crosses(p.running)).collect();
    let mut right: Vec<&PlotPoint> = points.iter().filter(|p| cfg.cutoff_rule.crosses(p.running)).collect();
    if left.is_empty() || right.is_empty() {
        return Err(RdaError::TooFewObservations {
            side: if left.is_empty() { "left" } else { "right" },
            count: 0,
            needed: 1,
        });
    }
    let mut notices = Vec::new();
    let mut bins = Vec::new();
    let mut target_weight = [0.0; 2];
    for (k, (side, pts)) in [(Side::Left, &mut left), (Side::Right, &mut right)].into_iter().enumerate() {
        pts.sort_by(|a, b| a.running.total_cmp(&b.running).then_with(|| a.id.cmp(&b.id)));
        let mut n_bins = n_bins_per_side;
        if pts.len() < n_bins {
            notices.push(format!(
                "{side:?} side has {} observations; using {} bins instead of {n_bins}",
                pts.len(),
                pts.len()
            ));
            n_bins = pts.len();
        }
        let (side_bins, target, dropped) = bin_side(side, pts, n_bins);
        if dropped > 0 {
            notices.push(format!("{side:?} side: {dropped} empty bins dropped after cutting"));
        }
        target_weight[k] = target;
        bins.extend(side_bins);
    }
    let (left_line, right_line) = fit_lines(points, cfg);
    if left_line.is_none() || right_line.is_none() {
        notices.push("local linear fit is not identified on this sample".into());
    }
    Ok(RdPlot {
        bins,
        left_line,
        right_line,
        target_weight,
        notices,
    })
}

fn bin_side(side: Side, pts: &[&PlotPoint], n_bins: usize) -> (Vec<PlotBin>, f64, usize) {
    let mut cum = Vec::with_capacity(pts.len() + 1);
    cum.push(0.0);
    for p in pts {
        cum.push(cum.last().unwrap() + p.weight);
    }
    let total = *cum.last().unwrap();
    let target = total / n_bins as f64;
    let mut cuts = vec![0usize];
    for k in 1..n_bins {
        let t = k as f64 * total / n_bins as f64;
        let hi = cum.partition_point(|&c| c < t);
        let idx = if hi == 0 {
            0
        } else if hi >= cum.len() || (t - cum[hi - 1]) <= (cum[hi] - t) {
            hi - 1
        } else {
            hi
        };
        cuts.push(idx.max(*cuts.last().unwrap()));
    }
    cuts.push(pts.len());
    let mut bins = Vec::new();
    let mut dropped = 0;
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if a == b {
            dropped += 1;
            continue;
        }
        let slice = &pts[a..b];
        let weight: f64 = slice.iter().map(|p| p.weight).sum();
        let (mr, my) = if weight > 0.0 {
            (
                slice.iter().map(|p| p.weight * p.running).sum::<f64>() / weight,
                slice.iter().map(|p| p.weight * p.outcome).sum::<f64>() / weight,
            )
        } else {
            let n = slice.len() as f64;
            (
                slice.iter().map(|p| p.running).sum::<f64>() / n,
                slice.iter().map(|p| p.outcome).sum::<f64>() / n,
            )
        };
        bins.push(PlotBin {
            side,
            mean_running: mr,
            mean_outcome: my,
            weight,
            n: b - a,
        });
    }
    (bins, target, dropped)
}

fn fit_lines(points: &[PlotPoint], cfg: &DesignConfig) -> (Option<FittedLine>, Option<FittedLine>) {
    let col = |f: &dyn Fn(&PlotPoint) -> f64| points.iter().map(f).collect::<Vec<f64>>();
    let problem = RegressionProblem::new(col(&|p| p.outcome), col(&|p| p.weight))
        .with_intercept()
        .with_column("running", col(&|p| p.running))
        .with_column("running_right", col(&|p| cfg.cutoff_rule.positive_part(p.running)))
        .with_column("jump", col(&|p| cfg.cutoff_rule.indicator(p.running)));
    let Ok(fit) = wls_fit(&problem) else {
        return (None, None);
    };
    let a = fit.coef("intercept");
    let b = fit.coef("running");
    let c = fit.coef("running_right");
    let d = fit.coef("jump");
    let left = match (a, b) {
        (Some(a), Some(b)) if a.is_finite() && b.is_finite() => Some(FittedLine { intercept: a, slope: b }),
        _ => None,
    };
    let right = match (a, b, c, d) {
        (Some(a), Some(b), Some(c), Some(d)) if [a, b, c, d].iter().all(|v| v.is_finite()) => Some(FittedLine {
            intercept: a + d,
            slope: b + c,
        }),
        _ => None,
    };
    (left, right)
}
