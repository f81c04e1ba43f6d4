//! Monte Carlo laboratory: DGP draws, bandwidth sweeps and bias/SD summaries.

mod bootstrap;
mod dgp;
mod oracle;

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::design::{CutoffRule, Dataset, DesignConfig};
use crate::error::{RdaError, Result};
use crate::estimators::{estimate_benchmark, estimate_lower, estimate_upper, EstimateResult};

pub use bootstrap::{bootstrap_median_ci, bootstrap_sd_se, median, sample_sd};
pub use dgp::{
    generate_dgp, Baseline, DgpSpec, EffectParams, ImportanceScheme, OutcomeKind, SimDataset,
};
pub use oracle::{estimand_oracle, expected_unit_weight, OracleEstimate, OracleOptions};

/// Generator for one replication: the seed picks the key, the index picks the stream.
pub fn replication_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `{0.25, 0.35, …, 1.25}`
pub fn default_h_grid() -> Vec<f64> {
    (0..=10).map(|k| (25 + 10 * k) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum McEstimator {
    Upper,
    Lower,
    Benchmark,
}

impl McEstimator {
    pub const ALL: [McEstimator; 3] = [McEstimator::Upper, McEstimator::Lower, McEstimator::Benchmark];

    pub fn name(self) -> &'static str {
        match self {
            McEstimator::Upper => "upper",
            McEstimator::Lower => "lower",
            McEstimator::Benchmark => "benchmark",
        }
    }

    pub fn estimate(self, ds: &Dataset, cfg: &DesignConfig) -> Result<EstimateResult> {
        match self {
            McEstimator::Upper => estimate_upper(ds, cfg),
            McEstimator::Lower => estimate_lower(ds, cfg),
            McEstimator::Benchmark => estimate_benchmark(ds, cfg),
        }
    }
}

impl std::str::FromStr for McEstimator {
    type Err = RdaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "upper" => Ok(McEstimator::Upper),
            "lower" => Ok(McEstimator::Lower),
            "benchmark" => Ok(McEstimator::Benchmark),
            _ => Err(RdaError::Config(format!("unknown estimator `{s}`"))),
        }
    }
}

/// Configuration used for every simulated estimate: strict cutoff, bandwidth `h`.
pub fn simulation_config(h: f64) -> DesignConfig {
    DesignConfig {
        bandwidth: h,
        cutoff_rule: CutoffRule::StrictGt,
        ..DesignConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McCell {
    pub estimator: McEstimator,
    pub h: f64,
    pub median_bias: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub sd: f64,
    pub n_ok: usize,
    pub n_fail: usize,
}

/// Replication-level draws for one `(estimator, h)` cell; `None` marks a failure.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McDraws {
    pub estimator: McEstimator,
    pub h: f64,
    pub beta: Vec<Option<f64>>,
    pub reduced_form: Vec<Option<f64>>,
}

impl McDraws {
    pub fn ok_betas(&self) -> Vec<f64> {
        self.beta.iter().flatten().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McSummary {
    pub truth: f64,
    pub n_replications: usize,
    pub rows: Vec<McCell>,
    /// Set when more than 1% of the estimates in any cell failed.
    pub excess_failures: bool,
    #[serde(skip)]
    pub draws: Vec<McDraws>,
}

impl McSummary {
    pub fn cell(&self, estimator: McEstimator, h: f64) -> Option<&McCell> {
        self.rows.iter().find(|c| c.estimator == estimator && (c.h - h).abs() < 1e-9)
    }

    pub fn draws_for(&self, estimator: McEstimator, h: f64) -> Option<&McDraws> {
        self.draws.iter().find(|c| c.estimator == estimator && (c.h - h).abs() < 1e-9)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "estimator,h,median_bias,ci_lo,ci_hi,sd,n_ok,n_fail")?;
        for c in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                c.estimator.name(),
                c.h,
                c.median_bias,
                c.ci_lo,
                c.ci_hi,
                c.sd,
                c.n_ok,
                c.n_fail
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McOptions {
    pub estimators: Vec<McEstimator>,
    pub h_grid: Vec<f64>,
    pub n_replications: usize,
    pub n_bootstrap: usize,
    pub level: f64,
    /// Seeds the bootstrap; the data are seeded by the spec.
    pub seed: u64,
}

impl Default for McOptions {
    fn default() -> Self {
        Self {
            estimators: McEstimator::ALL.to_vec(),
            h_grid: default_h_grid(),
            n_replications: 500,
            n_bootstrap: 300,
            level: 0.95,
            seed: 0,
        }
    }
}

type Outcome = (Option<f64>, Option<f64>);

fn evaluate(est: McEstimator, ds: &Dataset, h: f64) -> Outcome {
    match est.estimate(ds, &simulation_config(h)) {
        Ok(r) if r.beta.is_finite() => (Some(r.beta), r.reduced_form.map(|rf| rf.coefficient)),
        _ => (None, None),
    }
}

/// Runs every `(estimator, h)` on each replication's dataset and summarizes.
///
/// Replications run in parallel; results are gathered in replication order,
/// so the summary does not depend on scheduling.
pub fn run_monte_carlo(spec: &DgpSpec, opts: &McOptions) -> Result<McSummary> {
    spec.validate()?;
    if opts.n_replications < 2 {
        return Err(RdaError::Config("n_replications must be at least 2".into()));
    }
    if opts.estimators.is_empty() || opts.h_grid.is_empty() {
        return Err(RdaError::Config("need at least one estimator and one bandwidth".into()));
    }
    for &h in &opts.h_grid {
        simulation_config(h).validate()?;
    }
    let truth = match spec.true_effect() {
        Some(t) => t,
        None => estimand_oracle(spec, &OracleOptions::default())?.beta0,
    };
    let cells: Vec<(McEstimator, f64)> = opts
        .estimators
        .iter()
        .flat_map(|&e| opts.h_grid.iter().map(move |&h| (e, h)))
        .collect();

    let per_rep: Vec<Vec<Outcome>> = (0..opts.n_replications as u64)
        .into_par_iter()
        .map(|rep| match generate_dgp(spec, rep) {
            Ok(sim) => cells.iter().map(|&(e, h)| evaluate(e, &sim.dataset, h)).collect(),
            Err(_) => vec![(None, None); cells.len()],
        })
        .collect();

    let mut rows = Vec::with_capacity(cells.len());
    let mut draws = Vec::with_capacity(cells.len());
    let mut excess_failures = false;
    for (k, &(estimator, h)) in cells.iter().enumerate() {
        let beta: Vec<Option<f64>> = per_rep.iter().map(|r| r[k].0).collect();
        let reduced_form: Vec<Option<f64>> = per_rep.iter().map(|r| r[k].1).collect();
        let bias: Vec<f64> = beta.iter().flatten().map(|b| b - truth).collect();
        let n_ok = bias.len();
        let n_fail = opts.n_replications - n_ok;
        if n_fail * 100 > opts.n_replications {
            excess_failures = true;
        }
        let (median_bias, ci_lo, ci_hi, sd) = if n_ok == 0 {
            (f64::NAN, f64::NAN, f64::NAN, f64::NAN)
        } else {
            let (lo, hi) = bootstrap_median_ci(&bias, opts.n_bootstrap, opts.level, cell_seed(opts.seed, k))?;
            (median(&bias), lo, hi, sample_sd(&bias))
        };
        rows.push(McCell {
            estimator,
            h,
            median_bias,
            ci_lo,
            ci_hi,
            sd,
            n_ok,
            n_fail,
        });
        draws.push(McDraws {
            estimator,
            h,
            beta,
            reduced_form,
        });
    }
    Ok(McSummary {
        truth,
        n_replications: opts.n_replications,
        rows,
        excess_failures,
        draws,
    })
}

fn cell_seed(seed: u64, cell: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(cell as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LateGapRow {
    pub h: f64,
    pub beta_upper: f64,
    pub beta_lower: f64,
    pub beta0: f64,
    pub gap_upper: f64,
    pub gap_lower: f64,
}

/// Upper and lower estimates on one replication against the oracle estimand.
pub fn late_gap_check(spec: &DgpSpec, h_grid: &[f64], replication: u64, beta0: f64) -> Result<Vec<LateGapRow>> {
    let sim = generate_dgp(spec, replication)?;
    h_grid
        .iter()
        .map(|&h| {
            let cfg = simulation_config(h);
            let beta_upper = estimate_upper(&sim.dataset, &cfg)?.beta;
            let beta_lower = estimate_lower(&sim.dataset, &cfg)?.beta;
            Ok(LateGapRow {
                h,
                beta_upper,
                beta_lower,
                beta0,
                gap_upper: (beta_upper - beta0).abs(),
                gap_lower: (beta_lower - beta0).abs(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (DgpSpec, McOptions) {
        let spec = DgpSpec {
            n_units: 200,
            ..DgpSpec::with_outcome(OutcomeKind::KinkedQuadratic)
        };
        let opts = McOptions {
            h_grid: vec![0.5, 1.0],
            n_replications: 6,
            n_bootstrap: 50,
            ..McOptions::default()
        };
        (spec, opts)
    }

    #[test]
    fn summary_is_reproducible_across_thread_counts() {
        let (spec, opts) = small();
        let a = run_monte_carlo(&spec, &opts).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| run_monte_carlo(&spec, &opts)).unwrap();
        assert_eq!(a, b);
        let mut csv_a = Vec::new();
        a.write_csv(&mut csv_a).unwrap();
        assert!(String::from_utf8(csv_a).unwrap().starts_with("estimator,h,median_bias"));
    }

    #[test]
    fn two_replications_complete() {
        let (spec, mut opts) = small();
        opts.n_replications = 2;
        let s = run_monte_carlo(&spec, &opts).unwrap();
        assert_eq!(s.rows.len(), 6);
        for c in &s.rows {
            assert_eq!(c.n_ok, 2);
            assert!(c.ci_lo <= c.median_bias && c.median_bias <= c.ci_hi);
        }
    }

    #[test]
    fn one_replication_is_rejected() {
        let (spec, mut opts) = small();
        opts.n_replications = 1;
        assert!(run_monte_carlo(&spec, &opts).is_err());
    }

    #[test]
    fn homogeneous_effect_gaps_are_exact_without_noise() {
        let spec = DgpSpec {
            outcome_kind: OutcomeKind::HeterogeneousEffects,
            effect_params: EffectParams {
                mean: 1.5,
                zeta_loading: 0.0,
                sd: 0.0,
                baseline: Baseline::Linear,
                baseline_scale: 0.0,
            },
            n_units: 300,
            ..DgpSpec::default()
        };
        for row in late_gap_check(&spec, &[0.3, 0.8], 0, 1.5).unwrap() {
            assert!(row.gap_upper < 1e-8 && row.gap_lower < 1e-8, "{row:?}");
        }
    }
}
