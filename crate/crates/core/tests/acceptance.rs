//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use common::checks::{fe_check, fwl_check, tsls_check, wls_check};
use common::{hstack, normal, normal_equations, random_bundle, rel_gap, residuals, weighted_rss, BundleOptions};
use rda_core::design::{
    Dataset, DesignConfig, SpilloverGraph, SubunitRecord, TreatmentBasis, UnitRecord,
};
use rda_core::diagnostics::{
    balance_test, rd_plot_data, treatment_contribution, variance_decomposition, BalanceTarget, FKind,
    PlotPoint, VarianceRecord,
};
use rda_core::estimators::{
    estimate_lower, estimate_spillover_bilateral, estimate_spillover_collapsed, verify_equivalence,
};
use rda_core::simlab::{
    bootstrap_sd_se, default_h_grid, estimand_oracle, generate_dgp, late_gap_check, run_monte_carlo,
    sample_sd, DgpSpec, LateGapRow, McEstimator, McOptions, McSummary, OracleOptions, OutcomeKind,
};

type Outcome = Result<String, String>;

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for case in 0..100u64 {
        let mut rng = common::rng(10_000 + case);
        let extras = case % 2 == 1;
        let ds = random_bundle(
            20_000 + case,
            &BundleOptions {
                n_units: rng.random_range(60..250),
                max_j: 8,
                analysis_weights: extras || case % 3 == 0,
                extra_control: extras,
                fixed_effect: extras && case % 4 == 1,
            },
        );
        let cfg = DesignConfig {
            treatment_basis: TreatmentBasis::WinFlag,
            fe_dimensions: if extras && case % 4 == 1 { vec!["region".into()] } else { vec![] },
            ..DesignConfig::with_bandwidth(rng.random_range(0.1..1.5))
        };
        match verify_equivalence(&ds, &cfg, 1e-8) {
            Ok(rep) => {
                worst = worst.max(rep.relative_gap);
                if !rep.pass {
                    failures.push(format!("case {case}: gap {:.3e}", rep.relative_gap));
                }
            }
            Err(e) => failures.push(format!("case {case}: {e}")),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        failures.is_empty() && secs < 30.0,
        format!("100 bundles, worst relative gap {worst:.2e}, {secs:.1} s {failures:?}"),
    )
}

fn criterion_2() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, check) in ["wls", "2sls", "fwl", "fe"].into_iter().zip([wls_check, tsls_check, fwl_check, fe_check] as [fn(u64) -> f64; 4]) {
        let worst = (0..60u64).map(|s| check(500 + s)).fold(0.0, f64::max);
        ok &= worst <= 1e-10;
        parts.push(format!("{name} {worst:.1e}"));
    }
    verdict(ok, format!("60 instances each, worst relative gap: {}", parts.join(", ")))
}

fn mc(kind: OutcomeKind, noise_sd: f64, estimators: Vec<McEstimator>, h_grid: Vec<f64>, reps: usize) -> McSummary {
    let spec = DgpSpec {
        noise_sd,
        seed: 2024,
        ..DgpSpec::with_outcome(kind)
    };
    let opts = McOptions {
        estimators,
        h_grid,
        n_replications: reps,
        seed: 7,
        ..McOptions::default()
    };
    run_monte_carlo(&spec, &opts).expect("monte carlo run")
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let s = mc(OutcomeKind::Linear, 0.0, McEstimator::ALL.to_vec(), default_h_grid(), 500);
    let grid = default_h_grid();
    let covers = |e: McEstimator| grid.iter().filter(|&&h| {
        let c = s.cell(e, h).unwrap();
        c.ci_lo <= 0.0 && 0.0 <= c.ci_hi
    }).count();
    let (cu, cl) = (covers(McEstimator::Upper), covers(McEstimator::Lower));
    let bench_worse = grid.iter().filter(|&&h| h >= 0.5 - 1e-9).all(|&h| {
        let b = s.cell(McEstimator::Benchmark, h).unwrap().median_bias.abs();
        b > s.cell(McEstimator::Upper, h).unwrap().median_bias.abs() && b > s.cell(McEstimator::Lower, h).unwrap().median_bias.abs()
    });
    let majority = grid.len() / 2 + 1;
    verdict(
        cu >= majority && cl >= majority && bench_worse && !s.excess_failures,
        format!(
            "CI covers 0 at {cu}/{n} (upper), {cl}/{n} (lower); benchmark worse at every h >= 0.5: {bench_worse}; {:.0} s",
            start.elapsed().as_secs_f64(),
            n = grid.len()
        ),
    )
}

fn criterion_4() -> Outcome {
    let s = mc(OutcomeKind::KinkedQuadratic, 0.0, McEstimator::ALL.to_vec(), vec![0.25, 1.0], 2500);
    let ratio = |e: McEstimator| {
        s.cell(e, 0.25).unwrap().median_bias.abs() / s.cell(e, 1.0).unwrap().median_bias.abs()
    };
    let (ru, rl, rb) = (ratio(McEstimator::Upper), ratio(McEstimator::Lower), ratio(McEstimator::Benchmark));
    verdict(
        ru < 0.25 && rl < 0.25 && rb > 0.25,
        format!("|mb(0.25)|/|mb(1.0)|: upper {ru:.3}, lower {rl:.3}, benchmark {rb:.3}"),
    )
}

fn criterion_5() -> Outcome {
    let mut ok = true;
    let mut worst = f64::NEG_INFINITY;
    let mut notes = Vec::new();
    for kind in [OutcomeKind::Linear, OutcomeKind::SymmetricQuadratic, OutcomeKind::KinkedQuadratic] {
        let s = mc(kind, 1.0, vec![McEstimator::Upper, McEstimator::Lower], default_h_grid(), 500);
        for (k, &h) in default_h_grid().iter().enumerate() {
            let up = s.cell(McEstimator::Upper, h).unwrap().sd;
            let lo = s.cell(McEstimator::Lower, h).unwrap().sd;
            let draws = s.draws_for(McEstimator::Upper, h).unwrap().ok_betas();
            let se = bootstrap_sd_se(&draws, 300, 31 + k as u64).unwrap();
            // excess of SD(upper) over SD(lower), in units of its bootstrap SE
            let excess = (up - lo) / se;
            worst = worst.max(excess);
            if up > lo + 2.0 * se {
                ok = false;
                notes.push(format!("{kind:?} h={h}: {up:.4} > {lo:.4}"));
            }
        }
    }
    verdict(
        ok,
        format!("3 outcomes x 11 bandwidths, largest (SD_upper - SD_lower)/SE = {worst:.2} {notes:?}"),
    )
}

fn criterion_6() -> Outcome {
    let spec = DgpSpec {
        n_units: 50_000,
        seed: 77,
        ..DgpSpec::with_outcome(OutcomeKind::HeterogeneousEffects)
    };
    let oracle = estimand_oracle(&spec, &OracleOptions::default()).map_err(|e| e.to_string())?;
    let seeds = 50u64;
    let rows: Vec<_> = (0..seeds)
        .map(|s| late_gap_check(&spec, &[0.05, 0.5], s, oracle.beta0))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, pick, gap) in [
        ("upper", (|r: &LateGapRow| r.beta_upper) as fn(&LateGapRow) -> f64, (|r: &LateGapRow| r.gap_upper) as fn(&LateGapRow) -> f64),
        ("lower", |r| r.beta_lower, |r| r.gap_lower),
    ] {
        let b: Vec<f64> = rows.iter().map(|r| pick(&r[0])).collect();
        let sim_se = sample_sd(&b) / (seeds as f64).sqrt();
        let dev = (mean(&b) - oracle.beta0).abs();
        let bound = 3.0 * (sim_se + oracle.se);
        let shrink = rows.iter().filter(|r| gap(&r[0]) < gap(&r[1])).count();
        ok &= dev <= bound && shrink * 10 >= 9 * seeds as usize;
        parts.push(format!("{name}: |mean - beta0| {dev:.4} vs bound {bound:.4}, gap shrinks in {shrink}/{seeds}"));
    }
    verdict(ok, format!("beta0 = {:.4} +/- {:.4}; {}", oracle.beta0, oracle.se, parts.join("; ")))
}

fn criterion_7() -> Outcome {
    let sim = generate_dgp(&DgpSpec::default(), 0).map_err(|e| e.to_string())?;
    let r: Vec<f64> = sim.dataset.subunits().iter().map(|s| s.running).collect();
    let phi = Normal::standard();
    let mut ok = r.len() == 5000;
    let mut parts = vec![format!("{} subunits", r.len())];
    for h in [0.25, 1.25] {
        let share = r.iter().filter(|v| v.abs() <= h).count() as f64 / r.len() as f64;
        let target = 2.0 * phi.cdf(h) - 1.0;
        ok &= (share - target).abs() <= 0.01;
        parts.push(format!("share(|r| <= {h}) {share:.4} vs {target:.4}"));
    }
    verdict(ok, parts.join(", "))
}

fn criterion_8() -> Outcome {
    let c = treatment_contribution(0.272, 0.385, 0.346).ok_or("flat series")?;
    verdict((c - 0.345).abs() <= 0.001, format!("contribution {:.4}", c))
}

fn criterion_9() -> Outcome {
    let mut rng = common::rng(99);
    let mut worst_var: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(2..500);
        let recs: Vec<VarianceRecord> = (0..n)
            .map(|_| VarianceRecord::new(format!("c{}", rng.random_range(0..20)), normal(&mut rng) * 2.0, rng.random_range(0.0..3.0)))
            .collect();
        let d = variance_decomposition(&recs).map_err(|e| e.to_string())?;
        worst_var = worst_var.max((d.within + d.between - d.total).abs() / d.total.max(f64::MIN_POSITIVE));
    }

    let mut bins_ok = true;
    for _ in 0..50 {
        let n = rng.random_range(10..400);
        let pts: Vec<PlotPoint> = (0..n)
            .map(|k| PlotPoint {
                id: format!("p{k}"),
                running: if k < 2 { k as f64 - 0.5 } else { rng.random_range(-1.0..1.0) },
                outcome: normal(&mut rng),
                weight: rng.random_range(0.0..4.0),
            })
            .collect();
        let plot = rd_plot_data(&pts, rng.random_range(1..30), &DesignConfig::with_bandwidth(1.0)).map_err(|e| e.to_string())?;
        let max_w = pts.iter().map(|p| p.weight).fold(0.0, f64::max);
        bins_ok &= plot.bins.iter().all(|b| (b.weight - plot.target_weight[b.side as usize]).abs() <= max_w + 1e-12);
    }

    let mut worst_r2: f64 = 0.0;
    let mut r2_in_range = true;
    for case in 0..30u64 {
        let (ds, h) = balance_bundle(300 + case);
        let cfg = DesignConfig::with_bandwidth(h);
        let covs = ["a".to_string(), "b".to_string()];
        let rep = balance_test(&ds, BalanceTarget::Instrument, &covs, cfg.control_set, &cfg, FKind::RobustWald)
            .map_err(|e| e.to_string())?;
        r2_in_range &= (0.0..=1.0).contains(&rep.partial_r2);
        worst_r2 = worst_r2.max((rep.partial_r2 - brute_partial_r2(&ds, h)).abs());
    }
    verdict(
        worst_var <= 1e-12 && bins_ok && r2_in_range && worst_r2 <= 1e-10,
        format!(
            "variance identity {worst_var:.1e}; bin weights within one max weight: {bins_ok}; partial R2 in [0,1]: {r2_in_range}, vs RSS ratio {worst_r2:.1e}"
        ),
    )
}

fn balance_bundle(seed: u64) -> (Dataset, f64) {
    let mut rng = common::rng(seed);
    let mut units = Vec::new();
    let mut subunits = Vec::new();
    for i in 0..150 {
        let id = format!("u{i:03}");
        let shift = normal(&mut rng);
        for j in 0..rng.random_range(1..6) {
            subunits.push(SubunitRecord::new(format!("{id}-{j}"), id.clone(), 0.3 * shift + 0.5 * normal(&mut rng), rng.random_range(0.1..1.5)));
        }
        units.push(
            UnitRecord::new(id, 0.0)
                .with_weight(rng.random_range(0.5..2.0))
                .with_control("a", normal(&mut rng) + 0.5 * shift)
                .with_control("b", normal(&mut rng)),
        );
    }
    (Dataset::new(units, subunits).unwrap(), rng.random_range(0.2..1.0))
}

/// Partial R² of covariates (a, b) for the instrument, with every regressor rebuilt by hand.
fn brute_partial_r2(ds: &Dataset, h: f64) -> f64 {
    let n = ds.units().len();
    let mut z = vec![0.0; n];
    let mut q = vec![[0.0; 3]; n];
    for (j, s) in ds.subunits().iter().enumerate() {
        if s.running.abs() > h {
            continue;
        }
        let i = ds.owner(j).unwrap();
        z[i] += s.importance * (s.running >= 0.0) as u8 as f64;
        q[i][0] += s.importance;
        q[i][1] += s.importance * s.running;
        q[i][2] += s.importance * s.running.max(0.0);
    }
    let w: Vec<f64> = ds.units().iter().map(|u| u.analysis_weight).collect();
    let ones = vec![1.0; n];
    let col = |k: usize| q.iter().map(|v| v[k]).collect::<Vec<f64>>();
    let (q0, q1, q2) = (col(0), col(1), col(2));
    let a: Vec<f64> = ds.units().iter().map(|u| u.extra_controls["a"]).collect();
    let b: Vec<f64> = ds.units().iter().map(|u| u.extra_controls["b"]).collect();
    let rss = |cols: &[&[f64]]| {
        let x = hstack(cols);
        let beta = normal_equations(&x, &z, &w);
        weighted_rss(&residuals(&x, &z, &beta), &w)
    };
    let restricted = rss(&[&ones, &q0, &q1, &q2]);
    let full = rss(&[&ones, &q0, &q1, &q2, &a, &b]);
    (restricted - full) / restricted
}

fn criterion_10() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for case in 0..40u64 {
        let mut rng = common::rng(700 + case);
        let n_units = rng.random_range(30..120);
        let n_sub = rng.random_range(20..100);
        let units: Vec<UnitRecord> = (0..n_units).map(|i| UnitRecord::new(format!("u{i:03}"), normal(&mut rng))).collect();
        let subunits: Vec<SubunitRecord> = (0..n_sub)
            .map(|j| SubunitRecord::new(format!("s{j:03}"), "", 0.5 * normal(&mut rng), rng.random_range(0.1..2.0)))
            .collect();
        let ds = Dataset::unlinked(units, subunits).map_err(|e| e.to_string())?;
        let mut edges = Vec::new();
        for j in 0..n_sub {
            for _ in 0..rng.random_range(1..6) {
                edges.push((format!("u{:03}", rng.random_range(0..n_units)), format!("s{j:03}")));
            }
        }
        let g = SpilloverGraph::new(&ds, &edges).map_err(|e| e.to_string())?;
        let cfg = DesignConfig::with_bandwidth(rng.random_range(0.3..1.2));
        if let (Ok(b), Ok(c)) = (estimate_spillover_bilateral(&g, &ds, &cfg), estimate_spillover_collapsed(&g, &ds, &cfg)) {
            if b.beta.is_finite() {
                worst = worst.max(rel_gap(c.beta, b.beta));
                compared += 1;
            }
        }
    }

    let mut identical = true;
    for case in 0..20u64 {
        let extras = case % 2 == 0;
        let ds = random_bundle(
            900 + case,
            &BundleOptions {
                n_units: 150,
                max_j: 6,
                analysis_weights: extras,
                extra_control: extras,
                fixed_effect: extras,
            },
        );
        let cfg = DesignConfig {
            fe_dimensions: if extras { vec!["region".into()] } else { vec![] },
            ..DesignConfig::with_bandwidth(0.7)
        };
        let lower = estimate_lower(&ds, &cfg).map_err(|e| e.to_string())?;
        let bil = estimate_spillover_bilateral(&SpilloverGraph::partition(&ds), &ds, &cfg).map_err(|e| e.to_string())?;
        identical &= lower.beta.to_bits() == bil.beta.to_bits() && lower.robust_se.to_bits() == bil.robust_se.to_bits();
    }
    verdict(
        compared >= 30 && worst <= 1e-10 && identical,
        format!("bilateral vs collapsed on {compared} graphs, worst {worst:.1e}; partition graph bit-identical to lower: {identical}"),
    )
}

fn main() -> ExitCode {
    let criteria: [(u32, fn() -> Outcome); 10] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
        (10, criterion_10),
    ];
    let mut failed = 0;
    for (k, run) in criteria {
        let start = Instant::now();
        let (tag, detail) = match run() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {k}: {tag} ({:.1} s) {detail}", start.elapsed().as_secs_f64());
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
