//! Brute-force reference computations and random instance generators shared
//! by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use rda_core::design::{Dataset, SubunitRecord, UnitRecord};

pub mod checks;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// `|a − b| / max(1, |b|)`
pub fn rel_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

/// `(X'WX)⁻¹ X'Wy` by LU on the normal equations.
pub fn normal_equations(x: &DMatrix<f64>, y: &[f64], w: &[f64]) -> DVector<f64> {
    let xtwx = xtwx(x, w);
    let xtwy = DVector::from_fn(x.ncols(), |a, _| (0..x.nrows()).map(|i| x[(i, a)] * w[i] * y[i]).sum());
    xtwx.lu().solve(&xtwy).expect("oracle design must be full rank")
}

pub fn xtwx(x: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(x.ncols(), x.ncols(), |a, b| {
        (0..x.nrows()).map(|i| x[(i, a)] * w[i] * x[(i, b)]).sum()
    })
}

pub fn residuals(x: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>) -> Vec<f64> {
    let fit = x * beta;
    y.iter().zip(fit.iter()).map(|(a, b)| a - b).collect()
}

pub fn weighted_rss(e: &[f64], w: &[f64]) -> f64 {
    e.iter().zip(w).map(|(e, w)| w * e * e).sum()
}

/// HC1 standard errors with an explicit scores design (`x̂` for 2SLS).
pub fn hc1_se(scores: &DMatrix<f64>, w: &[f64], e: &[f64], n_params: usize) -> Vec<f64> {
    let bread = xtwx(scores, w).try_inverse().unwrap();
    let k = scores.ncols();
    let meat = DMatrix::from_fn(k, k, |a, b| {
        (0..scores.nrows())
            .map(|i| (w[i] * e[i]).powi(2) * scores[(i, a)] * scores[(i, b)])
            .sum()
    });
    let n = w.iter().filter(|&&v| v > 0.0).count() as f64;
    let v = &bread * meat * &bread * (n / (n - n_params as f64));
    (0..k).map(|a| v[(a, a)].sqrt()).collect()
}

/// Weighted covariance.
pub fn wcov(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
    let sw: f64 = w.iter().sum();
    let ma = a.iter().zip(w).map(|(x, w)| x * w).sum::<f64>() / sw;
    let mb = b.iter().zip(w).map(|(x, w)| x * w).sum::<f64>() / sw;
    a.iter().zip(b).zip(w).map(|((x, y), w)| w * (x - ma) * (y - mb)).sum::<f64>() / sw
}

/// Residuals of each column of `y` on `x` by normal equations.
pub fn partial_out(y: &[f64], x: &DMatrix<f64>, w: &[f64]) -> Vec<f64> {
    if x.ncols() == 0 {
        return y.to_vec();
    }
    let b = normal_equations(x, y, w);
    residuals(x, y, &b)
}

pub fn hstack(cols: &[&[f64]]) -> DMatrix<f64> {
    let n = cols[0].len();
    DMatrix::from_fn(n, cols.len(), |i, c| cols[c][i])
}

/// Random RDA bundle: `J_i ∈ {1..max_j}`, random importance, fuzzy win flags,
/// random outcomes, optional analysis weights, one extra control and a fixed effect.
pub struct BundleOptions {
    pub n_units: usize,
    pub max_j: usize,
    pub analysis_weights: bool,
    pub extra_control: bool,
    pub fixed_effect: bool,
}

pub fn random_bundle(seed: u64, opts: &BundleOptions) -> Dataset {
    let mut rng = rng(seed);
    let mut units = Vec::with_capacity(opts.n_units);
    let mut subunits = Vec::new();
    for i in 0..opts.n_units {
        let id = format!("u{i:05}");
        let j = rng.random_range(1..=opts.max_j);
        let mut x = 0.0;
        let shift = normal(&mut rng);
        for k in 0..j {
            let r: f64 = 0.4 * shift + normal(&mut rng) * 0.6;
            let s: f64 = rng.random_range(0.05..2.0);
            let p = if r >= 0.0 { 0.85 } else { 0.15 };
            let won = rng.random_bool(p);
            x += s * won as u8 as f64;
            subunits.push(SubunitRecord::new(format!("{id}-{k}"), id.clone(), r, s).with_win_flag(won));
        }
        let y = 0.7 * x + shift + normal(&mut rng);
        let mut u = UnitRecord::new(id, y);
        if opts.analysis_weights {
            u = u.with_weight(rng.random_range(0.2..3.0));
        }
        if opts.extra_control {
            u = u.with_control("size", normal(&mut rng) + 0.3 * shift);
        }
        if opts.fixed_effect {
            u = u.with_fe("region", format!("g{}", rng.random_range(0..6)));
        }
        units.push(u);
    }
    Dataset::new(units, subunits).unwrap()
}
