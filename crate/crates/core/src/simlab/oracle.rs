use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;

use super::dgp::{draw_unit, DgpSpec, ImportanceScheme};
use super::replication_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleOptions {
    pub n_units: usize,
    /// Half-width of the cutoff slice `|r_j| < epsilon`.
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            n_units: 200_000,
            epsilon: 0.01,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleEstimate {
    pub beta0: f64,
    /// Delta-method standard error, clustered by unit.
    pub se: f64,
    pub n_slice: usize,
    /// Average estimand weight `Σ_{slice} s_j (X(1) − X(0))` per unit, by unit size `J_i`.
    pub weight_by_size: BTreeMap<usize, f64>,
}

const CHUNK: usize = 8192;

#[derive(Default, Clone)]
struct Acc {
    num: f64,
    den: f64,
    units: Vec<(f64, f64)>,
    n_slice: usize,
    by_size: BTreeMap<usize, (f64, usize)>,
}

/// Evaluates the cutoff estimand by toggling each near-cutoff `z_j` in a large sample.
///
/// For every subunit with `|r_j| < ε` the unit's treatment is recomputed with
/// `z_j` forced to 1 and to 0, and the outcome difference comes from the
/// potential-outcome function of the spec.
pub fn estimand_oracle(spec: &DgpSpec, opts: &OracleOptions) -> Result<OracleEstimate> {
    spec.validate()?;
    let n_chunks = opts.n_units.div_ceil(CHUNK);
    let parts: Vec<Acc> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = replication_rng(opts.seed, c as u64);
            let mut acc = Acc::default();
            let count = CHUNK.min(opts.n_units - c * CHUNK);
            for _ in 0..count {
                let u = draw_unit(&mut rng, spec);
                let x = u.treatment();
                let (mut num, mut den) = (0.0, 0.0);
                for (&s, &r) in u.importance.iter().zip(&u.running) {
                    if r.abs() >= opts.epsilon {
                        continue;
                    }
                    let own = if r > 0.0 { s } else { 0.0 };
                    let dx = (x - own + s) - (x - own);
                    num += s * u.effect * dx;
                    den += s * dx;
                    acc.n_slice += 1;
                }
                let entry = acc.by_size.entry(u.importance.len()).or_default();
                entry.0 += den;
                entry.1 += 1;
                if den != 0.0 {
                    acc.num += num;
                    acc.den += den;
                    acc.units.push((num, den));
                }
            }
            acc
        })
        .collect();

    let mut num = 0.0;
    let mut den = 0.0;
    let mut n_slice = 0;
    let mut by_size: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for p in &parts {
        num += p.num;
        den += p.den;
        n_slice += p.n_slice;
        for (k, (w, n)) in &p.by_size {
            let e = by_size.entry(*k).or_default();
            e.0 += w;
            e.1 += n;
        }
    }
    let beta0 = num / den;
    let var: f64 = parts
        .iter()
        .flat_map(|p| p.units.iter())
        .map(|(n, d)| (n - beta0 * d).powi(2))
        .sum::<f64>()
        / (den * den);
    Ok(OracleEstimate {
        beta0,
        se: var.sqrt(),
        n_slice,
        weight_by_size: by_size.into_iter().map(|(k, (w, n))| (k, w / n as f64)).collect(),
    })
}

/// Expected estimand weight of a unit with `j` subunits, up to a common factor:
/// `j · E[s²]`.
pub fn expected_unit_weight(scheme: ImportanceScheme, j: usize) -> f64 {
    let j = j as f64;
    match scheme {
        ImportanceScheme::Equal => 1.0 / j,
        ImportanceScheme::Ones => j,
        // E[s²] = 2 / (J (J + 1)) for flat Dirichlet weights
        ImportanceScheme::DirichletRandom => 2.0 / (j + 1.0),
    }
}
