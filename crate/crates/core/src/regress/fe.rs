//! Fixed-effect absorption by alternating weighted within-group demeaning.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::error::{RdaError, Result};

pub const DEFAULT_ABSORB_TOL: f64 = 1e-10;
pub const MAX_ABSORB_ITERATIONS: usize = 10_000;

/// One categorical fixed-effect dimension, encoded as dense group indices.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedEffect {
    pub name: String,
    groups: Vec<usize>,
    n_groups: usize,
}

impl FixedEffect {
    /// Groups are numbered by sorted key so the encoding does not depend on row order.
    pub fn from_keys<S: AsRef<str>>(name: impl Into<String>, keys: &[S]) -> Self {
        let mut index: BTreeMap<&str, usize> = BTreeMap::new();
        for k in keys {
            index.entry(k.as_ref()).or_insert(0);
        }
        for (i, v) in index.values_mut().enumerate() {
            *v = i;
        }
        let groups = keys.iter().map(|k| index[k.as_ref()]).collect();
        Self {
            name: name.into(),
            groups,
            n_groups: index.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    pub fn groups(&self) -> &[usize] {
        &self.groups
    }

    fn group_means(&self, x: &[f64], weights: &[f64]) -> Vec<f64> {
        let mut sw = vec![0.0; self.n_groups];
        let mut swx = vec![0.0; self.n_groups];
        for ((&g, &xi), &wi) in self.groups.iter().zip(x).zip(weights) {
            sw[g] += wi;
            swx[g] += wi * xi;
        }
        sw.iter()
            .zip(&swx)
            .map(|(&w, &s)| if w > 0.0 { s / w } else { 0.0 })
            .collect()
    }
}

/// Demeans every column within groups of every dimension until the largest
/// weighted group mean falls below `tol` (scaled by the column magnitude).
pub fn absorb_fixed_effects(
    columns: &DMatrix<f64>,
    effects: &[FixedEffect],
    weights: &[f64],
    tol: f64,
) -> Result<DMatrix<f64>> {
    absorb_with_cap(columns, effects, weights, tol, MAX_ABSORB_ITERATIONS)
}

pub fn absorb_with_cap(
    columns: &DMatrix<f64>,
    effects: &[FixedEffect],
    weights: &[f64],
    tol: f64,
    max_iterations: usize,
) -> Result<DMatrix<f64>> {
    let n = columns.nrows();
    for fe in effects {
        if fe.len() != n {
            return Err(RdaError::LengthMismatch {
                what: format!("fixed effect `{}`", fe.name),
                expected: n,
                got: fe.len(),
            });
        }
    }
    if weights.len() != n {
        return Err(RdaError::LengthMismatch {
            what: "weights".into(),
            expected: n,
            got: weights.len(),
        });
    }
    let mut out = columns.clone();
    if effects.is_empty() {
        return Ok(out);
    }

    for c in 0..out.ncols() {
        let mut x: Vec<f64> = out.column(c).iter().copied().collect();
        let scale = x.iter().fold(1.0_f64, |m, v| m.max(v.abs()));

        if effects.len() == 1 {
            demean(&mut x, &effects[0], weights);
        } else {
            let mut converged = false;
            let mut last = f64::INFINITY;
            for _ in 0..max_iterations {
                let mut worst = 0.0_f64;
                for fe in effects {
                    worst = worst.max(demean(&mut x, fe, weights));
                }
                last = worst;
                if worst <= tol * scale {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(RdaError::AbsorptionDiverged {
                    iterations: max_iterations,
                    residual_mean: last,
                });
            }
        }
        for (i, v) in x.into_iter().enumerate() {
            out[(i, c)] = v;
        }
    }
    Ok(out)
}

/// Subtracts weighted group means in place; returns the largest absolute mean removed.
fn demean(x: &mut [f64], fe: &FixedEffect, weights: &[f64]) -> f64 {
    let means = fe.group_means(x, weights);
    for (xi, &g) in x.iter_mut().zip(&fe.groups) {
        *xi -= means[g];
    }
    means.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Degrees of freedom consumed by the absorbed dimensions (groups with positive weight).
pub fn absorbed_dof(effects: &[FixedEffect], weights: &[f64]) -> usize {
    let active: Vec<Vec<bool>> = effects
        .iter()
        .map(|fe| {
            let mut a = vec![false; fe.n_groups];
            for (&g, &w) in fe.groups.iter().zip(weights) {
                if w > 0.0 {
                    a[g] = true;
                }
            }
            a
        })
        .collect();
    let levels: usize = active
        .iter()
        .map(|a| a.iter().filter(|&&b| b).count())
        .sum();
    match effects.len() {
        0 => 0,
        1 => levels,
        2 => {
            // two crossed dimensions: redundancy equals the number of connected components
            let g1 = effects[0].n_groups;
            let mut parent: Vec<usize> = (0..g1 + effects[1].n_groups).collect();
            fn find(p: &mut [usize], mut i: usize) -> usize {
                while p[i] != i {
                    p[i] = p[p[i]];
                    i = p[i];
                }
                i
            }
            for ((&a, &b), &w) in effects[0]
                .groups
                .iter()
                .zip(&effects[1].groups)
                .zip(weights)
            {
                if w > 0.0 {
                    let ra = find(&mut parent, a);
                    let rb = find(&mut parent, g1 + b);
                    if ra != rb {
                        parent[ra] = rb;
                    }
                }
            }
            let mut roots = std::collections::BTreeSet::new();
            for (d, a) in active.iter().enumerate() {
                for (g, &on) in a.iter().enumerate() {
                    if on {
                        let idx = if d == 0 { g } else { g1 + g };
                        roots.insert(find(&mut parent, idx));
                    }
                }
            }
            levels - roots.len()
        }
        k => levels.saturating_sub(k - 1),
    }
}
