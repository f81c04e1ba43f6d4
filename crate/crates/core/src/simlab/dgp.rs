use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::Serialize;

use crate::design::{Dataset, SubunitRecord, UnitRecord};
use crate::error::{RdaError, Result};

use super::replication_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceScheme {
    /// `s_j = 1/J_i`
    #[default]
    Equal,
    /// Normalized exponentials, summing to one within a unit.
    DirichletRandom,
    /// `s_j = 1` for every subunit, so `Σ s` grows with `J_i`.
    Ones,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    /// `Y = Σ s r`
    #[default]
    Linear,
    /// `Y = Σ s r²`
    SymmetricQuadratic,
    /// `Y = Σ s r² 1[r > 0]`
    KinkedQuadratic,
    /// `Y = r` of the unit's first subunit.
    SingleSubunit,
    /// `Y = scale · baseline + β_i X_i` with unit-specific `β_i`.
    HeterogeneousEffects,
}

/// Shape of `Y_i(0)` in the heterogeneous-effects DGP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Zero,
    Linear,
    SymmetricQuadratic,
    KinkedQuadratic,
    /// `min(r⁺, 0.5)²`: the kinked quadratic near the cutoff, flat beyond `r = 0.5`.
    CappedKink,
}

/// `β_i = mean + zeta_loading · (ζ_i² − 1) + sd · η_i`
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EffectParams {
    pub mean: f64,
    pub zeta_loading: f64,
    pub sd: f64,
    pub baseline: Baseline,
    pub baseline_scale: f64,
}

impl Default for EffectParams {
    fn default() -> Self {
        Self {
            mean: 1.0,
            zeta_loading: 0.2,
            sd: 0.1,
            baseline: Baseline::CappedKink,
            baseline_scale: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DgpSpec {
    pub n_units: usize,
    pub n_subunits_per_unit: usize,
    /// When set, `J_i` is uniform on `n_subunits_per_unit..=max`.
    pub max_subunits_per_unit: Option<usize>,
    pub importance_scheme: ImportanceScheme,
    pub rho: f64,
    pub outcome_kind: OutcomeKind,
    pub noise_sd: f64,
    pub effect_params: EffectParams,
    pub seed: u64,
}

impl Default for DgpSpec {
    fn default() -> Self {
        Self {
            n_units: 1000,
            n_subunits_per_unit: 5,
            max_subunits_per_unit: None,
            importance_scheme: ImportanceScheme::Equal,
            rho: 0.5,
            outcome_kind: OutcomeKind::Linear,
            noise_sd: 0.0,
            effect_params: EffectParams::default(),
            seed: 0,
        }
    }
}

impl DgpSpec {
    pub fn with_outcome(kind: OutcomeKind) -> Self {
        Self {
            outcome_kind: kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(RdaError::Config(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        if self.n_units == 0 || self.n_subunits_per_unit == 0 {
            return Err(RdaError::Config("unit and subunit counts must be at least 1".into()));
        }
        if let Some(max) = self.max_subunits_per_unit {
            if max < self.n_subunits_per_unit {
                return Err(RdaError::Config(format!(
                    "max_subunits_per_unit ({max}) is below n_subunits_per_unit ({})",
                    self.n_subunits_per_unit
                )));
            }
            if max > 99 {
                return Err(RdaError::Config("at most 99 subunits per unit".into()));
            }
        }
        if !(self.noise_sd >= 0.0) || !self.noise_sd.is_finite() {
            return Err(RdaError::Config("noise_sd must be finite and nonnegative".into()));
        }
        let e = &self.effect_params;
        if !(e.sd >= 0.0) || ![e.mean, e.zeta_loading, e.sd, e.baseline_scale].iter().all(|v| v.is_finite()) {
            return Err(RdaError::Config("effect parameters must be finite with sd >= 0".into()));
        }
        Ok(())
    }

    /// The causal effect when it is the same for every unit.
    pub fn true_effect(&self) -> Option<f64> {
        match self.outcome_kind {
            OutcomeKind::HeterogeneousEffects => {
                let e = &self.effect_params;
                (e.zeta_loading == 0.0 && e.sd == 0.0).then_some(e.mean)
            }
            _ => Some(0.0),
        }
    }
}

/// Latent draws for one unit, shared by the generator and the oracle.
pub(crate) struct RawUnit {
    pub zeta: f64,
    pub importance: Vec<f64>,
    pub running: Vec<f64>,
    pub effect: f64,
    pub noise: f64,
}

pub(crate) fn draw_unit(rng: &mut ChaCha8Rng, spec: &DgpSpec) -> RawUnit {
    let j = match spec.max_subunits_per_unit {
        Some(max) => rng.random_range(spec.n_subunits_per_unit..=max),
        None => spec.n_subunits_per_unit,
    };
    let zeta: f64 = rng.sample(StandardNormal);
    let importance = match spec.importance_scheme {
        ImportanceScheme::Equal => vec![1.0 / j as f64; j],
        ImportanceScheme::Ones => vec![1.0; j],
        ImportanceScheme::DirichletRandom => {
            let g: Vec<f64> = (0..j).map(|_| rng.sample::<f64, _>(Exp1)).collect();
            let total: f64 = g.iter().sum();
            g.into_iter().map(|x| x / total).collect()
        }
    };
    let tail = (1.0 - spec.rho * spec.rho).sqrt();
    let running = (0..j)
        .map(|_| spec.rho * zeta + tail * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let eta: f64 = rng.sample(StandardNormal);
    let noise: f64 = rng.sample(StandardNormal);
    let effect = match spec.outcome_kind {
        OutcomeKind::HeterogeneousEffects => {
            let e = &spec.effect_params;
            e.mean + e.zeta_loading * (zeta * zeta - 1.0) + e.sd * eta
        }
        _ => 0.0,
    };
    RawUnit {
        zeta,
        importance,
        running,
        effect,
        noise,
    }
}

const CAP: f64 = 0.5;

fn shape(baseline: Baseline, s: &[f64], r: &[f64]) -> f64 {
    let term = |s: f64, r: f64| match baseline {
        Baseline::Zero => 0.0,
        Baseline::Linear => s * r,
        Baseline::SymmetricQuadratic => s * r * r,
        Baseline::KinkedQuadratic => {
            if r > 0.0 {
                s * r * r
            } else {
                0.0
            }
        }
        Baseline::CappedKink => {
            let x = r.clamp(0.0, CAP);
            s * x * x
        }
    };
    s.iter().zip(r).map(|(&s, &r)| term(s, r)).sum()
}

impl RawUnit {
    /// `X_i = Σ s_j 1[r_j > 0]`
    pub fn treatment(&self) -> f64 {
        self.importance
            .iter()
            .zip(&self.running)
            .map(|(s, &r)| if r > 0.0 { *s } else { 0.0 })
            .sum()
    }

    /// Noise-free `Y_i(0)`.
    pub fn baseline(&self, spec: &DgpSpec) -> f64 {
        let (s, r) = (&self.importance, &self.running);
        match spec.outcome_kind {
            OutcomeKind::Linear => shape(Baseline::Linear, s, r),
            OutcomeKind::SymmetricQuadratic => shape(Baseline::SymmetricQuadratic, s, r),
            OutcomeKind::KinkedQuadratic => shape(Baseline::KinkedQuadratic, s, r),
            OutcomeKind::SingleSubunit => r[0],
            OutcomeKind::HeterogeneousEffects => {
                spec.effect_params.baseline_scale * shape(spec.effect_params.baseline, s, r)
            }
        }
    }

    pub fn outcome(&self, spec: &DgpSpec) -> f64 {
        self.baseline(spec) + self.effect * self.treatment() + spec.noise_sd * self.noise
    }
}

/// A generated dataset together with its ground truth.
#[derive(Debug, Clone)]
pub struct SimDataset {
    pub dataset: Dataset,
    /// Common effect, when effects are homogeneous.
    pub true_effect: Option<f64>,
    /// `β_i` per unit, aligned with `dataset.units()`.
    pub unit_effects: Vec<f64>,
    pub zeta: Vec<f64>,
}

/// Draws one replication; `(spec.seed, replication_index)` fixes every value.
pub fn generate_dgp(spec: &DgpSpec, replication_index: u64) -> Result<SimDataset> {
    spec.validate()?;
    let mut rng = replication_rng(spec.seed, replication_index);
    let mut units = Vec::with_capacity(spec.n_units);
    let mut subunits = Vec::with_capacity(spec.n_units * spec.n_subunits_per_unit);
    let mut unit_effects = Vec::with_capacity(spec.n_units);
    let mut zeta = Vec::with_capacity(spec.n_units);
    for i in 0..spec.n_units {
        let raw = draw_unit(&mut rng, spec);
        let id = format!("u{i:07}");
        for (j, (&s, &r)) in raw.importance.iter().zip(&raw.running).enumerate() {
            subunits.push(SubunitRecord::new(format!("{id}-{j:02}"), id.clone(), r, s));
        }
        units.push(UnitRecord::new(id, raw.outcome(spec)));
        unit_effects.push(raw.effect);
        zeta.push(raw.zeta);
    }
    Ok(SimDataset {
        dataset: Dataset::new(units, subunits)?,
        true_effect: spec.true_effect(),
        unit_effects,
        zeta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{aggregate_treatment, CutoffRule, DesignConfig};

    #[test]
    fn perfect_correlation_equalizes_running_variables() {
        let spec = DgpSpec {
            rho: 1.0,
            n_units: 20,
            ..DgpSpec::default()
        };
        let sim = generate_dgp(&spec, 0).unwrap();
        let ds = &sim.dataset;
        for i in 0..ds.units().len() {
            let r: Vec<f64> = ds.members(i).iter().map(|&j| ds.subunits()[j].running).collect();
            assert!(r.iter().all(|&x| x == r[0]));
        }
    }

    #[test]
    fn equal_scheme_treatment_takes_fifths() {
        let sim = generate_dgp(&DgpSpec::default(), 3).unwrap();
        let cfg = DesignConfig {
            cutoff_rule: CutoffRule::StrictGt,
            ..DesignConfig::default()
        };
        for x in aggregate_treatment(&sim.dataset, &cfg).unwrap() {
            let k = x * 5.0;
            assert!((k - k.round()).abs() < 1e-12 && (0.0..=5.0).contains(&k.round()));
        }
    }

    #[test]
    fn same_seed_and_index_reproduce() {
        let spec = DgpSpec::with_outcome(OutcomeKind::KinkedQuadratic);
        let a = generate_dgp(&spec, 9).unwrap();
        let b = generate_dgp(&spec, 9).unwrap();
        let c = generate_dgp(&spec, 10).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn dirichlet_weights_sum_to_one() {
        let spec = DgpSpec {
            importance_scheme: ImportanceScheme::DirichletRandom,
            n_units: 50,
            max_subunits_per_unit: Some(8),
            ..DgpSpec::default()
        };
        let ds = generate_dgp(&spec, 0).unwrap().dataset;
        for i in 0..ds.units().len() {
            let t: f64 = ds.members(i).iter().map(|&j| ds.subunits()[j].importance).sum();
            assert!((t - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_rho_is_rejected() {
        let spec = DgpSpec {
            rho: 1.5,
            ..DgpSpec::default()
        };
        assert!(generate_dgp(&spec, 0).is_err());
    }
}
