//! Data model linking subunits (discontinuity events) to units (outcome
//! observations), and construction of every RDA ingredient: close sets, the
//! aggregated instrument, the three RDA controls, aggregated treatments,
//! stacked subunit samples and kernel weights.

mod config;
mod spillover;

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use crate::error::{RdaError, Result};

pub use config::{
    ControlSet, CutoffRule, DesignConfig, Filter, FilterOp, Kernel, LowerWeighting, TiePolicy,
    TreatmentBasis,
};
pub use spillover::{
    build_spillover_exposure, collapse_by_intervention, CollapsedRecord, Collapse, SpilloverGraph,
};

/// One discontinuity event.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubunitRecord {
    pub subunit_id: String,
    pub unit_id: String,
    /// Running variable with the cutoff normalized to zero.
    pub running: f64,
    /// Importance weight `s_j > 0`, used as given.
    pub importance: f64,
    pub win_flag: Option<bool>,
    pub attributes: BTreeMap<String, f64>,
}

impl SubunitRecord {
    pub fn new(
        subunit_id: impl Into<String>,
        unit_id: impl Into<String>,
        running: f64,
        importance: f64,
    ) -> Self {
        Self {
            subunit_id: subunit_id.into(),
            unit_id: unit_id.into(),
            running,
            importance,
            win_flag: None,
            attributes: BTreeMap::new(),
        }
    }

    pub fn with_win_flag(mut self, won: bool) -> Self {
        self.win_flag = Some(won);
        self
    }

    pub fn with_attribute(mut self, name: impl Into<String>, value: f64) -> Self {
        self.attributes.insert(name.into(), value);
        self
    }
}

/// One outcome observation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnitRecord {
    pub unit_id: String,
    pub outcome: f64,
    pub extra_controls: BTreeMap<String, f64>,
    pub fe_keys: BTreeMap<String, String>,
    pub analysis_weight: f64,
    /// Externally measured treatment that replaces the aggregated one.
    pub treatment_override: Option<f64>,
}

impl UnitRecord {
    pub fn new(unit_id: impl Into<String>, outcome: f64) -> Self {
        Self {
            unit_id: unit_id.into(),
            outcome,
            extra_controls: BTreeMap::new(),
            fe_keys: BTreeMap::new(),
            analysis_weight: 1.0,
            treatment_override: None,
        }
    }

    pub fn with_weight(mut self, w: f64) -> Self {
        self.analysis_weight = w;
        self
    }

    pub fn with_control(mut self, name: impl Into<String>, value: f64) -> Self {
        self.extra_controls.insert(name.into(), value);
        self
    }

    pub fn with_fe(mut self, dim: impl Into<String>, key: impl Into<String>) -> Self {
        self.fe_keys.insert(dim.into(), key.into());
        self
    }

    pub fn with_treatment_override(mut self, x: f64) -> Self {
        self.treatment_override = Some(x);
        self
    }
}

/// Validated units and subunits, each sorted by id, with ownership resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    units: Vec<UnitRecord>,
    subunits: Vec<SubunitRecord>,
    owner: Vec<Option<usize>>,
    members: Vec<Vec<usize>>,
}

impl Dataset {
    /// Every subunit must belong to an existing unit.
    pub fn new(units: Vec<UnitRecord>, subunits: Vec<SubunitRecord>) -> Result<Self> {
        Self::build(units, subunits, true)
    }

    /// Subunit ownership is optional; used when exposure comes from a spillover graph.
    pub fn unlinked(units: Vec<UnitRecord>, subunits: Vec<SubunitRecord>) -> Result<Self> {
        Self::build(units, subunits, false)
    }

    fn build(
        mut units: Vec<UnitRecord>,
        mut subunits: Vec<SubunitRecord>,
        strict: bool,
    ) -> Result<Self> {
        units.sort_by(|a, b| a.unit_id.cmp(&b.unit_id));
        subunits.sort_by(|a, b| a.subunit_id.cmp(&b.subunit_id));
        for w in units.windows(2) {
            if w[0].unit_id == w[1].unit_id {
                return Err(RdaError::DuplicateId(w[0].unit_id.clone()));
            }
        }
        for w in subunits.windows(2) {
            if w[0].subunit_id == w[1].subunit_id {
                return Err(RdaError::DuplicateId(w[0].subunit_id.clone()));
            }
        }
        for u in &units {
            if !u.outcome.is_finite() {
                return Err(invalid(&u.unit_id, "outcome is not finite"));
            }
            if !(u.analysis_weight >= 0.0) || !u.analysis_weight.is_finite() {
                return Err(invalid(&u.unit_id, "analysis weight must be finite and >= 0"));
            }
            if let Some(x) = u.treatment_override {
                if !x.is_finite() {
                    return Err(invalid(&u.unit_id, "treatment override is not finite"));
                }
            }
        }
        for s in &subunits {
            if !s.running.is_finite() {
                return Err(invalid(&s.subunit_id, "running variable is not finite"));
            }
            if !(s.importance > 0.0) || !s.importance.is_finite() {
                return Err(invalid(&s.subunit_id, "importance weight must be positive"));
            }
        }

        let index: HashMap<&str, usize> = units
            .iter()
            .enumerate()
            .map(|(i, u)| (u.unit_id.as_str(), i))
            .collect();
        let mut owner = Vec::with_capacity(subunits.len());
        let mut members = vec![Vec::new(); units.len()];
        let mut orphans = Vec::new();
        for (j, s) in subunits.iter().enumerate() {
            match index.get(s.unit_id.as_str()) {
                Some(&i) => {
                    owner.push(Some(i));
                    members[i].push(j);
                }
                None => {
                    if strict {
                        orphans.push(format!("{} -> {}", s.subunit_id, s.unit_id));
                    }
                    owner.push(None);
                }
            }
        }
        if !orphans.is_empty() {
            return Err(RdaError::Orphans(orphans));
        }
        Ok(Self {
            units,
            subunits,
            owner,
            members,
        })
    }

    pub fn units(&self) -> &[UnitRecord] {
        &self.units
    }

    pub fn subunits(&self) -> &[SubunitRecord] {
        &self.subunits
    }

    pub fn owner(&self, subunit: usize) -> Option<usize> {
        self.owner[subunit]
    }

    /// Indices of the unit's own subunits, ordered by subunit id.
    pub fn members(&self, unit: usize) -> &[usize] {
        &self.members[unit]
    }

    pub fn memberships(&self) -> &[Vec<usize>] {
        &self.members
    }

    pub fn unit_index(&self, unit_id: &str) -> Option<usize> {
        self.units
            .binary_search_by(|u| u.unit_id.as_str().cmp(unit_id))
            .ok()
    }

    pub fn subunit_index(&self, subunit_id: &str) -> Option<usize> {
        self.subunits
            .binary_search_by(|s| s.subunit_id.as_str().cmp(subunit_id))
            .ok()
    }

    pub fn outcomes(&self) -> Vec<f64> {
        self.units.iter().map(|u| u.outcome).collect()
    }

    pub fn analysis_weights(&self) -> Vec<f64> {
        self.units.iter().map(|u| u.analysis_weight).collect()
    }

    /// Same data with every outcome replaced.
    pub fn with_outcomes(&self, outcomes: &[f64]) -> Result<Self> {
        if outcomes.len() != self.units.len() {
            return Err(RdaError::LengthMismatch {
                what: "outcomes".into(),
                expected: self.units.len(),
                got: outcomes.len(),
            });
        }
        let mut out = self.clone();
        for (u, &y) in out.units.iter_mut().zip(outcomes) {
            u.outcome = y;
        }
        Ok(out)
    }

    /// Extra-control labels selected by the config, checked to exist on every unit.
    pub fn extra_control_labels(&self, cfg: &DesignConfig) -> Result<Vec<String>> {
        let labels: Vec<String> = match &cfg.extra_controls {
            Some(l) => l.clone(),
            None => {
                let mut all: Vec<String> = self
                    .units
                    .iter()
                    .flat_map(|u| u.extra_controls.keys().cloned())
                    .collect();
                all.sort();
                all.dedup();
                all
            }
        };
        for u in &self.units {
            for l in &labels {
                match u.extra_controls.get(l) {
                    Some(v) if v.is_finite() => {}
                    _ => return Err(invalid(&u.unit_id, &format!("missing control `{l}`"))),
                }
            }
        }
        Ok(labels)
    }

    /// Fixed-effect keys per configured dimension, checked to exist on every unit.
    pub fn fe_keys(&self, cfg: &DesignConfig) -> Result<Vec<Vec<String>>> {
        cfg.fe_dimensions
            .iter()
            .map(|d| {
                self.units
                    .iter()
                    .map(|u| {
                        u.fe_keys
                            .get(d)
                            .cloned()
                            .ok_or_else(|| invalid(&u.unit_id, &format!("missing fixed-effect key `{d}`")))
                    })
                    .collect()
            })
            .collect()
    }
}

fn invalid(id: &str, reason: &str) -> RdaError {
    RdaError::InvalidRecord {
        id: id.to_string(),
        reason: reason.to_string(),
    }
}

/// Aggregated RD controls of one unit.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct RdaControls {
    /// `Σ s`
    pub total_weight: f64,
    /// `Σ s·r`
    pub weighted_running: f64,
    /// `Σ s·r⁺`
    pub weighted_running_right: f64,
}

impl RdaControls {
    pub fn as_array(&self) -> [f64; 3] {
        [
            self.total_weight,
            self.weighted_running,
            self.weighted_running_right,
        ]
    }
}

pub fn kernel_weight(r: f64, h: f64, kernel: Kernel) -> Result<f64> {
    if !(r.abs() <= h) {
        return Err(RdaError::OutsideBandwidth { r, h });
    }
    Ok(match kernel {
        Kernel::Uniform => 1.0,
        Kernel::Triangular => 1.0 - r.abs() / h,
    })
}

pub(crate) fn close_sets_for(
    members: &[Vec<usize>],
    subunits: &[SubunitRecord],
    cfg: &DesignConfig,
) -> Vec<Vec<usize>> {
    members
        .iter()
        .map(|js| {
            js.iter()
                .copied()
                .filter(|&j| cfg.is_close(&subunits[j]))
                .collect()
        })
        .collect()
}

/// Close-set indices per unit (aligned with `ds.units()`).
pub fn close_set_indices(ds: &Dataset, cfg: &DesignConfig) -> Result<Vec<Vec<usize>>> {
    cfg.validate()?;
    Ok(close_sets_for(&ds.members, &ds.subunits, cfg))
}

/// Close subunits per unit id, ordered by subunit id.
pub fn close_set(ds: &Dataset, cfg: &DesignConfig) -> Result<BTreeMap<String, Vec<String>>> {
    let sets = close_set_indices(ds, cfg)?;
    Ok(ds
        .units
        .iter()
        .zip(sets)
        .map(|(u, js)| {
            (
                u.unit_id.clone(),
                js.into_iter()
                    .map(|j| ds.subunits[j].subunit_id.clone())
                    .collect(),
            )
        })
        .collect())
}

pub(crate) fn instrument_for(
    close: &[Vec<usize>],
    subunits: &[SubunitRecord],
    cfg: &DesignConfig,
) -> Vec<f64> {
    close
        .iter()
        .map(|js| {
            js.iter()
                .map(|&j| subunits[j].importance * cfg.cutoff_rule.indicator(subunits[j].running))
                .sum()
        })
        .collect()
}

pub(crate) fn controls_for(
    close: &[Vec<usize>],
    subunits: &[SubunitRecord],
    cfg: &DesignConfig,
) -> Vec<RdaControls> {
    close
        .iter()
        .map(|js| {
            let mut q = RdaControls::default();
            for &j in js {
                let s = &subunits[j];
                q.total_weight += s.importance;
                q.weighted_running += s.importance * s.running;
                q.weighted_running_right += s.importance * cfg.cutoff_rule.positive_part(s.running);
            }
            q
        })
        .collect()
}

pub(crate) fn treatment_for(
    members: &[Vec<usize>],
    units: &[UnitRecord],
    subunits: &[SubunitRecord],
    cfg: &DesignConfig,
) -> Result<Vec<f64>> {
    members
        .iter()
        .zip(units)
        .map(|(js, u)| {
            if let Some(x) = u.treatment_override {
                return Ok(x);
            }
            js.iter()
                .map(|&j| {
                    let s = &subunits[j];
                    let t = match cfg.treatment_basis {
                        TreatmentBasis::CutoffCrossing => cfg.cutoff_rule.indicator(s.running),
                        TreatmentBasis::WinFlag => match s.win_flag {
                            Some(true) => 1.0,
                            Some(false) => 0.0,
                            None => return Err(RdaError::MissingWinFlag(s.subunit_id.clone())),
                        },
                    };
                    Ok(s.importance * t)
                })
                .sum()
        })
        .collect()
}

/// `Z_i = Σ_{j∈C_i} s_j z_j`, zero for units without close subunits.
pub fn build_instrument(ds: &Dataset, cfg: &DesignConfig) -> Result<Vec<f64>> {
    cfg.uniform_kernel_required("building the aggregated instrument")?;
    let close = close_set_indices(ds, cfg)?;
    Ok(instrument_for(&close, &ds.subunits, cfg))
}

/// `Q_i = (Σ s, Σ s·r, Σ s·r⁺)` over the close set.
pub fn build_rda_controls(ds: &Dataset, cfg: &DesignConfig) -> Result<Vec<RdaControls>> {
    let close = close_set_indices(ds, cfg)?;
    Ok(controls_for(&close, &ds.subunits, cfg))
}

/// `X_i = Σ_{j∈J_i} s_j t_j` over all of the unit's subunits, unless overridden.
pub fn aggregate_treatment(ds: &Dataset, cfg: &DesignConfig) -> Result<Vec<f64>> {
    treatment_for(&ds.members, &ds.units, &ds.subunits, cfg)
}

/// One close subunit with its owning unit's outcome and treatment attached.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StackedRow {
    pub subunit_id: String,
    pub unit_id: String,
    #[serde(skip)]
    pub unit: usize,
    #[serde(skip)]
    pub subunit: usize,
    pub outcome: f64,
    pub treatment: f64,
    /// `(1, r, r⁺)`
    pub q: [f64; 3],
    pub instrument: f64,
    pub importance: f64,
    pub kernel_weight: f64,
}

/// Pools every close subunit, ordered by subunit id.
pub fn stack_lower(ds: &Dataset, cfg: &DesignConfig) -> Result<Vec<StackedRow>> {
    cfg.validate()?;
    let x = aggregate_treatment(ds, cfg)?;
    let mut rows = Vec::new();
    for (j, s) in ds.subunits.iter().enumerate() {
        let Some(i) = ds.owner[j] else { continue };
        if !cfg.is_close(s) {
            continue;
        }
        let u = &ds.units[i];
        rows.push(StackedRow {
            subunit_id: s.subunit_id.clone(),
            unit_id: u.unit_id.clone(),
            unit: i,
            subunit: j,
            outcome: u.outcome,
            treatment: x[i],
            q: [1.0, s.running, cfg.cutoff_rule.positive_part(s.running)],
            instrument: cfg.cutoff_rule.indicator(s.running),
            importance: s.importance,
            kernel_weight: kernel_weight(s.running, cfg.bandwidth, cfg.kernel)?,
        });
    }
    Ok(rows)
}
