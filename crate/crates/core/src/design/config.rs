use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{RdaError, Result};
use crate::regress::DEFAULT_WEAK_F;

use super::SubunitRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    #[default]
    Uniform,
    Triangular,
}

/// How a running variable maps to crossing the cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CutoffRule {
    /// `z = 1[r >= 0]`
    #[default]
    Geq,
    /// `z = 1[r > 0]`
    StrictGt,
}

impl CutoffRule {
    pub fn crosses(self, r: f64) -> bool {
        match self {
            CutoffRule::Geq => r >= 0.0,
            CutoffRule::StrictGt => r > 0.0,
        }
    }

    pub fn indicator(self, r: f64) -> f64 {
        if self.crosses(r) {
            1.0
        } else {
            0.0
        }
    }

    /// `r · 1[crossed]`
    pub fn positive_part(self, r: f64) -> f64 {
        if self.crosses(r) {
            r
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TiePolicy {
    #[default]
    Keep,
    DropExactZero,
}

/// Source of the subunit-level treatment entering the aggregated treatment.
/// The instrument always uses cutoff crossing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TreatmentBasis {
    #[default]
    CutoffCrossing,
    WinFlag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlSet {
    /// `(Σs, Σs·r, Σs·r⁺)`
    #[default]
    AllThreeRda,
    /// `Σs` only (the under-controlled benchmark).
    TotalWeightOnly,
    None,
}

/// Weights of stacked rows in the lower-level estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LowerWeighting {
    #[default]
    Importance,
    ImportanceTimesAnalysis,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterOp {
    Ge,
    Gt,
    Le,
    Lt,
    AbsGe,
    AbsLe,
}

/// Predicate over a numeric subunit attribute. A missing attribute fails the filter.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Filter {
    pub attribute: String,
    pub op: FilterOp,
    pub value: f64,
}

impl Filter {
    pub fn new(attribute: impl Into<String>, op: FilterOp, value: f64) -> Self {
        Self {
            attribute: attribute.into(),
            op,
            value,
        }
    }

    pub fn passes(&self, subunit: &SubunitRecord) -> bool {
        let Some(&v) = subunit.attributes.get(&self.attribute) else {
            return false;
        };
        match self.op {
            FilterOp::Ge => v >= self.value,
            FilterOp::Gt => v > self.value,
            FilterOp::Le => v <= self.value,
            FilterOp::Lt => v < self.value,
            FilterOp::AbsGe => v.abs() >= self.value,
            FilterOp::AbsLe => v.abs() <= self.value,
        }
    }
}

impl fmt::Display for Filter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (abs, op) = match self.op {
            FilterOp::Ge => (false, ">="),
            FilterOp::Gt => (false, ">"),
            FilterOp::Le => (false, "<="),
            FilterOp::Lt => (false, "<"),
            FilterOp::AbsGe => (true, ">="),
            FilterOp::AbsLe => (true, "<="),
        };
        if abs {
            write!(f, "|{}|{}{}", self.attribute, op, self.value)
        } else {
            write!(f, "{}{}{}", self.attribute, op, self.value)
        }
    }
}

impl FromStr for Filter {
    type Err = RdaError;

    /// Parses `votes>=20`, `|margin|>=2`, `share<0.5`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let ops = [">=", "<=", ">", "<"];
        let (pos, op) = ops
            .iter()
            .filter_map(|op| s.find(op).map(|p| (p, *op)))
            .min_by_key(|(p, op)| (*p, std::cmp::Reverse(op.len())))
            .ok_or_else(|| RdaError::Config(format!("filter `{s}` has no comparison operator")))?;
        let lhs = s[..pos].trim();
        let rhs = s[pos + op.len()..].trim();
        let value: f64 = rhs
            .parse()
            .map_err(|_| RdaError::Config(format!("filter `{s}`: `{rhs}` is not a number")))?;
        let (abs, name) = if lhs.starts_with('|') && lhs.ends_with('|') && lhs.len() > 2 {
            (true, &lhs[1..lhs.len() - 1])
        } else {
            (false, lhs)
        };
        if name.is_empty() {
            return Err(RdaError::Config(format!("filter `{s}` has no attribute")));
        }
        let op = match (abs, op) {
            (false, ">=") => FilterOp::Ge,
            (false, ">") => FilterOp::Gt,
            (false, "<=") => FilterOp::Le,
            (false, "<") => FilterOp::Lt,
            (true, ">=") => FilterOp::AbsGe,
            (true, "<=") => FilterOp::AbsLe,
            _ => {
                return Err(RdaError::Config(format!(
                    "filter `{s}`: absolute-value filters support >= and <= only"
                )))
            }
        };
        Ok(Filter::new(name, op, value))
    }
}

/// Everything needed to turn subunit shocks into RDA ingredients.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DesignConfig {
    pub bandwidth: f64,
    pub kernel: Kernel,
    pub cutoff_rule: CutoffRule,
    pub tie_policy: TiePolicy,
    pub filters: Vec<Filter>,
    pub treatment_basis: TreatmentBasis,
    pub control_set: ControlSet,
    pub fe_dimensions: Vec<String>,
    /// Restrict the unit-level extra controls to these labels; `None` uses all.
    pub extra_controls: Option<Vec<String>>,
    pub include_intercept: bool,
    pub lower_weighting: LowerWeighting,
    pub weak_f_threshold: f64,
}

impl Default for DesignConfig {
    fn default() -> Self {
        Self {
            bandwidth: 0.1,
            kernel: Kernel::Uniform,
            cutoff_rule: CutoffRule::Geq,
            tie_policy: TiePolicy::Keep,
            filters: Vec::new(),
            treatment_basis: TreatmentBasis::CutoffCrossing,
            control_set: ControlSet::AllThreeRda,
            fe_dimensions: Vec::new(),
            extra_controls: None,
            include_intercept: true,
            lower_weighting: LowerWeighting::Importance,
            weak_f_threshold: DEFAULT_WEAK_F,
        }
    }
}

impl DesignConfig {
    pub fn with_bandwidth(h: f64) -> Self {
        Self {
            bandwidth: h,
            ..Self::default()
        }
    }

    /// Union-election sample rules: ten-point band around a strict majority,
    /// at least 20 votes, a vote margin of at least two, ties dropped. The
    /// filters read the `votes` and `margin` attributes.
    pub fn union_election_defaults() -> Self {
        Self {
            bandwidth: 0.10,
            cutoff_rule: CutoffRule::StrictGt,
            tie_policy: TiePolicy::DropExactZero,
            filters: vec![
                Filter::new("votes", FilterOp::Ge, 20.0),
                Filter::new("margin", FilterOp::AbsGe, 2.0),
            ],
            treatment_basis: TreatmentBasis::WinFlag,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0) || !self.bandwidth.is_finite() {
            return Err(RdaError::Config(format!(
                "bandwidth must be positive and finite, got {}",
                self.bandwidth
            )));
        }
        if !(self.weak_f_threshold >= 0.0) {
            return Err(RdaError::Config("weak_f_threshold must be nonnegative".into()));
        }
        Ok(())
    }

    /// Whether a subunit belongs to its unit's close set.
    pub fn is_close(&self, s: &SubunitRecord) -> bool {
        if !(s.running.abs() <= self.bandwidth) {
            return false;
        }
        if self.tie_policy == TiePolicy::DropExactZero && s.running == 0.0 {
            return false;
        }
        self.filters.iter().all(|f| f.passes(s))
    }

    pub(crate) fn uniform_kernel_required(&self, what: &str) -> Result<()> {
        if self.kernel != Kernel::Uniform {
            return Err(RdaError::Config(format!(
                "{what} requires the uniform kernel; kernel weights must not enter the aggregated instrument"
            )));
        }
        Ok(())
    }
}
