//! Flat `key = value` run settings. Values from a file are read first; command-line flags replace them.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use rda_core::design::{
    ControlSet, CutoffRule, DesignConfig, Filter, Kernel, LowerWeighting, TiePolicy, TreatmentBasis,
};
use rda_core::simlab::{Baseline, DgpSpec, EffectParams, ImportanceScheme, OutcomeKind};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{file}:{line}: {message}")]
    Syntax { file: String, line: usize, message: String },

    #[error("unknown setting `{0}`")]
    UnknownKey(String),

    #[error("setting `{key}`: {message}")]
    Value { key: String, message: String },

    #[error("cannot read {file}: {message}")]
    Read { file: String, message: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Every recognized setting.
pub const KEYS: &[&str] = &[
    // design
    "bandwidth",
    "kernel",
    "cutoff_rule",
    "tie_policy",
    "filters",
    "treatment_basis",
    "control_set",
    "fe_dimensions",
    "extra_controls",
    "include_intercept",
    "lower_weighting",
    "weak_f_threshold",
    // data
    "max_total_importance",
    // simulation
    "n_units",
    "n_subunits_per_unit",
    "max_subunits_per_unit",
    "importance_scheme",
    "rho",
    "outcome_kind",
    "noise_sd",
    "effect_mean",
    "effect_zeta_loading",
    "effect_sd",
    "effect_baseline",
    "effect_baseline_scale",
    "seed",
    "n_replications",
    "n_bootstrap",
    "level",
    "h_grid",
    "estimators",
    // verification and plots
    "tolerance",
    "bins_per_side",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            file: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&path.display().to_string(), &text)
    }

    /// Blank lines and lines starting with `#` are skipped.
    pub fn parse(file: &str, text: &str) -> Result<Self> {
        let mut s = Settings::default();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let syntax = |message: String| ConfigError::Syntax {
                file: file.to_string(),
                line: k + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| syntax(format!("expected key=value, got `{line}`")))?;
            let key = key.trim();
            if s.values.contains_key(key) {
                return Err(syntax(format!("`{key}` is set twice")));
            }
            s.set(key, value.trim()).map_err(|e| syntax(e.to_string()))?;
        }
        Ok(s)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get_str(key)
            .map(|v| {
                v.parse::<T>().map_err(|_| ConfigError::Value {
                    key: key.to_string(),
                    message: format!("cannot parse `{v}`"),
                })
            })
            .transpose()
    }

    fn get_with<T>(&self, key: &str, f: fn(&str) -> Option<T>) -> Result<Option<T>> {
        self.get_str(key)
            .map(|v| {
                f(v).ok_or_else(|| ConfigError::Value {
                    key: key.to_string(),
                    message: format!("unrecognized value `{v}`"),
                })
            })
            .transpose()
    }

    fn list(&self, key: &str) -> Option<Vec<String>> {
        self.get_str(key).map(|v| {
            v.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect()
        })
    }

    /// Every explicitly set value, sorted by key.
    pub fn echo(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn design_config(&self) -> Result<DesignConfig> {
        let mut c = DesignConfig::default();
        if let Some(h) = self.get("bandwidth")? {
            c.bandwidth = h;
        }
        if let Some(k) = self.get_with("kernel", parse_kernel)? {
            c.kernel = k;
        }
        if let Some(r) = self.get_with("cutoff_rule", parse_cutoff)? {
            c.cutoff_rule = r;
        }
        if let Some(t) = self.get_with("tie_policy", parse_ties)? {
            c.tie_policy = t;
        }
        if let Some(v) = self.get_str("filters") {
            c.filters = v
                .split(';')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|f| {
                    f.parse::<Filter>().map_err(|e| ConfigError::Value {
                        key: "filters".into(),
                        message: e.to_string(),
                    })
                })
                .collect::<Result<_>>()?;
        }
        if let Some(b) = self.get_with("treatment_basis", parse_basis)? {
            c.treatment_basis = b;
        }
        if let Some(s) = self.get_with("control_set", parse_controls)? {
            c.control_set = s;
        }
        if let Some(fe) = self.list("fe_dimensions") {
            c.fe_dimensions = fe;
        }
        if let Some(x) = self.list("extra_controls") {
            c.extra_controls = Some(x);
        }
        if let Some(b) = self.get("include_intercept")? {
            c.include_intercept = b;
        }
        if let Some(w) = self.get_with("lower_weighting", parse_lower_weighting)? {
            c.lower_weighting = w;
        }
        if let Some(f) = self.get("weak_f_threshold")? {
            c.weak_f_threshold = f;
        }
        c.validate().map_err(|e| ConfigError::Value {
            key: "design".into(),
            message: e.to_string(),
        })?;
        Ok(c)
    }

    pub fn dgp_spec(&self) -> Result<DgpSpec> {
        let mut s = DgpSpec::default();
        if let Some(v) = self.get("n_units")? {
            s.n_units = v;
        }
        if let Some(v) = self.get("n_subunits_per_unit")? {
            s.n_subunits_per_unit = v;
        }
        if let Some(v) = self.get("max_subunits_per_unit")? {
            s.max_subunits_per_unit = Some(v);
        }
        if let Some(v) = self.get_with("importance_scheme", parse_scheme)? {
            s.importance_scheme = v;
        }
        if let Some(v) = self.get("rho")? {
            s.rho = v;
        }
        if let Some(v) = self.get_with("outcome_kind", parse_outcome)? {
            s.outcome_kind = v;
        }
        if let Some(v) = self.get("noise_sd")? {
            s.noise_sd = v;
        }
        let mut e = EffectParams::default();
        if let Some(v) = self.get("effect_mean")? {
            e.mean = v;
        }
        if let Some(v) = self.get("effect_zeta_loading")? {
            e.zeta_loading = v;
        }
        if let Some(v) = self.get("effect_sd")? {
            e.sd = v;
        }
        if let Some(v) = self.get_with("effect_baseline", parse_baseline)? {
            e.baseline = v;
        }
        if let Some(v) = self.get("effect_baseline_scale")? {
            e.baseline_scale = v;
        }
        s.effect_params = e;
        if let Some(v) = self.get("seed")? {
            s.seed = v;
        }
        s.validate().map_err(|e| ConfigError::Value {
            key: "simulation".into(),
            message: e.to_string(),
        })?;
        Ok(s)
    }

    pub fn h_grid(&self) -> Result<Option<Vec<f64>>> {
        self.list("h_grid")
            .map(|hs| {
                hs.iter()
                    .map(|h| {
                        h.parse::<f64>().map_err(|_| ConfigError::Value {
                            key: "h_grid".into(),
                            message: format!("`{h}` is not a number"),
                        })
                    })
                    .collect()
            })
            .transpose()
    }

    pub fn string_list(&self, key: &str) -> Option<Vec<String>> {
        self.list(key)
    }
}

fn norm(v: &str) -> String {
    v.trim().to_ascii_lowercase().replace('-', "_")
}

pub fn parse_kernel(v: &str) -> Option<Kernel> {
    match norm(v).as_str() {
        "uniform" => Some(Kernel::Uniform),
        "triangular" => Some(Kernel::Triangular),
        _ => None,
    }
}

pub fn parse_cutoff(v: &str) -> Option<CutoffRule> {
    match norm(v).as_str() {
        "geq" => Some(CutoffRule::Geq),
        "strict_gt" | "gt" => Some(CutoffRule::StrictGt),
        _ => None,
    }
}

pub fn parse_ties(v: &str) -> Option<TiePolicy> {
    match norm(v).as_str() {
        "keep" => Some(TiePolicy::Keep),
        "drop_exact_zero" | "drop" => Some(TiePolicy::DropExactZero),
        _ => None,
    }
}

pub fn parse_basis(v: &str) -> Option<TreatmentBasis> {
    match norm(v).as_str() {
        "cutoff_crossing" => Some(TreatmentBasis::CutoffCrossing),
        "win_flag" => Some(TreatmentBasis::WinFlag),
        _ => None,
    }
}

pub fn parse_controls(v: &str) -> Option<ControlSet> {
    match norm(v).as_str() {
        "all" | "all_three_rda" => Some(ControlSet::AllThreeRda),
        "total_weight" | "total_weight_only" => Some(ControlSet::TotalWeightOnly),
        "none" => Some(ControlSet::None),
        _ => None,
    }
}

pub fn parse_lower_weighting(v: &str) -> Option<LowerWeighting> {
    match norm(v).as_str() {
        "importance" => Some(LowerWeighting::Importance),
        "importance_times_analysis" => Some(LowerWeighting::ImportanceTimesAnalysis),
        _ => None,
    }
}

pub fn parse_scheme(v: &str) -> Option<ImportanceScheme> {
    match norm(v).as_str() {
        "equal" => Some(ImportanceScheme::Equal),
        "dirichlet_random" | "dirichlet" => Some(ImportanceScheme::DirichletRandom),
        "unit_sum_one" | "ones" => Some(ImportanceScheme::Ones),
        _ => None,
    }
}

pub fn parse_outcome(v: &str) -> Option<OutcomeKind> {
    match norm(v).as_str() {
        "linear" | "1" => Some(OutcomeKind::Linear),
        "symmetric_quadratic" | "2" => Some(OutcomeKind::SymmetricQuadratic),
        "kinked_quadratic" | "3" => Some(OutcomeKind::KinkedQuadratic),
        "single_subunit" => Some(OutcomeKind::SingleSubunit),
        "heterogeneous_effects" | "heterogeneous" => Some(OutcomeKind::HeterogeneousEffects),
        _ => None,
    }
}

pub fn parse_baseline(v: &str) -> Option<Baseline> {
    match norm(v).as_str() {
        "zero" => Some(Baseline::Zero),
        "linear" => Some(Baseline::Linear),
        "symmetric_quadratic" => Some(Baseline::SymmetricQuadratic),
        "kinked_quadratic" => Some(Baseline::KinkedQuadratic),
        "capped_kink" => Some(Baseline::CappedKink),
        _ => None,
    }
}
