//! CSV ingestion and serialization for units, subunits and spillover edges.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use rda_core::design::{Dataset, SubunitRecord, UnitRecord};
use rda_core::diagnostics::VarianceRecord;
use rda_core::estimators::SubunitOutcome;
use rda_core::RdaError;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    Open {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: column {column}: {message}")]
    Schema {
        file: String,
        line: u64,
        column: String,
        message: String,
    },

    #[error("{file}: rows reference unknown ids: {}", ids.join(", "))]
    Orphans { file: String, ids: Vec<String> },

    #[error("{file}: {source}")]
    Csv {
        file: String,
        #[source]
        source: csv::Error,
    },

    #[error(transparent)]
    Core(#[from] RdaError),
}

pub type Result<T> = std::result::Result<T, IoError>;

#[derive(Debug, Clone, Default)]
pub struct BundlePaths {
    pub units: PathBuf,
    pub subunits: PathBuf,
    pub edges: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Drop units whose subunits' importance sums above this cap.
    pub max_total_importance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ValidationReport {
    pub n_units: usize,
    pub n_subunits: usize,
    pub n_edges: usize,
    pub dropped_units: Vec<String>,
    pub dropped_subunits: usize,
    pub dropped_edges: usize,
}

/// Records in file order, validated against each other.
#[derive(Debug, Clone, PartialEq)]
pub struct InputBundle {
    pub units: Vec<UnitRecord>,
    pub subunits: Vec<SubunitRecord>,
    pub edges: Option<Vec<(String, String)>>,
    pub report: ValidationReport,
}

impl InputBundle {
    /// Subunits are owned by their units unless the bundle carries an edge list.
    pub fn dataset(&self) -> Result<Dataset> {
        let ds = if self.edges.is_some() {
            Dataset::unlinked(self.units.clone(), self.subunits.clone())?
        } else {
            Dataset::new(self.units.clone(), self.subunits.clone())?
        };
        Ok(ds)
    }
}

/// A header-indexed CSV table.
struct Table {
    file: String,
    columns: Vec<String>,
    index: HashMap<String, usize>,
    rows: Vec<(u64, csv::StringRecord)>,
}

impl Table {
    fn read(path: &Path) -> Result<Table> {
        let file = path.display().to_string();
        let handle = File::open(path).map_err(|source| IoError::Open {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_reader(file, handle)
    }

    fn from_reader(file: String, reader: impl Read) -> Result<Table> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let csv_err = |source| IoError::Csv {
            file: file.clone(),
            source,
        };
        let columns: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
        let mut index = HashMap::new();
        for (k, c) in columns.iter().enumerate() {
            if index.insert(c.clone(), k).is_some() {
                return Err(schema(&file, 1, &column_label(k, c), "duplicate column"));
            }
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(csv_err)?;
            let line = rec.position().map_or(0, |p| p.line());
            rows.push((line, rec));
        }
        Ok(Table {
            file,
            columns,
            index,
            rows,
        })
    }

    fn require(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| schema(&self.file, 1, &format!("`{name}`"), "required column is missing"))
    }

    fn optional(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Rejects any header that is neither listed nor carries an allowed prefix.
    fn allow_only(&self, names: &[&str], prefixes: &[&str]) -> Result<()> {
        for (k, c) in self.columns.iter().enumerate() {
            if !names.contains(&c.as_str()) && !prefixes.iter().any(|p| c.starts_with(p) && c.len() > p.len()) {
                return Err(schema(&self.file, 1, &column_label(k, c), "unknown column"));
            }
        }
        Ok(())
    }

    fn prefixed(&self, prefix: &str) -> Vec<(usize, String)> {
        self.columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.starts_with(prefix) && c.len() > prefix.len())
            .map(|(k, c)| (k, c[prefix.len()..].to_string()))
            .collect()
    }

    fn cell<'a>(&self, row: &'a csv::StringRecord, k: usize) -> &'a str {
        row.get(k).unwrap_or("")
    }

    fn text(&self, line: u64, row: &csv::StringRecord, k: usize) -> Result<String> {
        let v = self.cell(row, k);
        if v.is_empty() {
            return Err(self.err(line, k, "value is empty"));
        }
        Ok(v.to_string())
    }

    fn number(&self, line: u64, row: &csv::StringRecord, k: usize) -> Result<f64> {
        self.optional_number(line, row, k)?
            .ok_or_else(|| self.err(line, k, "value is empty"))
    }

    /// Empty cells are `None`; anything else must be a finite decimal number.
    fn optional_number(&self, line: u64, row: &csv::StringRecord, k: usize) -> Result<Option<f64>> {
        let v = self.cell(row, k);
        if v.is_empty() {
            return Ok(None);
        }
        match v.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(Some(x)),
            _ => Err(self.err(line, k, &format!("`{v}` is not a finite number"))),
        }
    }

    fn err(&self, line: u64, k: usize, message: &str) -> IoError {
        schema(&self.file, line, &column_label(k, &self.columns[k]), message)
    }
}

fn column_label(k: usize, name: &str) -> String {
    format!("{} (`{name}`)", k + 1)
}

fn schema(file: &str, line: u64, column: &str, message: &str) -> IoError {
    IoError::Schema {
        file: file.to_string(),
        line,
        column: column.to_string(),
        message: message.to_string(),
    }
}

fn parse_units(t: &Table) -> Result<Vec<UnitRecord>> {
    t.allow_only(&["unit_id", "outcome", "weight", "treatment_override"], &["fe_", "ctrl_"])?;
    let id = t.require("unit_id")?;
    let outcome = t.require("outcome")?;
    let weight = t.optional("weight");
    let tov = t.optional("treatment_override");
    let fe = t.prefixed("fe_");
    let ctrl = t.prefixed("ctrl_");
    let mut seen = HashSet::new();
    let mut units = Vec::with_capacity(t.rows.len());
    for (line, row) in &t.rows {
        let line = *line;
        let unit_id = t.text(line, row, id)?;
        if !seen.insert(unit_id.clone()) {
            return Err(t.err(line, id, &format!("duplicate unit id `{unit_id}`")));
        }
        let mut u = UnitRecord::new(unit_id, t.number(line, row, outcome)?);
        if let Some(k) = weight {
            let w = t.optional_number(line, row, k)?.unwrap_or(1.0);
            if w < 0.0 {
                return Err(t.err(line, k, "weight must be nonnegative"));
            }
            u.analysis_weight = w;
        }
        if let Some(k) = tov {
            u.treatment_override = t.optional_number(line, row, k)?;
        }
        for (k, name) in &fe {
            let v = t.cell(row, *k);
            if v.is_empty() {
                return Err(t.err(line, *k, "fixed-effect key is empty"));
            }
            u.fe_keys.insert(name.clone(), v.to_string());
        }
        for (k, name) in &ctrl {
            if let Some(v) = t.optional_number(line, row, *k)? {
                u.extra_controls.insert(name.clone(), v);
            }
        }
        units.push(u);
    }
    Ok(units)
}

fn parse_subunits(t: &Table, linked: bool) -> Result<Vec<SubunitRecord>> {
    t.allow_only(&["subunit_id", "unit_id", "running", "importance", "win_flag"], &["attr_"])?;
    let id = t.require("subunit_id")?;
    let unit = if linked { Some(t.require("unit_id")?) } else { t.optional("unit_id") };
    let running = t.require("running")?;
    let importance = t.require("importance")?;
    let win = t.optional("win_flag");
    let attrs = t.prefixed("attr_");
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(t.rows.len());
    for (line, row) in &t.rows {
        let line = *line;
        let sid = t.text(line, row, id)?;
        if !seen.insert(sid.clone()) {
            return Err(t.err(line, id, &format!("duplicate subunit id `{sid}`")));
        }
        let uid = match unit {
            Some(k) if linked => t.text(line, row, k)?,
            Some(k) => t.cell(row, k).to_string(),
            None => String::new(),
        };
        let s = t.number(line, row, importance)?;
        if s <= 0.0 {
            return Err(t.err(line, importance, "importance must be positive"));
        }
        let mut rec = SubunitRecord::new(sid, uid, t.number(line, row, running)?, s);
        if let Some(k) = win {
            rec.win_flag = match t.cell(row, k) {
                "" => None,
                "0" => Some(false),
                "1" => Some(true),
                v => return Err(t.err(line, k, &format!("`{v}` is not 0 or 1"))),
            };
        }
        for (k, name) in &attrs {
            if let Some(v) = t.optional_number(line, row, *k)? {
                rec.attributes.insert(name.clone(), v);
            }
        }
        out.push(rec);
    }
    Ok(out)
}

fn parse_edges(t: &Table) -> Result<Vec<(String, String)>> {
    t.allow_only(&["outcome_unit_id", "subunit_id"], &[])?;
    let u = t.require("outcome_unit_id")?;
    let s = t.require("subunit_id")?;
    t.rows
        .iter()
        .map(|(line, row)| Ok((t.text(*line, row, u)?, t.text(*line, row, s)?)))
        .collect()
}

/// Reads, validates and optionally filters a bundle.
pub fn load_bundle(paths: &BundlePaths, opts: &LoadOptions) -> Result<InputBundle> {
    let units_t = Table::read(&paths.units)?;
    let subs_t = Table::read(&paths.subunits)?;
    let edges_t = paths.edges.as_deref().map(Table::read).transpose()?;
    bundle_from_tables(&units_t, &subs_t, edges_t.as_ref(), opts)
}

/// Same as [`load_bundle`] over in-memory CSV text.
pub fn bundle_from_strs(units: &str, subunits: &str, edges: Option<&str>, opts: &LoadOptions) -> Result<InputBundle> {
    let u = Table::from_reader("units.csv".into(), units.as_bytes())?;
    let s = Table::from_reader("subunits.csv".into(), subunits.as_bytes())?;
    let e = edges
        .map(|e| Table::from_reader("edges.csv".into(), e.as_bytes()))
        .transpose()?;
    bundle_from_tables(&u, &s, e.as_ref(), opts)
}

fn bundle_from_tables(
    units_t: &Table,
    subs_t: &Table,
    edges_t: Option<&Table>,
    opts: &LoadOptions,
) -> Result<InputBundle> {
    let mut units = parse_units(units_t)?;
    let mut subunits = parse_subunits(subs_t, edges_t.is_none())?;
    let mut edges = edges_t.map(parse_edges).transpose()?;

    let unit_ids: HashSet<&str> = units.iter().map(|u| u.unit_id.as_str()).collect();
    let orphans: Vec<String> = subunits
        .iter()
        .filter(|s| !s.unit_id.is_empty() && !unit_ids.contains(s.unit_id.as_str()))
        .map(|s| format!("{} -> {}", s.subunit_id, s.unit_id))
        .collect();
    if !orphans.is_empty() {
        return Err(IoError::Orphans {
            file: subs_t.file.clone(),
            ids: orphans,
        });
    }
    if let (Some(edges), Some(t)) = (&edges, edges_t) {
        let sub_ids: HashSet<&str> = subunits.iter().map(|s| s.subunit_id.as_str()).collect();
        let dangling: Vec<String> = edges
            .iter()
            .filter(|(u, s)| !unit_ids.contains(u.as_str()) || !sub_ids.contains(s.as_str()))
            .map(|(u, s)| format!("{u} -> {s}"))
            .collect();
        if !dangling.is_empty() {
            return Err(IoError::Orphans {
                file: t.file.clone(),
                ids: dangling,
            });
        }
    }

    let mut report = ValidationReport::default();
    if let Some(cap) = opts.max_total_importance {
        let mut total: HashMap<&str, f64> = HashMap::new();
        for s in &subunits {
            *total.entry(s.unit_id.as_str()).or_default() += s.importance;
        }
        let dropped: BTreeSet<String> = units
            .iter()
            .filter(|u| total.get(u.unit_id.as_str()).copied().unwrap_or(0.0) > cap)
            .map(|u| u.unit_id.clone())
            .collect();
        if !dropped.is_empty() {
            units.retain(|u| !dropped.contains(&u.unit_id));
            let before = subunits.len();
            subunits.retain(|s| !dropped.contains(&s.unit_id));
            report.dropped_subunits = before - subunits.len();
            if let Some(e) = &mut edges {
                let before = e.len();
                e.retain(|(u, _)| !dropped.contains(u));
                report.dropped_edges = before - e.len();
            }
            report.dropped_units = dropped.into_iter().collect();
        }
    }
    report.n_units = units.len();
    report.n_subunits = subunits.len();
    report.n_edges = edges.as_ref().map_or(0, Vec::len);
    Ok(InputBundle {
        units,
        subunits,
        edges,
        report,
    })
}

/// `subunit_id, running, outcome[, importance]`; other columns are ignored.
pub fn load_subunit_outcomes(path: &Path) -> Result<Vec<SubunitOutcome>> {
    let t = Table::read(path)?;
    let id = t.require("subunit_id")?;
    let r = t.require("running")?;
    let y = t.require("outcome")?;
    let s = t.optional("importance");
    t.rows
        .iter()
        .map(|(line, row)| {
            let mut o = SubunitOutcome::new(t.text(*line, row, id)?, t.number(*line, row, r)?, t.number(*line, row, y)?);
            if let Some(k) = s {
                o.importance = t.number(*line, row, k)?;
            }
            Ok(o)
        })
        .collect()
}

/// `cell, value[, weight]`
pub fn load_variance_records(path: &Path) -> Result<Vec<VarianceRecord>> {
    let t = Table::read(path)?;
    t.allow_only(&["cell", "value", "weight"], &[])?;
    let c = t.require("cell")?;
    let v = t.require("value")?;
    let w = t.optional("weight");
    t.rows
        .iter()
        .map(|(line, row)| {
            let weight = match w {
                Some(k) => t.number(*line, row, k)?,
                None => 1.0,
            };
            Ok(VarianceRecord::new(t.text(*line, row, c)?, t.number(*line, row, v)?, weight))
        })
        .collect()
}

/// One row of a counterfactual input series.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesRow {
    pub period: String,
    pub actual: f64,
    pub shortfall: f64,
}

/// `[period,] actual, shortfall`; periods default to row numbers.
pub fn load_series(path: &Path) -> Result<Vec<SeriesRow>> {
    let t = Table::read(path)?;
    t.allow_only(&["period", "actual", "shortfall"], &[])?;
    let p = t.optional("period");
    let a = t.require("actual")?;
    let s = t.require("shortfall")?;
    t.rows
        .iter()
        .enumerate()
        .map(|(k, (line, row))| {
            Ok(SeriesRow {
                period: match p {
                    Some(c) => t.text(*line, row, c)?,
                    None => k.to_string(),
                },
                actual: t.number(*line, row, a)?,
                shortfall: t.number(*line, row, s)?,
            })
        })
        .collect()
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn csv_err(file: &str) -> impl Fn(csv::Error) -> IoError + '_ {
    move |source| IoError::Csv {
        file: file.to_string(),
        source,
    }
}

/// Writes units with every optional column any unit uses; round-trips through [`load_bundle`].
pub fn write_units<W: Write>(units: &[UnitRecord], out: W) -> Result<()> {
    let fe: BTreeSet<&String> = units.iter().flat_map(|u| u.fe_keys.keys()).collect();
    let ctrl: BTreeSet<&String> = units.iter().flat_map(|u| u.extra_controls.keys()).collect();
    let has_tov = units.iter().any(|u| u.treatment_override.is_some());
    let mut w = csv::Writer::from_writer(out);
    let err = csv_err("units.csv");
    let mut header: Vec<String> = vec!["unit_id".into(), "outcome".into(), "weight".into()];
    if has_tov {
        header.push("treatment_override".into());
    }
    header.extend(fe.iter().map(|f| format!("fe_{f}")));
    header.extend(ctrl.iter().map(|c| format!("ctrl_{c}")));
    w.write_record(&header).map_err(&err)?;
    for u in units {
        let mut row = vec![u.unit_id.clone(), num(u.outcome), num(u.analysis_weight)];
        if has_tov {
            row.push(u.treatment_override.map(num).unwrap_or_default());
        }
        row.extend(fe.iter().map(|f| u.fe_keys.get(*f).cloned().unwrap_or_default()));
        row.extend(ctrl.iter().map(|c| u.extra_controls.get(*c).copied().map(num).unwrap_or_default()));
        w.write_record(&row).map_err(&err)?;
    }
    w.flush().map_err(|e| err(e.into()))
}

pub fn write_subunits<W: Write>(subunits: &[SubunitRecord], out: W) -> Result<()> {
    let attrs: BTreeSet<&String> = subunits.iter().flat_map(|s| s.attributes.keys()).collect();
    let has_win = subunits.iter().any(|s| s.win_flag.is_some());
    let mut w = csv::Writer::from_writer(out);
    let err = csv_err("subunits.csv");
    let mut header: Vec<String> = ["subunit_id", "unit_id", "running", "importance"].map(String::from).to_vec();
    if has_win {
        header.push("win_flag".into());
    }
    header.extend(attrs.iter().map(|a| format!("attr_{a}")));
    w.write_record(&header).map_err(&err)?;
    for s in subunits {
        let mut row = vec![s.subunit_id.clone(), s.unit_id.clone(), num(s.running), num(s.importance)];
        if has_win {
            row.push(s.win_flag.map(|b| if b { "1" } else { "0" }.to_string()).unwrap_or_default());
        }
        row.extend(attrs.iter().map(|a| s.attributes.get(*a).copied().map(num).unwrap_or_default()));
        w.write_record(&row).map_err(&err)?;
    }
    w.flush().map_err(|e| err(e.into()))
}

pub fn write_edges<W: Write>(edges: &[(String, String)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = csv_err("edges.csv");
    w.write_record(["outcome_unit_id", "subunit_id"]).map_err(&err)?;
    for (u, s) in edges {
        w.write_record([u, s]).map_err(&err)?;
    }
    w.flush().map_err(|e| err(e.into()))
}

/// Control-column names without their `ctrl_` prefix, in sorted order.
pub fn control_names(units: &[UnitRecord]) -> Vec<String> {
    let names: BTreeMap<&String, ()> = units.iter().flat_map(|u| u.extra_controls.keys().map(|k| (k, ()))).collect();
    names.into_keys().cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const UNITS: &str = "unit_id,outcome,weight,fe_region,ctrl_size\nA,1.5,2,north,0.25\nB,-0.5,1,south,\n";
    const SUBS: &str = "subunit_id,unit_id,running,importance,win_flag,attr_votes\na1,A,0.05,0.4,1,30\na2,A,-0.02,0.6,0,\nb1,B,0.2,1,,12\n";

    #[test]
    fn parses_every_column_family() {
        let b = bundle_from_strs(UNITS, SUBS, None, &LoadOptions::default()).unwrap();
        assert_eq!(b.units[0].fe_keys["region"], "north");
        assert_eq!(b.units[0].extra_controls["size"], 0.25);
        assert!(!b.units[1].extra_controls.contains_key("size"));
        assert_eq!(b.subunits[0].win_flag, Some(true));
        assert_eq!(b.subunits[2].win_flag, None);
        assert_eq!(b.subunits[0].attributes["votes"], 30.0);
        assert_eq!(b.report.n_subunits, 3);
    }

    #[test]
    fn writer_reproduces_canonical_input() {
        let b = bundle_from_strs(UNITS, SUBS, None, &LoadOptions::default()).unwrap();
        let mut u = Vec::new();
        let mut s = Vec::new();
        write_units(&b.units, &mut u).unwrap();
        write_subunits(&b.subunits, &mut s).unwrap();
        assert_eq!(String::from_utf8(u).unwrap(), UNITS);
        assert_eq!(String::from_utf8(s).unwrap(), SUBS);
    }

    #[test]
    fn bad_number_reports_position() {
        let subs = "subunit_id,unit_id,running,importance\na1,A,abc,1\n";
        match bundle_from_strs(UNITS, subs, None, &LoadOptions::default()) {
            Err(IoError::Schema { line, column, .. }) => {
                assert_eq!(line, 2);
                assert!(column.starts_with("3 "), "{column}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_finite_values_are_rejected() {
        for bad in ["NaN", "inf", "-infinity", " 1"] {
            let subs = format!("subunit_id,unit_id,running,importance\na1,A,{bad},1\n");
            assert!(bundle_from_strs(UNITS, &subs, None, &LoadOptions::default()).is_err(), "{bad}");
        }
    }

    #[test]
    fn unknown_column_is_a_schema_error() {
        let subs = "subunit_id,unit_id,running,importance,votes\na1,A,0.1,1,3\n";
        assert!(matches!(
            bundle_from_strs(UNITS, subs, None, &LoadOptions::default()),
            Err(IoError::Schema { line: 1, .. })
        ));
    }

    #[test]
    fn importance_cap_drops_units_and_their_subunits() {
        let opts = LoadOptions {
            max_total_importance: Some(0.9),
        };
        let b = bundle_from_strs(UNITS, SUBS, None, &opts).unwrap();
        assert_eq!(b.report.dropped_units, vec!["A", "B"]);
        assert!(b.units.is_empty() && b.subunits.is_empty());
        let b = bundle_from_strs(UNITS, SUBS, None, &LoadOptions { max_total_importance: Some(1.0) }).unwrap();
        assert!(b.report.dropped_units.is_empty());
    }

    #[test]
    fn dangling_edges_are_listed() {
        let subs = "subunit_id,running,importance\ns1,0.1,1\n";
        let edges = "outcome_unit_id,subunit_id\nA,s1\nZ,s1\nA,s9\n";
        match bundle_from_strs(UNITS, subs, Some(edges), &LoadOptions::default()) {
            Err(IoError::Orphans { ids, .. }) => assert_eq!(ids, vec!["Z -> s1", "A -> s9"]),
            other => panic!("{other:?}"),
        }
    }
}
