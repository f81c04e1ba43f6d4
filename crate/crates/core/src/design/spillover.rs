//! Bipartite exposure of outcome units to intervention subunits.

use serde::Serialize;

use crate::error::{RdaError, Result};

use super::{
    close_sets_for, controls_for, instrument_for, treatment_for, Dataset, DesignConfig,
    LowerWeighting, RdaControls,
};

/// Edges `(outcome unit, intervention subunit)`; a subunit may reach many units.
#[derive(Debug, Clone, PartialEq)]
pub struct SpilloverGraph {
    edges: Vec<(usize, usize)>,
    /// `J_i` per unit, ordered by subunit index.
    exposure: Vec<Vec<usize>>,
    /// `I_j` per subunit, ordered by unit index.
    neighbors: Vec<Vec<usize>>,
}

impl SpilloverGraph {
    /// Resolves id pairs against the dataset; dangling endpoints are an error.
    pub fn new<A: AsRef<str>, B: AsRef<str>>(ds: &Dataset, edges: &[(A, B)]) -> Result<Self> {
        let mut resolved = Vec::with_capacity(edges.len());
        let mut dangling = Vec::new();
        for (u, s) in edges {
            match (ds.unit_index(u.as_ref()), ds.subunit_index(s.as_ref())) {
                (Some(i), Some(j)) => resolved.push((i, j)),
                _ => dangling.push(format!("{} -> {}", u.as_ref(), s.as_ref())),
            }
        }
        if !dangling.is_empty() {
            return Err(RdaError::Orphans(dangling));
        }
        Ok(Self::from_indices(ds, resolved))
    }

    /// Each subunit linked only to the unit that owns it.
    pub fn partition(ds: &Dataset) -> Self {
        let edges = (0..ds.subunits().len())
            .filter_map(|j| ds.owner(j).map(|i| (i, j)))
            .collect();
        Self::from_indices(ds, edges)
    }

    fn from_indices(ds: &Dataset, mut edges: Vec<(usize, usize)>) -> Self {
        edges.sort_unstable();
        edges.dedup();
        let mut exposure = vec![Vec::new(); ds.units().len()];
        let mut neighbors = vec![Vec::new(); ds.subunits().len()];
        for &(i, j) in &edges {
            exposure[i].push(j);
            neighbors[j].push(i);
        }
        for e in &mut exposure {
            e.sort_unstable();
        }
        Self {
            edges,
            exposure,
            neighbors,
        }
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn exposure(&self, unit: usize) -> &[usize] {
        &self.exposure[unit]
    }

    pub fn neighbors(&self, subunit: usize) -> &[usize] {
        &self.neighbors[subunit]
    }

    pub(crate) fn exposures(&self) -> &[Vec<usize>] {
        &self.exposure
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UnitExposure {
    pub treatment: f64,
    pub instrument: f64,
    pub controls: RdaControls,
}

/// Treatment, instrument and RDA controls with `J_i` taken from the graph.
pub fn build_spillover_exposure(
    graph: &SpilloverGraph,
    ds: &Dataset,
    cfg: &DesignConfig,
) -> Result<Vec<UnitExposure>> {
    cfg.validate()?;
    cfg.uniform_kernel_required("building the aggregated instrument")?;
    let members = graph.exposures();
    let close = close_sets_for(members, ds.subunits(), cfg);
    let x = treatment_for(members, ds.units(), ds.subunits(), cfg)?;
    let z = instrument_for(&close, ds.subunits(), cfg);
    let q = controls_for(&close, ds.subunits(), cfg);
    Ok(x
        .into_iter()
        .zip(z)
        .zip(q)
        .map(|((treatment, instrument), controls)| UnitExposure {
            treatment,
            instrument,
            controls,
        })
        .collect())
}

/// One close intervention subunit with its neighbors' outcomes averaged.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CollapsedRecord {
    pub subunit_id: String,
    pub mean_outcome: f64,
    pub mean_treatment: f64,
    pub n_neighbors: usize,
    /// `s_j · N_j` (or `s_j · Σ w_i` under analysis weighting).
    pub weight: f64,
    pub q: [f64; 3],
    pub instrument: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Collapse {
    pub records: Vec<CollapsedRecord>,
    pub notices: Vec<String>,
}

/// Collapses the bilateral sample to one record per close subunit.
pub fn collapse_by_intervention(
    graph: &SpilloverGraph,
    ds: &Dataset,
    cfg: &DesignConfig,
) -> Result<Collapse> {
    let exposure = build_spillover_exposure(graph, ds, cfg)?;
    let mut records = Vec::new();
    let mut notices = Vec::new();
    for (j, s) in ds.subunits().iter().enumerate() {
        if !cfg.is_close(s) {
            continue;
        }
        let nbrs = graph.neighbors(j);
        if nbrs.is_empty() {
            notices.push(format!("subunit `{}` has no outcome neighbors; dropped", s.subunit_id));
            continue;
        }
        let (mut sw, mut sy, mut sx) = (0.0, 0.0, 0.0);
        for &i in nbrs {
            let w = match cfg.lower_weighting {
                LowerWeighting::Importance => 1.0,
                LowerWeighting::ImportanceTimesAnalysis => ds.units()[i].analysis_weight,
            };
            sw += w;
            sy += w * ds.units()[i].outcome;
            sx += w * exposure[i].treatment;
        }
        if sw == 0.0 {
            notices.push(format!("subunit `{}` has zero total neighbor weight; dropped", s.subunit_id));
            continue;
        }
        records.push(CollapsedRecord {
            subunit_id: s.subunit_id.clone(),
            mean_outcome: sy / sw,
            mean_treatment: sx / sw,
            n_neighbors: nbrs.len(),
            weight: s.importance * sw,
            q: [1.0, s.running, cfg.cutoff_rule.positive_part(s.running)],
            instrument: cfg.cutoff_rule.indicator(s.running),
        });
    }
    Ok(Collapse { records, notices })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{build_instrument, build_rda_controls, aggregate_treatment, SubunitRecord, UnitRecord};

    #[test]
    fn shared_treated_neighbor_reaches_both_units() {
        let units = vec![UnitRecord::new("a", 1.0), UnitRecord::new("b", 3.0), UnitRecord::new("c", 0.0)];
        let subunits = vec![SubunitRecord::new("j", "", 0.02, 1.0)];
        let ds = Dataset::unlinked(units, subunits).unwrap();
        let g = SpilloverGraph::new(&ds, &[("a", "j"), ("b", "j")]).unwrap();
        let cfg = DesignConfig::with_bandwidth(0.1);
        let e = build_spillover_exposure(&g, &ds, &cfg).unwrap();
        assert_eq!(e[0].instrument, 1.0);
        assert_eq!(e[1].instrument, 1.0);
        assert_eq!(e[2].instrument, 0.0);
        assert_eq!(e[2].treatment, 0.0);
        assert_eq!(e[2].controls, RdaControls::default());

        let c = collapse_by_intervention(&g, &ds, &cfg).unwrap();
        assert_eq!(c.records.len(), 1);
        assert_eq!(c.records[0].mean_outcome, 2.0);
        assert_eq!(c.records[0].n_neighbors, 2);
        assert_eq!(c.records[0].weight, 2.0);
    }

    #[test]
    fn dangling_edge_is_rejected() {
        let ds = Dataset::unlinked(vec![UnitRecord::new("a", 1.0)], vec![SubunitRecord::new("j", "", 0.0, 1.0)]).unwrap();
        assert!(matches!(SpilloverGraph::new(&ds, &[("a", "k")]), Err(RdaError::Orphans(_))));
        assert!(matches!(SpilloverGraph::new(&ds, &[("z", "j")]), Err(RdaError::Orphans(_))));
    }

    #[test]
    fn partition_graph_matches_plain_construction() {
        let units = vec![UnitRecord::new("u1", 1.0), UnitRecord::new("u2", 2.0)];
        let subunits = vec![
            SubunitRecord::new("a", "u1", 0.04, 0.5),
            SubunitRecord::new("b", "u1", -0.07, 0.5),
            SubunitRecord::new("c", "u2", 0.3, 0.7),
            SubunitRecord::new("d", "u2", -0.01, 0.3),
        ];
        let ds = Dataset::new(units, subunits).unwrap();
        let cfg = DesignConfig::with_bandwidth(0.1);
        let e = build_spillover_exposure(&SpilloverGraph::partition(&ds), &ds, &cfg).unwrap();
        let x = aggregate_treatment(&ds, &cfg).unwrap();
        let z = build_instrument(&ds, &cfg).unwrap();
        let q = build_rda_controls(&ds, &cfg).unwrap();
        for i in 0..2 {
            assert_eq!(e[i].treatment, x[i]);
            assert_eq!(e[i].instrument, z[i]);
            assert_eq!(e[i].controls, q[i]);
        }
    }

    #[test]
    fn single_neighbor_collapse_is_identity() {
        let units = vec![UnitRecord::new("a", 4.5)];
        let subunits = vec![SubunitRecord::new("j", "", -0.03, 0.4)];
        let ds = Dataset::unlinked(units, subunits).unwrap();
        let g = SpilloverGraph::new(&ds, &[("a", "j")]).unwrap();
        let c = collapse_by_intervention(&g, &ds, &DesignConfig::with_bandwidth(0.1)).unwrap();
        assert_eq!(c.records[0].mean_outcome, 4.5);
        assert_eq!(c.records[0].mean_treatment, 0.0);
        assert_eq!(c.records[0].weight, 0.4);
    }

    #[test]
    fn isolated_close_subunit_is_dropped_with_notice() {
        let units = vec![UnitRecord::new("a", 1.0)];
        let subunits = vec![SubunitRecord::new("j", "", 0.01, 1.0), SubunitRecord::new("k", "", 0.02, 1.0)];
        let ds = Dataset::unlinked(units, subunits).unwrap();
        let g = SpilloverGraph::new(&ds, &[("a", "j")]).unwrap();
        let c = collapse_by_intervention(&g, &ds, &DesignConfig::with_bandwidth(0.1)).unwrap();
        assert_eq!(c.records.len(), 1);
        assert_eq!(c.notices.len(), 1);
    }
}
