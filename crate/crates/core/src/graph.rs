//! Heterogeneous source/agent graph with bidirectional containment edges.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Segments, Tensor};
use crate::error::{Error, Result};
use crate::grid::GridCell;
use crate::ingest::Region;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub source_layout: Vec<String>,
    pub agent_layout: Vec<String>,
    /// Per-source divisor used to turn indicators into shares (0 for
    /// all-zero regions, whose features are left at zero).
    pub source_totals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeteroGraph {
    pub source_features: Tensor,
    pub agent_features: Tensor,
    /// (source, agent) pairs.
    pub edges_sa: Vec<(usize, usize)>,
    /// (agent, source) pairs; the exact reversal of `edges_sa`.
    pub edges_as: Vec<(usize, usize)>,
    pub source_ids: Vec<String>,
    pub agent_ids: Vec<String>,
}

impl HeteroGraph {
    /// Assembles and validates a graph from raw parts.
    pub fn from_parts(
        source_features: Tensor,
        agent_features: Tensor,
        edges_sa: Vec<(usize, usize)>,
        source_ids: Vec<String>,
        agent_ids: Vec<String>,
    ) -> Result<Self> {
        let g = HeteroGraph {
            edges_as: edges_sa.iter().map(|&(s, a)| (a, s)).collect(),
            source_features,
            agent_features,
            edges_sa,
            source_ids,
            agent_ids,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn n_sources(&self) -> usize {
        self.source_features.rows()
    }

    pub fn n_agents(&self) -> usize {
        self.agent_features.rows()
    }

    pub fn n_edges(&self) -> usize {
        self.edges_sa.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (ns, na) = (self.n_sources(), self.n_agents());
        if self.source_ids.len() != ns || self.agent_ids.len() != na {
            return Err(Error::Graph("id maps do not match feature rows".into()));
        }
        if self.edges_as.len() != self.edges_sa.len()
            || self
                .edges_sa
                .iter()
                .zip(&self.edges_as)
                .any(|(&(s, a), &(a2, s2))| s != s2 || a != a2)
        {
            return Err(Error::Graph("edges_as is not the reversal of edges_sa".into()));
        }
        let mut seen = HashSet::with_capacity(self.edges_sa.len());
        let mut covered = vec![false; na];
        for &(s, a) in &self.edges_sa {
            if s >= ns || a >= na {
                return Err(Error::Graph(format!("edge ({s}, {a}) out of range")));
            }
            if !seen.insert((s, a)) {
                return Err(Error::Graph(format!("duplicate edge ({s}, {a})")));
            }
            covered[a] = true;
        }
        if let Some(a) = covered.iter().position(|c| !c) {
            return Err(Error::Graph(format!("agent {} has no edge", self.agent_ids[a])));
        }
        if !self.source_features.is_finite() || !self.agent_features.is_finite() {
            return Err(Error::Graph("non-finite node features".into()));
        }
        Ok(())
    }

    /// Edges grouped by source node.
    pub fn source_segments(&self) -> Segments {
        Segments::new(self.edges_sa.iter().map(|e| e.0).collect(), self.n_sources())
    }

    /// Agent indices connected to `source`, ascending.
    pub fn neighborhood(&self, source: usize) -> Result<Vec<usize>> {
        if source >= self.n_sources() {
            return Err(Error::Graph(format!(
                "source index {source} out of range (n = {})",
                self.n_sources()
            )));
        }
        let mut out: Vec<usize> = self
            .edges_sa
            .iter()
            .filter(|e| e.0 == source)
            .map(|e| e.1)
            .collect();
        out.sort_unstable();
        Ok(out)
    }

    pub fn edge_sources(&self) -> Vec<usize> {
        self.edges_sa.iter().map(|e| e.0).collect()
    }

    pub fn edge_agents(&self) -> Vec<usize> {
        self.edges_sa.iter().map(|e| e.1).collect()
    }

    /// Induced subgraph on the given sources and every agent they reach.
    /// Node order is preserved.
    pub fn subgraph(&self, sources: &[usize]) -> Result<HeteroGraph> {
        let mut keep_s = vec![None; self.n_sources()];
        for (new, &s) in sources.iter().enumerate() {
            *keep_s.get_mut(s).ok_or_else(|| Error::Graph(format!("source {s} out of range")))? = Some(new);
        }
        let mut keep_a = vec![None; self.n_agents()];
        let mut agents = Vec::new();
        for &(s, a) in &self.edges_sa {
            if keep_s[s].is_some() && keep_a[a].is_none() {
                keep_a[a] = Some(0);
                agents.push(a);
            }
        }
        agents.sort_unstable();
        for (new, &a) in agents.iter().enumerate() {
            keep_a[a] = Some(new);
        }
        let rows = |t: &Tensor, idx: &[usize]| -> Result<Tensor> {
            let mut data = Vec::with_capacity(idx.len() * t.cols());
            for &i in idx {
                data.extend_from_slice(t.row(i));
            }
            Ok(Tensor::from_vec(idx.len(), t.cols(), data)?)
        };
        let edges = self
            .edges_sa
            .iter()
            .filter_map(|&(s, a)| Some((keep_s[s]?, keep_a[a]?)))
            .collect();
        HeteroGraph::from_parts(
            rows(&self.source_features, sources)?,
            rows(&self.agent_features, &agents)?,
            edges,
            sources.iter().map(|&s| self.source_ids[s].clone()).collect(),
            agents.iter().map(|&a| self.agent_ids[a].clone()).collect(),
        )
    }

    /// Source indices whose neighborhood is empty.
    pub fn isolated_sources(&self) -> Vec<usize> {
        let mut has = vec![false; self.n_sources()];
        for &(s, _) in &self.edges_sa {
            has[s] = true;
        }
        (0..self.n_sources()).filter(|&s| !has[s]).collect()
    }
}

/// Builds the containment graph. Source features are population and GVA
/// shares of the region's indicator total; agent features are land-use
/// fractions followed by the dominant-class one-hot.
pub fn build_graph(
    regions: &[Region],
    cells: &[GridCell],
    gva_categories: &[String],
    class_set: &[String],
) -> Result<(HeteroGraph, FeatureSpec)> {
    let index: HashMap<&str, usize> = regions
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.as_str(), i))
        .collect();

    let d_s = 1 + gva_categories.len();
    let mut source_data = Vec::with_capacity(regions.len() * d_s);
    let mut totals = Vec::with_capacity(regions.len());
    for r in regions {
        if r.gva.len() != gva_categories.len() {
            return Err(Error::Graph(format!(
                "region {} has {} gva components, expected {}",
                r.id,
                r.gva.len(),
                gva_categories.len()
            )));
        }
        let total = r.indicator_total();
        if total > 0.0 {
            source_data.push(r.population / total);
            source_data.extend(r.gva.iter().map(|g| g / total));
            totals.push(total);
        } else {
            warn!("region {} has all-zero indicators; features set to zero", r.id);
            source_data.extend(std::iter::repeat(0.0).take(d_s));
            totals.push(0.0);
        }
    }

    let k = class_set.len();
    let mut agent_data = Vec::with_capacity(cells.len() * 2 * k);
    let mut edges = Vec::with_capacity(cells.len());
    for (a, cell) in cells.iter().enumerate() {
        let s = *index.get(cell.region_id.as_str()).ok_or_else(|| {
            Error::Graph(format!(
                "cell {} references unknown region {}",
                cell.id, cell.region_id
            ))
        })?;
        if cell.fractions.len() != k {
            return Err(Error::Graph(format!(
                "cell {} has {} fractions, expected {k}",
                cell.id,
                cell.fractions.len()
            )));
        }
        agent_data.extend_from_slice(&cell.fractions);
        agent_data.extend(cell.dominant_onehot());
        edges.push((s, a));
    }

    let graph = HeteroGraph::from_parts(
        Tensor::from_vec(regions.len(), d_s, source_data)?,
        Tensor::from_vec(cells.len(), 2 * k, agent_data)?,
        edges,
        regions.iter().map(|r| r.id.clone()).collect(),
        cells.iter().map(|c| c.id.clone()).collect(),
    )?;
    for s in graph.isolated_sources() {
        warn!(
            "region {} has an empty neighborhood and is excluded from the loss",
            graph.source_ids[s]
        );
    }

    let spec = FeatureSpec {
        source_layout: std::iter::once("population_share".to_string())
            .chain(gva_categories.iter().map(|c| format!("gva_{c}_share")))
            .collect(),
        agent_layout: class_set
            .iter()
            .map(|c| format!("fraction_{c}"))
            .chain(class_set.iter().map(|c| format!("dominant_{c}")))
            .collect(),
        source_totals: totals,
    };
    Ok((graph, spec))
}

#[derive(Serialize, Deserialize)]
struct GraphDump {
    n_sources: usize,
    n_agents: usize,
    feature_spec: FeatureSpec,
    graph: HeteroGraph,
}

/// Writes `graph.json`: node counts, layouts, edge lists and features.
pub fn write_graph(path: &Path, graph: &HeteroGraph, spec: &FeatureSpec) -> Result<()> {
    let dump = GraphDump {
        n_sources: graph.n_sources(),
        n_agents: graph.n_agents(),
        feature_spec: spec.clone(),
        graph: graph.clone(),
    };
    let text = serde_json::to_string(&dump)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_graph(path: &Path) -> Result<(HeteroGraph, FeatureSpec)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dump: GraphDump = serde_json::from_str(&text)?;
    dump.graph.validate()?;
    if dump.feature_spec.source_layout.len() != dump.graph.source_features.cols()
        || dump.feature_spec.agent_layout.len() != dump.graph.agent_features.cols()
    {
        return Err(Error::Graph(format!(
            "{}: feature layout does not match matrix widths",
            path.display()
        )));
    }
    Ok((dump.graph, dump.feature_spec))
}
