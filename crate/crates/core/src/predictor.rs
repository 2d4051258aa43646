//! Edge weights from node embeddings: a gated embedding distance as the
//! relation cost, then a temperature softmax over each source's edges.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Segments, Tape, Tensor, Var};
use crate::encoder::uniform_matrix;
use crate::error::{Error, Result};
use crate::grid::GridCell;
use crate::graph::HeteroGraph;

/// Gate MLP `[h_s ‖ h_a] → d → 1` with ReLU in between and a sigmoid on top.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorWeights<T> {
    pub hidden: T,
    pub hidden_bias: T,
    pub gate: T,
    pub gate_bias: T,
}

pub type PredictorParams = PredictorWeights<Tensor>;

impl<T> PredictorWeights<T> {
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        f("hidden".into(), &self.hidden);
        f("hidden_bias".into(), &self.hidden_bias);
        f("gate".into(), &self.gate);
        f("gate_bias".into(), &self.gate_bias);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut T)) {
        f("hidden".into(), &mut self.hidden);
        f("hidden_bias".into(), &mut self.hidden_bias);
        f("gate".into(), &mut self.gate);
        f("gate_bias".into(), &mut self.gate_bias);
    }

    pub fn try_map<U>(&self, f: &mut dyn FnMut(&str, &T) -> Result<U>) -> Result<PredictorWeights<U>> {
        Ok(PredictorWeights {
            hidden: f("hidden", &self.hidden)?,
            hidden_bias: f("hidden_bias", &self.hidden_bias)?,
            gate: f("gate", &self.gate)?,
            gate_bias: f("gate_bias", &self.gate_bias)?,
        })
    }
}

pub fn init_predictor(latent_dim: usize, seed: u64) -> PredictorParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = latent_dim;
    PredictorWeights {
        hidden: uniform_matrix(&mut rng, 2 * d, d, 2 * d),
        hidden_bias: uniform_matrix(&mut rng, 1, d, 2 * d),
        gate: uniform_matrix(&mut rng, d, 1, d),
        gate_bias: uniform_matrix(&mut rng, 1, 1, d),
    }
}

/// Normalized per-edge weights, aligned with `edges_sa`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeWeightField {
    pub weights: Vec<f64>,
    pub tau: f64,
    /// Source index of each edge.
    pub groups: Vec<usize>,
}

impl EdgeWeightField {
    /// Largest `|Σ w − 1|` over non-empty groups.
    pub fn max_normalization_error(&self) -> f64 {
        let n = self.groups.iter().copied().max().map_or(0, |m| m + 1);
        let mut sums = vec![0.0; n];
        let mut seen = vec![false; n];
        for (&g, &w) in self.groups.iter().zip(&self.weights) {
            sums[g] += w;
            seen[g] = true;
        }
        sums.iter()
            .zip(&seen)
            .filter(|(_, &s)| s)
            .map(|(v, _)| (v - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Records `c(s,a) = σ(MLP([h_s ‖ h_a])) · ‖h_s − h_a‖₂` for every edge.
/// Returns `(cost, gate)` nodes, each `[edges × 1]`.
pub fn relation_cost_on_tape(
    tape: &mut Tape,
    edge_sources: &Arc<Vec<usize>>,
    edge_agents: &Arc<Vec<usize>>,
    hs: Var,
    ha: Var,
    w: &PredictorWeights<Var>,
) -> Result<(Var, Var)> {
    let hs_e = tape.gather_rows(hs, edge_sources.clone())?;
    let ha_e = tape.gather_rows(ha, edge_agents.clone())?;
    let joined = tape.concat_cols(hs_e, ha_e)?;
    let pre = tape.matmul(joined, w.hidden)?;
    let pre = tape.add_row(pre, w.hidden_bias)?;
    let hidden = tape.relu(pre)?;
    let logit = tape.matmul(hidden, w.gate)?;
    let logit = tape.add_row(logit, w.gate_bias)?;
    let gate = tape.sigmoid(logit)?;
    let dist = tape.row_l2_distance(hs_e, ha_e)?;
    Ok((tape.mul(gate, dist)?, gate))
}

/// Relation cost from precomputed embeddings.
pub fn relation_cost(
    hs: &Tensor,
    ha: &Tensor,
    edges: &[(usize, usize)],
    params: &PredictorParams,
) -> Result<Vec<f64>> {
    let sources = Arc::new(edges.iter().map(|e| e.0).collect::<Vec<_>>());
    let agents = Arc::new(edges.iter().map(|e| e.1).collect::<Vec<_>>());
    let mut tape = Tape::new();
    let hs_v = tape.constant(hs.clone())?;
    let ha_v = tape.constant(ha.clone())?;
    let w = params.try_map(&mut |_, t| Ok(tape.constant(t.clone())?))?;
    let (cost, _) = relation_cost_on_tape(&mut tape, &sources, &agents, hs_v, ha_v, &w)?;
    Ok(tape.value(cost).data().to_vec())
}

/// `w = exp(−c/τ) / Σ_group exp(−c/τ)` with per-group max subtraction.
pub fn grouped_softmax(costs: &[f64], groups: &[usize], tau: f64) -> Result<EdgeWeightField> {
    if costs.len() != groups.len() {
        return Err(Error::Model(format!(
            "{} costs but {} group labels",
            costs.len(),
            groups.len()
        )));
    }
    let n_groups = groups.iter().copied().max().map_or(0, |m| m + 1);
    let segments = Segments::new(groups.to_vec(), n_groups);
    let empty = (0..n_groups).filter(|&g| segments.group(g).is_empty()).count();
    if empty > 0 {
        warn!("{empty} empty groups skipped in grouped softmax");
    }
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::from_vec(costs.len(), 1, costs.to_vec())?)?;
    let w = tape.grouped_neg_softmax(c, Arc::new(segments), tau)?;
    Ok(EdgeWeightField {
        weights: tape.value(w).data().to_vec(),
        tau,
        groups: groups.to_vec(),
    })
}

/// Writes `source_id,agent_id,weight`.
pub fn write_weights_csv(path: &Path, graph: &HeteroGraph, field: &EdgeWeightField) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["source_id", "agent_id", "weight"])
        .map_err(|e| Error::csv(path, e))?;
    for (&(s, a), weight) in graph.edges_sa.iter().zip(&field.weights) {
        w.write_record([
            graph.source_ids[s].as_str(),
            graph.agent_ids[a].as_str(),
            &weight.to_string(),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_weights_csv(path: &Path) -> Result<HashMap<String, f64>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut out = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let w: f64 = rec
            .get(2)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::csv(path, format!("bad weight row {rec:?}")))?;
        out.insert(rec.get(1).unwrap_or("").to_string(), w);
    }
    Ok(out)
}

/// Binary PGM with one pixel per grid cell, north up, scaled so the largest
/// weight in the region is white. Cells outside the region stay black.
pub fn write_heatmap_pgm(path: &Path, cells: &[&GridCell], weights: &[f64]) -> Result<()> {
    let rows = cells.iter().map(|c| c.row + 1).max().unwrap_or(0);
    let cols = cells.iter().map(|c| c.col + 1).max().unwrap_or(0);
    let max = weights.iter().copied().fold(0.0, f64::max);
    let mut pixels = vec![0u8; rows * cols];
    for (cell, &w) in cells.iter().zip(weights) {
        let level = if max > 0.0 { (255.0 * w / max).round() as u8 } else { 0 };
        pixels[(rows - 1 - cell.row) * cols + cell.col] = level;
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write!(file, "P5\n{cols} {rows}\n255\n").map_err(|e| Error::io(path, e))?;
    file.write_all(&pixels).map_err(|e| Error::io(path, e))
}
