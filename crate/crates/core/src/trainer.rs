//! Self-supervised training: regional indicator shares are the target, the
//! weighted dominant land-use mix of each region's cells is the
//! reconstruction, and the summed KL divergence between them is the loss.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::encoder::{EncoderConfig, GraphContext};
use crate::error::{Error, Result};
use crate::graph::HeteroGraph;
use crate::grid::argmax_first;
use crate::ingest::{Region, Split};
use crate::model::{forward_on_tape, init_model, Model, ModelParams};
use crate::predictor::EdgeWeightField;

/// Ordered `(indicator component, land-use class)` pairs. Classes that no
/// pair mentions share one residual bucket, placed last, whose target mass
/// is always zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMapping {
    pub pairs: Vec<(String, String)>,
}

impl Default for CategoryMapping {
    fn default() -> Self {
        let pairs = [
            ("population", "residential"),
            ("gva_industry", "industrial"),
            ("gva_commerce", "commercial"),
            ("gva_agriculture", "agricultural"),
        ];
        Self {
            pairs: pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
        }
    }
}

impl CategoryMapping {
    /// Number of target components, residual bucket included.
    pub fn n_buckets(&self) -> usize {
        self.pairs.len() + 1
    }

    pub fn residual_bucket(&self) -> usize {
        self.pairs.len()
    }

    pub fn bucket_names(&self) -> Vec<String> {
        self.pairs
            .iter()
            .map(|p| p.1.clone())
            .chain(std::iter::once("residual".to_string()))
            .collect()
    }

    /// Checks that every pair names a known indicator and class and that no
    /// class or indicator is used twice.
    pub fn validate(&self, indicator_names: &[String], class_set: &[String]) -> Result<()> {
        let mut used_ind = std::collections::HashSet::new();
        let mut used_cls = std::collections::HashSet::new();
        for (ind, cls) in &self.pairs {
            if !indicator_names.contains(ind) {
                return Err(Error::Config(format!(
                    "mapping names indicator {ind}, available: {}",
                    indicator_names.join(", ")
                )));
            }
            if !class_set.contains(cls) {
                return Err(Error::Config(format!(
                    "mapping names land-use class {cls}, available: {}",
                    class_set.join(", ")
                )));
            }
            if !used_ind.insert(ind) || !used_cls.insert(cls) {
                return Err(Error::Config(format!("mapping pair ({ind}, {cls}) reuses a name")));
            }
        }
        Ok(())
    }

    /// Bucket of every land-use class.
    pub fn class_buckets(&self, class_set: &[String]) -> Vec<usize> {
        class_set
            .iter()
            .map(|c| {
                self.pairs
                    .iter()
                    .position(|p| &p.1 == c)
                    .unwrap_or(self.residual_bucket())
            })
            .collect()
    }
}

fn indicator_value(region: &Region, gva_categories: &[String], name: &str) -> Option<f64> {
    if name == "population" {
        return Some(region.population);
    }
    let cat = name.strip_prefix("gva_")?;
    let i = gva_categories.iter().position(|c| c == cat)?;
    region.gva.get(i).copied()
}

/// Target distribution per region, `None` for regions whose mapped
/// indicators are all zero (they are left out of the loss).
pub fn build_targets(
    regions: &[Region],
    gva_categories: &[String],
    mapping: &CategoryMapping,
) -> Result<Vec<Option<Vec<f64>>>> {
    regions
        .iter()
        .map(|r| {
            let mut p = Vec::with_capacity(mapping.n_buckets());
            for (ind, _) in &mapping.pairs {
                let v = indicator_value(r, gva_categories, ind).ok_or_else(|| {
                    Error::Config(format!("region {} has no indicator {ind}", r.id))
                })?;
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(Error::Load(format!("region {}: indicator {ind} = {v}", r.id)));
                }
                p.push(v);
            }
            let total: f64 = p.iter().sum();
            if total <= 0.0 {
                warn!("region {} has zero mapped indicators; excluded from the loss", r.id);
                return Ok(None);
            }
            p.iter_mut().for_each(|v| *v /= total);
            p.push(0.0);
            Ok(Some(p))
        })
        .collect()
}

/// Dominant class of every agent, read from the one-hot half of its features.
pub fn agent_classes(graph: &HeteroGraph) -> Vec<usize> {
    let k = graph.agent_features.cols() / 2;
    (0..graph.n_agents())
        .map(|a| argmax_first(&graph.agent_features.row(a)[k..]))
        .collect()
}

/// `[edges × buckets]` one-hot of the bucket each edge's agent falls in.
pub fn edge_bucket_matrix(graph: &HeteroGraph, class_buckets: &[usize], n_buckets: usize) -> Tensor {
    let classes = agent_classes(graph);
    let mut t = Tensor::zeros(graph.n_edges(), n_buckets);
    for (e, &(_, a)) in graph.edges_sa.iter().enumerate() {
        t.set(e, class_buckets[classes[a]], 1.0);
    }
    t
}

/// `P̂_s[k] = Σ_{a ∈ N(s)} w_sa · T_a[k]`, one row per source.
pub fn reconstruct(field: &EdgeWeightField, edge_buckets: &Tensor, n_sources: usize) -> Vec<Vec<f64>> {
    let k = edge_buckets.cols();
    let mut out = vec![vec![0.0; k]; n_sources];
    for (e, (&s, &w)) in field.groups.iter().zip(&field.weights).enumerate() {
        for (acc, &t) in out[s].iter_mut().zip(edge_buckets.row(e)) {
            *acc += w * t;
        }
    }
    out
}

/// `Σ_s KL(P_s ‖ P̂′_s)` with `P̂′ = (P̂ + ε)/(1 + Kε)`.
pub fn kl_loss(targets: &[Vec<f64>], recon: &[Vec<f64>], eps: f64) -> f64 {
    let mut total = 0.0;
    for (p, q) in targets.iter().zip(recon) {
        let norm = 1.0 + q.len() as f64 * eps;
        for (&pk, &qk) in p.iter().zip(q) {
            if pk > 0.0 {
                total += pk * (pk / ((qk + eps) / norm)).ln();
            }
        }
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub tau: f64,
    pub latent_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub epsilon_smooth: f64,
    /// Stop after this many epochs without improvement; 0 disables.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            tau: 0.5,
            latent_dim: 64,
            heads: 4,
            layers: 2,
            epsilon_smooth: 1e-8,
            patience: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("tau", self.tau),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.epsilon_smooth >= 0.0) {
            return Err(Error::Config("epsilon_smooth must be >= 0".into()));
        }
        Ok(())
    }

    pub fn encoder_config(&self, graph: &HeteroGraph) -> EncoderConfig {
        EncoderConfig {
            source_dim: graph.source_features.cols(),
            agent_dim: graph.agent_features.cols(),
            latent_dim: self.latent_dim,
            heads: self.heads,
            layers: self.layers,
        }
    }
}

/// Everything the loss needs besides the parameters.
pub struct LossContext {
    pub graph: GraphContext,
    pub edge_buckets: Tensor,
    /// Sources that enter the loss, ascending.
    pub included: Arc<Vec<usize>>,
    /// Target rows aligned with `included`.
    pub targets: Tensor,
    pub eps: f64,
    pub tau: f64,
}

impl LossContext {
    /// Loss over the training regions of `graph`. Regions are matched to
    /// sources by id.
    pub fn new(
        graph: &HeteroGraph,
        regions: &[Region],
        gva_categories: &[String],
        class_set: &[String],
        mapping: &CategoryMapping,
        config: &TrainConfig,
    ) -> Result<Self> {
        let targets = build_targets(regions, gva_categories, mapping)?;
        let isolated = graph.isolated_sources();
        let mut included = Vec::new();
        let mut rows = Vec::new();
        for (s, id) in graph.source_ids.iter().enumerate() {
            let r = regions
                .iter()
                .position(|r| &r.id == id)
                .ok_or_else(|| Error::Graph(format!("graph source {id} is not a known region")))?;
            if regions[r].split != Split::Train || isolated.contains(&s) {
                continue;
            }
            if let Some(p) = &targets[r] {
                included.push(s);
                rows.push(p.clone());
            }
        }
        if included.is_empty() {
            return Err(Error::Model("no training region contributes to the loss".into()));
        }
        let class_buckets = mapping.class_buckets(class_set);
        if class_buckets.len() * 2 != graph.agent_features.cols() {
            return Err(Error::Graph(format!(
                "graph agents carry {} features, expected 2 x {} classes",
                graph.agent_features.cols(),
                class_set.len()
            )));
        }
        // sources never exchange messages, so the loss only needs the
        // training sources and their cells
        let graph = &graph.subgraph(&included)?;
        let included: Vec<usize> = (0..included.len()).collect();
        Ok(Self {
            graph: GraphContext::new(graph),
            edge_buckets: edge_bucket_matrix(graph, &class_buckets, mapping.n_buckets()),
            included: Arc::new(included),
            targets: Tensor::from_rows(&rows)?,
            eps: config.epsilon_smooth,
            tau: config.tau,
        })
    }

    /// Records forward pass and loss; returns the loss node.
    pub fn record(&self, tape: &mut Tape, vars: &Model<Var>) -> Result<Var> {
        let fwd = forward_on_tape(tape, &self.graph, vars, self.tau)?;
        let t = tape.constant(self.edge_buckets.clone())?;
        let weighted = tape.mul_col(fwd.weights, t)?;
        let recon = tape.scatter_add_rows(weighted, self.graph.edge_sources.clone(), self.graph.n_sources())?;
        let recon = tape.gather_rows(recon, self.included.clone())?;
        Ok(tape.kl_div(self.targets.clone(), recon, self.eps)?)
    }

    pub fn loss(&self, params: &ModelParams) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = params.try_map(&mut |_, t| Ok(tape.constant(t.clone())?))?;
        let loss = self.record(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    }

    pub fn loss_and_grad(&self, params: &ModelParams) -> Result<(f64, ModelParams)> {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape)?;
        let loss = self.record(&mut tape, &vars)?;
        let value = tape.value(loss).item();
        let mut grads: Gradients = tape.backward(loss)?;
        let g = vars.try_map(&mut |name, &v| {
            grads
                .take(v)
                .ok_or_else(|| Error::Model(format!("no gradient for {name}")))
        })?;
        Ok((value, g))
    }
}

enum Optimizer {
    Sgd,
    Adam {
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
        t: i32,
    },
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    fn new(kind: OptimizerKind, params: &ModelParams) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => {
                let mut zeros = Vec::new();
                params.visit(&mut |_, t| zeros.push(vec![0.0; t.len()]));
                Optimizer::Adam {
                    m: zeros.clone(),
                    v: zeros,
                    t: 0,
                }
            }
        }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) {
        let mut g = Vec::new();
        grads.visit(&mut |_, t| g.push(t.data()));
        let mut i = 0;
        match self {
            Optimizer::Sgd => params.visit_mut(&mut |_, p| {
                for (x, d) in p.data_mut().iter_mut().zip(g[i]) {
                    *x -= lr * d;
                }
                i += 1;
            }),
            Optimizer::Adam { m, v, t } => {
                *t += 1;
                let c1 = 1.0 - BETA1.powi(*t);
                let c2 = 1.0 - BETA2.powi(*t);
                params.visit_mut(&mut |_, p| {
                    let it = p.data_mut().iter_mut().zip(&mut m[i]).zip(&mut v[i]).zip(g[i]);
                    for (((x, m), v), &d) in it {
                        *m = BETA1 * *m + (1.0 - BETA1) * d;
                        *v = BETA2 * *v + (1.0 - BETA2) * d * d;
                        *x -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                    }
                    i += 1;
                });
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest observed loss.
    pub params: ModelParams,
    /// Loss before each epoch's update.
    pub trace: Vec<f64>,
    pub best_loss: f64,
    /// Loss of the parameters after the last update.
    pub final_loss: f64,
}

/// Full-batch training from `config.seed`.
pub fn train(ctx: &LossContext, encoder: &EncoderConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let params = init_model(encoder, config.seed)?;
    train_from(ctx, params, config)
}

pub fn train_from(ctx: &LossContext, mut params: ModelParams, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut opt = Optimizer::new(config.optimizer, &params);
    let mut trace = Vec::with_capacity(config.epochs);
    let mut best = params.clone();
    let mut best_loss = f64::INFINITY;
    let mut since_best = 0;
    for epoch in 0..config.epochs {
        let (loss, grads) = ctx.loss_and_grad(&params).map_err(|e| match e {
            Error::Autodiff(_) => Error::Diverged {
                epoch,
                loss: f64::NAN,
            },
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        trace.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if config.patience > 0 && since_best >= config.patience {
                info!("early stop at epoch {epoch}, best loss {best_loss:.6e}");
                break;
            }
        }
        if epoch % 50 == 0 {
            debug!("epoch {epoch}: loss {loss:.6e}");
        }
        opt.step(&mut params, &grads, config.learning_rate);
    }
    let final_loss = if trace.is_empty() {
        ctx.loss(&params)?
    } else {
        match ctx.loss(&params) {
            Ok(l) if l.is_finite() => l,
            _ => {
                return Err(Error::Diverged {
                    epoch: trace.len(),
                    loss: f64::NAN,
                })
            }
        }
    };
    if final_loss < best_loss {
        best_loss = final_loss;
        best = params;
    }
    Ok(TrainOutcome {
        params: best,
        trace,
        best_loss,
        final_loss,
    })
}

pub fn write_loss_trace(path: &Path, trace: &[f64]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    writeln!(f, "epoch,loss").map_err(|e| Error::io(path, e))?;
    for (i, l) in trace.iter().enumerate() {
        writeln!(f, "{i},{l}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}
