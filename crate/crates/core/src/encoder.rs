//! Heterogeneous attention encoder.
//!
//! Node features of each type are first projected into a shared latent space.
//! Every layer then runs relation-specific multi-head attention for both edge
//! directions (source→agent, agent→source), each reading the previous layer's
//! activations, followed by an output projection and a per-type feed-forward
//! update added back onto the residual stream:
//!
//! ```text
//! msg_t = W_o · attn(Q = H_t W_q, K = H_u W_k, V = H_u W_v)
//! H_t'  = H_t + γ_t · tanh(msg_t · W_ff,t)
//! ```
//!
//! A node without neighbours receives a zero message and therefore keeps its
//! projected features unchanged.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttentionEdges, Segments, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::HeteroGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub source_dim: usize,
    pub agent_dim: usize,
    pub latent_dim: usize,
    pub heads: usize,
    pub layers: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.heads == 0 {
            return Err(Error::Model("latent dimension and head count must be positive".into()));
        }
        if self.latent_dim % self.heads != 0 {
            return Err(Error::Model(format!(
                "latent dimension {} is not divisible by {} heads",
                self.latent_dim, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::Model("at least one attention layer is required".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.latent_dim / self.heads
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationWeights<T> {
    pub query: T,
    pub key: T,
    pub value: T,
    pub output: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights<T> {
    /// Messages from sources into agents.
    pub source_to_agent: RelationWeights<T>,
    /// Messages from agents into sources.
    pub agent_to_source: RelationWeights<T>,
    pub ff_source: T,
    pub ff_agent: T,
    pub scale_source: T,
    pub scale_agent: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderWeights<T> {
    pub heads: usize,
    pub proj_source: T,
    pub proj_agent: T,
    pub layers: Vec<LayerWeights<T>>,
}

pub type EncoderParams = EncoderWeights<Tensor>;

impl<T> RelationWeights<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}.query"), &self.query);
        f(format!("{prefix}.key"), &self.key);
        f(format!("{prefix}.value"), &self.value);
        f(format!("{prefix}.output"), &self.output);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        f(format!("{prefix}.query"), &mut self.query);
        f(format!("{prefix}.key"), &mut self.key);
        f(format!("{prefix}.value"), &mut self.value);
        f(format!("{prefix}.output"), &mut self.output);
    }

    fn try_map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> Result<U>) -> Result<RelationWeights<U>> {
        Ok(RelationWeights {
            query: f(&format!("{prefix}.query"), &self.query)?,
            key: f(&format!("{prefix}.key"), &self.key)?,
            value: f(&format!("{prefix}.value"), &self.value)?,
            output: f(&format!("{prefix}.output"), &self.output)?,
        })
    }
}

impl<T> EncoderWeights<T> {
    /// Visits every weight with a stable dotted name, in a fixed order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        f("proj_source".into(), &self.proj_source);
        f("proj_agent".into(), &self.proj_agent);
        for (i, l) in self.layers.iter().enumerate() {
            l.source_to_agent.visit(&format!("layer{i}.source_to_agent"), f);
            l.agent_to_source.visit(&format!("layer{i}.agent_to_source"), f);
            f(format!("layer{i}.ff_source"), &l.ff_source);
            f(format!("layer{i}.ff_agent"), &l.ff_agent);
            f(format!("layer{i}.scale_source"), &l.scale_source);
            f(format!("layer{i}.scale_agent"), &l.scale_agent);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut T)) {
        f("proj_source".into(), &mut self.proj_source);
        f("proj_agent".into(), &mut self.proj_agent);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.source_to_agent.visit_mut(&format!("layer{i}.source_to_agent"), f);
            l.agent_to_source.visit_mut(&format!("layer{i}.agent_to_source"), f);
            f(format!("layer{i}.ff_source"), &mut l.ff_source);
            f(format!("layer{i}.ff_agent"), &mut l.ff_agent);
            f(format!("layer{i}.scale_source"), &mut l.scale_source);
            f(format!("layer{i}.scale_agent"), &mut l.scale_agent);
        }
    }

    pub fn try_map<U>(&self, f: &mut dyn FnMut(&str, &T) -> Result<U>) -> Result<EncoderWeights<U>> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            layers.push(LayerWeights {
                source_to_agent: l.source_to_agent.try_map(&format!("layer{i}.source_to_agent"), f)?,
                agent_to_source: l.agent_to_source.try_map(&format!("layer{i}.agent_to_source"), f)?,
                ff_source: f(&format!("layer{i}.ff_source"), &l.ff_source)?,
                ff_agent: f(&format!("layer{i}.ff_agent"), &l.ff_agent)?,
                scale_source: f(&format!("layer{i}.scale_source"), &l.scale_source)?,
                scale_agent: f(&format!("layer{i}.scale_agent"), &l.scale_agent)?,
            });
        }
        Ok(EncoderWeights {
            heads: self.heads,
            proj_source: f("proj_source", &self.proj_source)?,
            proj_agent: f("proj_agent", &self.proj_agent)?,
            layers,
        })
    }
}

impl EncoderParams {
    pub fn config(&self) -> EncoderConfig {
        EncoderConfig {
            source_dim: self.proj_source.rows(),
            agent_dim: self.proj_agent.rows(),
            latent_dim: self.proj_source.cols(),
            heads: self.heads,
            layers: self.layers.len(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.proj_source.cols() / self.heads
    }

    /// Same shapes, every entry zero.
    pub fn zeros_like(&self) -> EncoderParams {
        self.try_map(&mut |_, t| Ok(Tensor::zeros(t.rows(), t.cols())))
            .expect("infallible")
    }
}

pub(crate) fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::from_vec(rows, cols, data).expect("shape")
}

/// Uniform initialization in ±1/√fan_in, reproducible from `seed`. Residual
/// scales start at 1.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.latent_dim;
    let proj_source = uniform_matrix(&mut rng, config.source_dim, d, config.source_dim);
    let proj_agent = uniform_matrix(&mut rng, config.agent_dim, d, config.agent_dim);
    let relation = |rng: &mut ChaCha8Rng| RelationWeights {
        query: uniform_matrix(rng, d, d, d),
        key: uniform_matrix(rng, d, d, d),
        value: uniform_matrix(rng, d, d, d),
        output: uniform_matrix(rng, d, d, d),
    };
    let layers = (0..config.layers)
        .map(|_| LayerWeights {
            source_to_agent: relation(&mut rng),
            agent_to_source: relation(&mut rng),
            ff_source: uniform_matrix(&mut rng, d, d, d),
            ff_agent: uniform_matrix(&mut rng, d, d, d),
            scale_source: Tensor::scalar(1.0),
            scale_agent: Tensor::scalar(1.0),
        })
        .collect();
    Ok(EncoderWeights {
        heads: config.heads,
        proj_source,
        proj_agent,
        layers,
    })
}

/// Graph structure prepared once for repeated forward passes.
#[derive(Debug, Clone)]
pub struct GraphContext {
    pub source_features: Tensor,
    pub agent_features: Tensor,
    /// Edge `e` connects `edge_sources[e]` and `edge_agents[e]`.
    pub edge_sources: Arc<Vec<usize>>,
    pub edge_agents: Arc<Vec<usize>>,
    /// Edges grouped by source node.
    pub by_source: Arc<Segments>,
    sa_edges: Arc<AttentionEdges>,
    as_edges: Arc<AttentionEdges>,
}

impl GraphContext {
    pub fn new(graph: &HeteroGraph) -> Self {
        Self {
            source_features: graph.source_features.clone(),
            agent_features: graph.agent_features.clone(),
            edge_sources: Arc::new(graph.edge_sources()),
            edge_agents: Arc::new(graph.edge_agents()),
            by_source: Arc::new(graph.source_segments()),
            sa_edges: Arc::new(AttentionEdges::new(&graph.edges_sa, graph.n_agents())),
            as_edges: Arc::new(AttentionEdges::new(&graph.edges_as, graph.n_sources())),
        }
    }

    pub fn n_sources(&self) -> usize {
        self.source_features.rows()
    }

    pub fn n_agents(&self) -> usize {
        self.agent_features.rows()
    }

    pub fn n_edges(&self) -> usize {
        self.edge_sources.len()
    }
}

/// Per-layer attention nodes, kept so callers can inspect coefficients.
#[derive(Debug, Clone)]
pub struct EncodedNodes {
    pub sources: Var,
    pub agents: Var,
    pub attention: Vec<(Var, Var)>,
}

fn relation_message(
    tape: &mut Tape,
    target: Var,
    other: Var,
    w: &RelationWeights<Var>,
    edges: Arc<AttentionEdges>,
    heads: usize,
) -> Result<(Var, Var)> {
    let q = tape.matmul(target, w.query)?;
    let k = tape.matmul(other, w.key)?;
    let v = tape.matmul(other, w.value)?;
    let attn = tape.edge_attention(q, k, v, edges, heads)?;
    Ok((tape.matmul(attn, w.output)?, attn))
}

fn residual_update(tape: &mut Tape, h: Var, msg: Var, ff: Var, scale: Var) -> Result<Var> {
    let pre = tape.matmul(msg, ff)?;
    let act = tape.tanh(pre)?;
    let scaled = tape.mul_scalar(act, scale)?;
    Ok(tape.add(h, scaled)?)
}

/// Records the encoder forward pass on `tape`.
pub fn encode_on_tape(tape: &mut Tape, ctx: &GraphContext, w: &EncoderWeights<Var>) -> Result<EncodedNodes> {
    let (xs_shape, xa_shape) = (ctx.source_features.shape(), ctx.agent_features.shape());
    let (ps, pa) = (tape.value(w.proj_source).shape(), tape.value(w.proj_agent).shape());
    if xs_shape.1 != ps.0 || xa_shape.1 != pa.0 {
        return Err(Error::Model(format!(
            "feature widths ({}, {}) do not match projections ({}, {})",
            xs_shape.1, xa_shape.1, ps.0, pa.0
        )));
    }
    let xs = tape.constant(ctx.source_features.clone())?;
    let xa = tape.constant(ctx.agent_features.clone())?;
    let mut hs = tape.matmul(xs, w.proj_source)?;
    let mut ha = tape.matmul(xa, w.proj_agent)?;
    let mut attention = Vec::with_capacity(w.layers.len());
    for layer in &w.layers {
        let (msg_a, att_a) =
            relation_message(tape, ha, hs, &layer.source_to_agent, ctx.sa_edges.clone(), w.heads)?;
        let (msg_s, att_s) =
            relation_message(tape, hs, ha, &layer.agent_to_source, ctx.as_edges.clone(), w.heads)?;
        let next_a = residual_update(tape, ha, msg_a, layer.ff_agent, layer.scale_agent)?;
        let next_s = residual_update(tape, hs, msg_s, layer.ff_source, layer.scale_source)?;
        ha = next_a;
        hs = next_s;
        attention.push((att_a, att_s));
    }
    Ok(EncodedNodes {
        sources: hs,
        agents: ha,
        attention,
    })
}

/// Registers parameters on `tape` as trainable leaves.
pub fn register(tape: &mut Tape, params: &EncoderParams) -> Result<EncoderWeights<Var>> {
    params.try_map(&mut |_, t| Ok(tape.param(t.clone())?))
}

/// Embeddings `(H_s, H_a)` for a graph.
pub fn encode(graph: &HeteroGraph, params: &EncoderParams) -> Result<(Tensor, Tensor)> {
    let ctx = GraphContext::new(graph);
    let mut tape = Tape::new();
    let vars = register(&mut tape, params)?;
    let out = encode_on_tape(&mut tape, &ctx, &vars)?;
    Ok((tape.value(out.sources).clone(), tape.value(out.agents).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(d: usize, h: usize, l: usize) -> EncoderConfig {
        EncoderConfig {
            source_dim: 3,
            agent_dim: 4,
            latent_dim: d,
            heads: h,
            layers: l,
        }
    }

    #[test]
    fn init_is_reproducible_and_bounded() {
        let a = init_params(&config(8, 2, 2), 11).unwrap();
        let b = init_params(&config(8, 2, 2), 11).unwrap();
        assert_eq!(a, b);
        let c = init_params(&config(8, 2, 2), 12).unwrap();
        assert_ne!(a, c);
        let bound = 1.0 / 8f64.sqrt();
        assert!(a.layers[0].source_to_agent.query.data().iter().all(|v| v.abs() <= bound));
        let bound_s = 1.0 / 3f64.sqrt();
        assert!(a.proj_source.data().iter().all(|v| v.abs() <= bound_s));
    }

    #[test]
    fn head_dimension_and_divisibility() {
        assert_eq!(config(64, 4, 2).head_dim(), 16);
        assert!(init_params(&config(63, 4, 2), 0).is_err());
        assert!(init_params(&config(64, 4, 0), 0).is_err());
    }

    #[test]
    fn names_are_unique() {
        let p = init_params(&config(8, 2, 2), 1).unwrap();
        let mut names = Vec::new();
        p.visit(&mut |n, _| names.push(n));
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(names.len(), sorted.len());
        assert_eq!(names.len(), 2 + 2 * 12);
    }
}
