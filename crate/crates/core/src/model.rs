//! Encoder and weight predictor bundled as one trainable model, plus the
//! versioned JSON checkpoint format.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::encoder::{encode_on_tape, init_params, EncodedNodes, EncoderConfig, EncoderWeights, GraphContext};
use crate::error::{Error, Result};
use crate::graph::HeteroGraph;
use crate::predictor::{init_predictor, relation_cost_on_tape, EdgeWeightField, PredictorWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model<T> {
    pub encoder: EncoderWeights<T>,
    pub predictor: PredictorWeights<T>,
}

pub type ModelParams = Model<Tensor>;

impl<T> Model<T> {
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        self.encoder.visit(&mut |n, t| f(format!("encoder.{n}"), t));
        self.predictor.visit(&mut |n, t| f(format!("predictor.{n}"), t));
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut T)) {
        self.encoder.visit_mut(&mut |n, t| f(format!("encoder.{n}"), t));
        self.predictor.visit_mut(&mut |n, t| f(format!("predictor.{n}"), t));
    }

    pub fn try_map<U>(&self, f: &mut dyn FnMut(&str, &T) -> Result<U>) -> Result<Model<U>> {
        Ok(Model {
            encoder: self.encoder.try_map(&mut |n, t| f(&format!("encoder.{n}"), t))?,
            predictor: self.predictor.try_map(&mut |n, t| f(&format!("predictor.{n}"), t))?,
        })
    }
}

impl ModelParams {
    pub fn config(&self) -> EncoderConfig {
        self.encoder.config()
    }

    pub fn n_scalars(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    pub fn register(&self, tape: &mut Tape) -> Result<Model<Var>> {
        self.try_map(&mut |_, t| Ok(tape.param(t.clone())?))
    }
}

pub fn init_model(config: &EncoderConfig, seed: u64) -> Result<ModelParams> {
    Ok(Model {
        encoder: init_params(config, seed)?,
        predictor: init_predictor(config.latent_dim, seed ^ 0x9E37_79B9_7F4A_7C15),
    })
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub encoded: EncodedNodes,
    pub cost: Var,
    pub gate: Var,
    /// `[edges × 1]` normalized weights.
    pub weights: Var,
}

/// Encoder → relation cost → grouped softmax, all recorded on `tape`.
pub fn forward_on_tape(tape: &mut Tape, ctx: &GraphContext, vars: &Model<Var>, tau: f64) -> Result<Forward> {
    let encoded = encode_on_tape(tape, ctx, &vars.encoder)?;
    let (cost, gate) = relation_cost_on_tape(
        tape,
        &ctx.edge_sources,
        &ctx.edge_agents,
        encoded.sources,
        encoded.agents,
        &vars.predictor,
    )?;
    let weights = tape.grouped_neg_softmax(cost, ctx.by_source.clone(), tau)?;
    Ok(Forward {
        encoded,
        cost,
        gate,
        weights,
    })
}

pub fn predict_weights(graph: &HeteroGraph, params: &ModelParams, tau: f64) -> Result<EdgeWeightField> {
    let ctx = GraphContext::new(graph);
    let mut tape = Tape::new();
    let vars = params.try_map(&mut |_, t| Ok(tape.constant(t.clone())?))?;
    let fwd = forward_on_tape(&mut tape, &ctx, &vars, tau)?;
    Ok(EdgeWeightField {
        weights: tape.value(fwd.weights).data().to_vec(),
        tau,
        groups: ctx.edge_sources.to_vec(),
    })
}

const CHECKPOINT_FORMAT: &str = "gridalloc-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    seed: u64,
    config: EncoderConfig,
    tensors: Vec<NamedTensor>,
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, seed: u64) -> Result<()> {
    let mut tensors = Vec::new();
    params.visit(&mut |name, t| {
        tensors.push(NamedTensor {
            name,
            shape: [t.rows(), t.cols()],
            data: t.data().to_vec(),
        })
    });
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        seed,
        config: params.config(),
        tensors,
    };
    let text = serde_json::to_string(&file)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint, refusing it when its shape manifest disagrees with
/// `expected` (when given) or with itself.
pub fn load_checkpoint(path: &Path, expected: Option<&EncoderConfig>) -> Result<(ModelParams, u64)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    let refuse = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
        return Err(refuse(format!(
            "unsupported format {} v{}",
            file.format, file.version
        )));
    }
    if let Some(cfg) = expected {
        if *cfg != file.config {
            return Err(refuse(format!(
                "checkpoint was trained with {:?}, but the current graph and configuration need {:?}",
                file.config, cfg
            )));
        }
    }
    file.config.validate()?;
    let mut by_name: HashMap<String, NamedTensor> =
        file.tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
    let template = init_model(&file.config, 0)?;
    let params = template.try_map(&mut |name, t| {
        let stored = by_name
            .remove(name)
            .ok_or_else(|| refuse(format!("missing tensor {name}")))?;
        if stored.shape != [t.rows(), t.cols()] {
            return Err(refuse(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                stored.shape,
                [t.rows(), t.cols()]
            )));
        }
        Tensor::from_vec(stored.shape[0], stored.shape[1], stored.data)
            .map_err(|e| refuse(format!("tensor {name}: {e}")))
    })?;
    if let Some(extra) = by_name.keys().next() {
        return Err(refuse(format!("unexpected tensor {extra}")));
    }
    if !params.encoder.proj_source.is_finite() {
        return Err(refuse("non-finite weights".into()));
    }
    Ok((params, file.seed))
}
