//! Glue between stages, shared by the command-line driver and the
//! end-to-end tests.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::allocator::{
    allocate, learned_cell_weights, partition, static_gpm_weights, uniform_weights, AllocationResult,
    AllocatorConfig, Method, WeightKind,
};
use crate::error::{Error, Result};
use crate::eval::{weight_quality, WeightQuality};
use crate::graph::HeteroGraph;
use crate::grid::GridCell;
use crate::ingest::Dataset;
use crate::model::{predict_weights, ModelParams};
use crate::predictor::{write_heatmap_pgm, EdgeWeightField};
use crate::trainer::{CategoryMapping, LossContext, TrainConfig};

/// Validates the mapping against the dataset and builds the loss.
pub fn loss_context(
    dataset: &Dataset,
    graph: &HeteroGraph,
    mapping: &CategoryMapping,
    config: &TrainConfig,
) -> Result<LossContext> {
    config.validate()?;
    mapping.validate(&dataset.indicator_names(), &dataset.landuse.class_set)?;
    LossContext::new(
        graph,
        &dataset.regions,
        &dataset.gva_categories,
        &dataset.landuse.class_set,
        mapping,
        config,
    )
}

pub struct LearnedWeights {
    pub field: EdgeWeightField,
    /// Aligned with the cell list.
    pub per_cell: Vec<f64>,
}

pub fn learned_weights(
    graph: &HeteroGraph,
    params: &ModelParams,
    tau: f64,
    cells: &[GridCell],
) -> Result<LearnedWeights> {
    let field = predict_weights(graph, params, tau)?;
    let per_cell = learned_cell_weights(graph, &field, cells)?;
    Ok(LearnedWeights { field, per_cell })
}

/// Runs `methods` in order. Learned-weight methods need `learned`.
pub fn run_methods(
    dataset: &Dataset,
    cells: &[GridCell],
    class_table: &HashMap<String, f64>,
    learned: Option<&[f64]>,
    config: &AllocatorConfig,
    methods: &[Method],
) -> Result<Vec<AllocationResult>> {
    let regions = &dataset.regions;
    let parts = partition(regions, cells, &dataset.facilities, config)?;
    let uniform = uniform_weights(regions, cells)?;
    let mut static_w = None;
    let mut out = Vec::with_capacity(methods.len());
    for &method in methods {
        let w: &[f64] = match method.weights() {
            WeightKind::Uniform => &uniform,
            WeightKind::Static => static_w.get_or_insert(static_gpm_weights(
                regions,
                cells,
                &dataset.landuse.class_set,
                class_table,
            )?),
            WeightKind::Learned => {
                learned.ok_or_else(|| Error::Allocation(format!("{method} needs learned weights")))?
            }
        };
        out.push(allocate(method, regions, &dataset.facilities, &parts, w)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionWeightQuality {
    pub region_id: String,
    pub split: String,
    pub quality: WeightQuality,
}

/// Rank agreement of predicted and planted weights, region by region.
pub fn weight_quality_by_region(
    dataset: &Dataset,
    cells: &[GridCell],
    predicted: &[f64],
    planted: &HashMap<String, f64>,
) -> Result<Vec<RegionWeightQuality>> {
    dataset
        .regions
        .iter()
        .map(|r| {
            let mut p = Vec::new();
            let mut t = Vec::new();
            for (c, &w) in cells.iter().zip(predicted) {
                if c.region_id != r.id {
                    continue;
                }
                p.push(w);
                t.push(*planted.get(&c.id).ok_or_else(|| {
                    Error::Load(format!("no planted weight for cell {}", c.id))
                })?);
            }
            Ok(RegionWeightQuality {
                region_id: r.id.clone(),
                split: r.split.as_str().to_string(),
                quality: weight_quality(&p, &t)?,
            })
        })
        .collect()
}

pub fn write_weight_quality(path: &Path, rows: &[RegionWeightQuality]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["region_id", "split", "spearman", "top_decile_overlap"])
        .map_err(|e| Error::csv(path, e))?;
    for r in rows {
        let rho = r.quality.spearman.map_or("NA".to_string(), |v| format!("{v:.6}"));
        w.write_record([
            r.region_id.as_str(),
            r.split.as_str(),
            &rho,
            &format!("{:.6}", r.quality.top_decile_overlap),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One `<region>.pgm` per region under `dir`.
pub fn write_heatmaps(dir: &Path, dataset: &Dataset, cells: &[GridCell], weights: &[f64]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for r in &dataset.regions {
        let (rc, rw): (Vec<&GridCell>, Vec<f64>) = cells
            .iter()
            .zip(weights)
            .filter(|(c, _)| c.region_id == r.id)
            .map(|(c, &w)| (c, w))
            .unzip();
        let path = dir.join(format!("{}.pgm", sanitize(&r.id)));
        write_heatmap_pgm(&path, &rc, &rw)?;
        written.push(path);
    }
    Ok(written)
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}
