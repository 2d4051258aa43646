//! Pipeline stages. Each stage reads its inputs from files and writes its
//! outputs to the output directory, so a full run is exactly the stages
//! run back to back.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gridalloc::allocator::{read_allocations, read_class_table, write_allocations, AllocatorConfig, Method};
use gridalloc::eval::{comparison_rows, format_comparison_table, write_comparison_csv, write_comparison_txt};
use gridalloc::graph::{build_graph, read_graph, write_graph, HeteroGraph};
use gridalloc::grid::{generate_grids, read_cells, write_cells, GridCell};
use gridalloc::ingest::{load_dataset, Dataset, DatasetPaths};
use gridalloc::model::{load_checkpoint, save_checkpoint};
use gridalloc::pipeline::{learned_weights, loss_context, run_methods, weight_quality_by_region, write_heatmaps, write_weight_quality};
use gridalloc::predictor::{read_weights_csv, write_weights_csv};
use gridalloc::synth::{generate_synthetic, read_planted_weights, write_scenario};
use gridalloc::trainer::{train, write_loss_trace};
use log::info;

use crate::config::{ResolvedInputs, RunConfig};
use crate::manifest::stage_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Ingest,
    BuildGraph,
    Train,
    Allocate,
    Evaluate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::BuildGraph => "build-graph",
            Stage::Train => "train",
            Stage::Allocate => "allocate",
            Stage::Evaluate => "evaluate",
        }
    }
}

pub const CELLS: &str = "cells.json";
pub const GRAPH: &str = "graph.json";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const LOSS_TRACE: &str = "loss_trace.csv";
pub const WEIGHTS: &str = "weights.csv";
pub const HEATMAPS: &str = "heatmaps";
pub const ALLOCATIONS: &str = "allocations.csv";
pub const COMPARISON_CSV: &str = "comparison.csv";
pub const COMPARISON_TXT: &str = "comparison.txt";
pub const WEIGHT_QUALITY: &str = "weight_quality.csv";

pub struct Run {
    pub cfg: RunConfig,
    pub inputs: ResolvedInputs,
}

impl Run {
    pub fn new(cfg: RunConfig) -> Self {
        let inputs = cfg.inputs();
        Self { cfg, inputs }
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join(name)
    }

    fn dataset(&self) -> Result<Dataset> {
        let i = &self.inputs;
        Ok(load_dataset(&DatasetPaths {
            regions: &i.regions,
            landuse: &i.landuse,
            indicators: &i.indicators,
            facilities: &i.facilities,
        })?)
    }

    fn cells(&self, dataset: &Dataset) -> Result<Vec<GridCell>> {
        Ok(read_cells(&self.out(CELLS), &dataset.landuse.class_set, &self.cfg.grid_config())?)
    }

    fn graph(&self, dataset: &Dataset, cells: &[GridCell]) -> Result<HeteroGraph> {
        let path = self.out(GRAPH);
        let (graph, _) = read_graph(&path)?;
        let regions: Vec<&str> = dataset.regions.iter().map(|r| r.id.as_str()).collect();
        let agents: Vec<&str> = cells.iter().map(|c| c.id.as_str()).collect();
        if graph.source_ids != regions || graph.agent_ids != agents {
            bail!(
                "{} does not match the current regions and cells; rerun build-graph",
                path.display()
            );
        }
        Ok(graph)
    }

    /// Runs one stage and returns the files it wrote.
    pub fn stage(&self, stage: Stage) -> Result<Vec<PathBuf>> {
        match stage {
            Stage::Synth => self.synth(),
            Stage::Ingest => self.ingest(),
            Stage::BuildGraph => self.build_graph(),
            Stage::Train => self.train(),
            Stage::Allocate => self.allocate(),
            Stage::Evaluate => self.evaluate(),
        }
    }

    fn synth(&self) -> Result<Vec<PathBuf>> {
        let Some(sc) = &self.cfg.synth else {
            bail!("the configuration has no [synth] section");
        };
        let scenario = generate_synthetic(sc, stage_seed(self.cfg.seed, "synth"))?;
        let files = write_scenario(&self.cfg.synth_dir(), &scenario)?;
        info!(
            "synthetic scenario: {} regions, {} facilities",
            scenario.regions.len(),
            scenario.facilities.len()
        );
        Ok(vec![
            files.regions,
            files.landuse,
            files.indicators,
            files.facilities,
            files.planted_weights,
            files.class_table,
        ])
    }

    fn ingest(&self) -> Result<Vec<PathBuf>> {
        let ds = self.dataset()?;
        let grid = self.cfg.grid_config();
        let cells = generate_grids(&ds.regions, &ds.landuse, &grid)?;
        let path = self.out(CELLS);
        write_cells(&path, &ds.landuse.class_set, &grid, &cells)?;
        info!(
            "{} regions, {} facilities, {} land-use classes, {} cells",
            ds.regions.len(),
            ds.facilities.len(),
            ds.landuse.class_set.len(),
            cells.len()
        );
        Ok(vec![path])
    }

    fn build_graph(&self) -> Result<Vec<PathBuf>> {
        let ds = self.dataset()?;
        let cells = self.cells(&ds)?;
        let (graph, spec) = build_graph(&ds.regions, &cells, &ds.gva_categories, &ds.landuse.class_set)?;
        let path = self.out(GRAPH);
        write_graph(&path, &graph, &spec)?;
        info!("graph: {} sources, {} agents", graph.n_sources(), graph.n_agents());
        Ok(vec![path])
    }

    fn train(&self) -> Result<Vec<PathBuf>> {
        let ds = self.dataset()?;
        let cells = self.cells(&ds)?;
        let graph = self.graph(&ds, &cells)?;
        let mut tc = self.cfg.train.clone();
        tc.seed = stage_seed(self.cfg.seed, "train");
        let ctx = loss_context(&ds, &graph, &self.cfg.mapping, &tc)?;
        let outcome = train(&ctx, &tc.encoder_config(&graph), &tc)?;
        info!(
            "trained {} epochs: loss {:.6e} -> {:.6e}",
            outcome.trace.len(),
            outcome.trace.first().copied().unwrap_or(f64::NAN),
            outcome.best_loss
        );
        let ckpt = self.out(CHECKPOINT);
        save_checkpoint(&ckpt, &outcome.params, tc.seed)?;
        let trace = self.out(LOSS_TRACE);
        write_loss_trace(&trace, &outcome.trace)?;
        let lw = learned_weights(&graph, &outcome.params, tc.tau, &cells)?;
        let weights = self.out(WEIGHTS);
        write_weights_csv(&weights, &graph, &lw.field)?;
        let mut out = vec![ckpt, trace, weights];
        out.extend(write_heatmaps(&self.out(HEATMAPS), &ds, &cells, &lw.per_cell)?);
        Ok(out)
    }

    fn allocate(&self) -> Result<Vec<PathBuf>> {
        let ds = self.dataset()?;
        let cells = self.cells(&ds)?;
        let graph = self.graph(&ds, &cells)?;
        let expected = self.cfg.train.encoder_config(&graph);
        let (params, _) = load_checkpoint(&self.out(CHECKPOINT), Some(&expected))?;
        let lw = learned_weights(&graph, &params, self.cfg.train.tau, &cells)?;
        let table = read_class_table(&self.inputs.class_weights)?;
        let ac = AllocatorConfig {
            k: self.cfg.allocator.k,
            seed: stage_seed(self.cfg.seed, "allocate"),
        };
        let results = run_methods(&ds, &cells, &table, Some(&lw.per_cell), &ac, &Method::ALL)?;
        let path = self.out(ALLOCATIONS);
        write_allocations(&path, &results)?;
        Ok(vec![path])
    }

    fn evaluate(&self) -> Result<Vec<PathBuf>> {
        let ds = self.dataset()?;
        let results = read_allocations(&self.out(ALLOCATIONS))?;
        let rows = comparison_rows(&results, &ds.regions, &ds.facilities)?;
        let csv = self.out(COMPARISON_CSV);
        let txt = self.out(COMPARISON_TXT);
        write_comparison_csv(&csv, &rows)?;
        write_comparison_txt(&txt, &rows)?;
        print!("{}", format_comparison_table(&rows));
        let mut out = vec![csv, txt];
        if let Some(planted) = &self.inputs.planted_weights {
            out.push(self.weight_quality(&ds, planted)?);
        }
        Ok(out)
    }

    fn weight_quality(&self, ds: &Dataset, planted: &Path) -> Result<PathBuf> {
        let planted = read_planted_weights(planted)?;
        let cells = self.cells(ds)?;
        let learned = read_weights_csv(&self.out(WEIGHTS))?;
        let predicted = cells
            .iter()
            .map(|c| learned.get(&c.id).copied().with_context(|| format!("no learned weight for cell {}", c.id)))
            .collect::<Result<Vec<f64>>>()?;
        let rows = weight_quality_by_region(ds, &cells, &predicted, &planted)?;
        for r in &rows {
            info!(
                "{} ({}): spearman {:?}, top-decile overlap {:.3}",
                r.region_id, r.split, r.quality.spearman, r.quality.top_decile_overlap
            );
        }
        let path = self.out(WEIGHT_QUALITY);
        write_weight_quality(&path, &rows)?;
        Ok(path)
    }
}
