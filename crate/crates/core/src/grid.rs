//! Rasterization of regions into uniform square cells with land-use fractions.

use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{point_in_polygon, BoundingBox, GeoPoint};
use crate::ingest::{LandUseMap, Region};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub id: String,
    pub region_id: String,
    /// Row and column in the region's bounding-box lattice; row 0 is the
    /// southernmost row.
    pub row: usize,
    pub col: usize,
    pub centroid: GeoPoint,
    pub side: f64,
    /// Area share of each land-use class; the remainder is implicit "other".
    pub fractions: Vec<f64>,
    /// Index of the dominant class (first index wins ties).
    pub dominant: usize,
}

impl GridCell {
    pub fn dominant_onehot(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.fractions.len()];
        v[self.dominant] = 1.0;
        v
    }

    pub fn rect(&self) -> BoundingBox {
        let h = self.side / 2.0;
        BoundingBox {
            min_x: self.centroid.x - h,
            min_y: self.centroid.y - h,
            max_x: self.centroid.x + h,
            max_y: self.centroid.y + h,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub target_cell_count: usize,
    /// Cell side lengths are rounded to a multiple of this (meters); 0 disables.
    pub quantum: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            target_cell_count: 400,
            quantum: 1.0,
        }
    }
}

/// First index of the maximum; 0 for an empty or all-equal vector.
pub fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn cell_side(bbox: &BoundingBox, config: &GridConfig) -> f64 {
    let raw = (bbox.area() / config.target_cell_count as f64).sqrt();
    if config.quantum > 0.0 {
        ((raw / config.quantum).round() * config.quantum).max(config.quantum)
    } else {
        raw
    }
}

fn lattice_len(extent: f64, side: f64) -> usize {
    ((extent / side - 1e-9).ceil() as usize).max(1)
}

pub fn generate_grid(region: &Region, landuse: &LandUseMap, config: &GridConfig) -> Result<Vec<GridCell>> {
    if config.target_cell_count == 0 {
        return Err(Error::Geometry("target cell count must be positive".into()));
    }
    let bbox = region.boundary.bbox();
    if !(bbox.area() > 0.0) || !(region.boundary.area() > 0.0) {
        return Err(Error::Geometry(format!("region {} has zero area", region.id)));
    }
    let side = cell_side(&bbox, config);
    let ncols = lattice_len(bbox.width(), side);
    let nrows = lattice_len(bbox.height(), side);
    let n_classes = landuse.class_set.len();
    let cell_area = side * side;

    let cell_rect = |r: usize, c: usize| BoundingBox {
        min_x: bbox.min_x + c as f64 * side,
        min_y: bbox.min_y + r as f64 * side,
        max_x: bbox.min_x + (c + 1) as f64 * side,
        max_y: bbox.min_y + (r + 1) as f64 * side,
    };

    let kept: Vec<(usize, usize, GeoPoint)> = (0..nrows * ncols)
        .into_par_iter()
        .filter_map(|i| {
            let (r, c) = (i / ncols, i % ncols);
            let centroid = GeoPoint::new(
                bbox.min_x + (c as f64 + 0.5) * side,
                bbox.min_y + (r as f64 + 0.5) * side,
            );
            point_in_polygon(&centroid, &region.boundary).then_some((r, c, centroid))
        })
        .collect();

    let mut slot = vec![usize::MAX; nrows * ncols];
    for (k, (r, c, _)) in kept.iter().enumerate() {
        slot[r * ncols + c] = k;
    }
    let mut fractions = vec![vec![0.0; n_classes]; kept.len()];
    for patch in &landuse.patches {
        let pb = patch.polygon.bbox();
        if !pb.intersects(&bbox) {
            continue;
        }
        let c0 = (((pb.min_x - bbox.min_x) / side).floor().max(0.0)) as usize;
        let r0 = (((pb.min_y - bbox.min_y) / side).floor().max(0.0)) as usize;
        let c1 = ((((pb.max_x - bbox.min_x) / side).ceil()) as usize).min(ncols);
        let r1 = ((((pb.max_y - bbox.min_y) / side).ceil()) as usize).min(nrows);
        for r in r0..r1 {
            for c in c0..c1 {
                let k = slot[r * ncols + c];
                if k == usize::MAX {
                    continue;
                }
                let a = patch.polygon.intersection_area_with_rect(&cell_rect(r, c));
                fractions[k][patch.class] += a / cell_area;
            }
        }
    }

    Ok(kept
        .into_iter()
        .zip(fractions)
        .map(|((r, c, centroid), mut fr)| {
            for f in fr.iter_mut() {
                *f = f.clamp(0.0, 1.0);
            }
            let total: f64 = fr.iter().sum();
            if total > 1.0 {
                // overlapping patches
                fr.iter_mut().for_each(|f| *f /= total);
            }
            GridCell {
                id: format!("{}:{}:{}", region.id, r, c),
                region_id: region.id.clone(),
                row: r,
                col: c,
                centroid,
                side,
                dominant: argmax_first(&fr),
                fractions: fr,
            }
        })
        .collect())
}

/// Grids every region in order. A cell whose centroid also falls inside an
/// earlier region is dropped with a warning, so each location belongs to the
/// first region that claims it.
pub fn generate_grids(regions: &[Region], landuse: &LandUseMap, config: &GridConfig) -> Result<Vec<GridCell>> {
    let mut cells = Vec::new();
    for (i, region) in regions.iter().enumerate() {
        let mut grid = generate_grid(region, landuse, config)?;
        let before = grid.len();
        grid.retain(|cell| {
            !regions[..i]
                .iter()
                .any(|earlier| point_in_polygon(&cell.centroid, &earlier.boundary))
        });
        if grid.len() < before {
            warn!(
                "region {}: {} cells overlap earlier regions and were assigned to them",
                region.id,
                before - grid.len()
            );
        }
        if grid.is_empty() {
            warn!("region {} produced no grid cells", region.id);
        }
        cells.extend(grid);
    }
    Ok(cells)
}

#[derive(Serialize, Deserialize)]
struct CellDump {
    class_set: Vec<String>,
    config: GridConfig,
    cells: Vec<GridCell>,
}

/// Writes `cells.json` with the class order and grid settings it was built with.
pub fn write_cells(path: &Path, class_set: &[String], config: &GridConfig, cells: &[GridCell]) -> Result<()> {
    let dump = CellDump {
        class_set: class_set.to_vec(),
        config: *config,
        cells: cells.to_vec(),
    };
    let text = serde_json::to_string(&dump)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads `cells.json`, refusing it when it was built for another class
/// order or grid configuration.
pub fn read_cells(path: &Path, class_set: &[String], config: &GridConfig) -> Result<Vec<GridCell>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dump: CellDump = serde_json::from_str(&text)?;
    if dump.class_set != class_set {
        return Err(Error::Load(format!(
            "{} was built for classes {:?}, dataset has {:?}",
            path.display(),
            dump.class_set,
            class_set
        )));
    }
    if dump.config != *config {
        return Err(Error::Load(format!(
            "{} was built with {:?}, configuration asks for {:?}",
            path.display(),
            dump.config,
            config
        )));
    }
    Ok(dump.cells)
}
