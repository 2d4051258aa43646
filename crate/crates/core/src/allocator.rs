//! Second stage: partition cells among facilities (plain Voronoi or
//! cluster-induced Voronoi over k-means load centers) and turn per-cell
//! weights into facility volumes.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GeoPoint;
use crate::graph::HeteroGraph;
use crate::grid::GridCell;
use crate::ingest::{Facility, Region};
use crate::predictor::EdgeWeightField;

const MAX_LLOYD_ITERATIONS: usize = 100;
const KMEANS_RESTARTS: u64 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadCenter {
    pub centroid: GeoPoint,
    /// Indices into the clustered point list, ascending.
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// Ordered by smallest member index.
    pub centers: Vec<LoadCenter>,
    pub labels: Vec<usize>,
    /// Within-cluster sum of squares after every assignment step.
    pub sse_history: Vec<f64>,
}

/// Index of the nearest target for every point; ties go to the lowest index.
pub fn nearest(points: &[GeoPoint], targets: &[GeoPoint]) -> Vec<usize> {
    points
        .par_iter()
        .map(|p| nearest_one(p, targets).0)
        .collect()
}

fn nearest_one(p: &GeoPoint, targets: &[GeoPoint]) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, t) in targets.iter().enumerate() {
        let d = p.distance_squared(t);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn mean(points: &[GeoPoint], members: impl Iterator<Item = usize>) -> GeoPoint {
    let (mut x, mut y, mut n) = (0.0, 0.0, 0usize);
    for i in members {
        x += points[i].x;
        y += points[i].y;
        n += 1;
    }
    GeoPoint::new(x / n as f64, y / n as f64)
}

/// k-means with k-means++ seeding and Lloyd iterations until the assignment
/// stops changing or 100 iterations pass. Empty clusters are re-seeded at the
/// point farthest from its center. The best of several seeded restarts (by
/// final within-cluster sum of squares) is kept.
pub fn kmeans(points: &[GeoPoint], k: usize, seed: u64) -> Result<Clustering> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::Allocation(format!("k = {k} with {n} points")));
    }
    let mut best: Option<Clustering> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(restart);
        let run = lloyd(points, k, &mut rng);
        let sse = |c: &Clustering| c.sse_history.last().copied().unwrap_or(0.0);
        if best.as_ref().map_or(true, |b| sse(&run) < sse(b)) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn lloyd(points: &[GeoPoint], k: usize, rng: &mut ChaCha8Rng) -> Clustering {
    let n = points.len();
    let mut centers = vec![points[rng.gen_range(0..n)]];
    let mut d2: Vec<f64> = points.iter().map(|p| p.distance_squared(&centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            while d2[pick] == 0.0 {
                pick -= 1;
            }
            pick
        } else {
            // all remaining points coincide with a center
            centers.len()
        };
        centers.push(points[pick]);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(p.distance_squared(&points[pick]));
        }
    }

    let mut labels: Vec<usize> = Vec::new();
    let mut sse_history = Vec::new();
    for _ in 0..MAX_LLOYD_ITERATIONS {
        let mut next: Vec<(usize, f64)> = points.iter().map(|p| nearest_one(p, &centers)).collect();
        let mut counts = vec![0usize; k];
        for &(c, _) in &next {
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[next[i].0] > 1)
                    .fold(None, |best: Option<usize>, i| match best {
                        Some(b) if next[b].1 >= next[i].1 => Some(b),
                        _ => Some(i),
                    });
                if let Some(i) = far {
                    counts[next[i].0] -= 1;
                    counts[c] = 1;
                    centers[c] = points[i];
                    next[i] = (c, 0.0);
                }
            }
        }
        sse_history.push(next.iter().map(|x| x.1).sum());
        let new_labels: Vec<usize> = next.iter().map(|x| x.0).collect();
        let stable = new_labels == labels;
        labels = new_labels;
        for (c, center) in centers.iter_mut().enumerate() {
            if counts[c] > 0 {
                *center = mean(points, (0..n).filter(|&i| labels[i] == c));
            }
        }
        if stable {
            break;
        }
    }

    let mut order: Vec<usize> = (0..k).collect();
    let first = |c: usize| labels.iter().position(|&l| l == c).unwrap_or(usize::MAX);
    order.sort_by_key(|&c| first(c));
    let mut relabel = vec![0; k];
    for (new, &old) in order.iter().enumerate() {
        relabel[old] = new;
    }
    let labels: Vec<usize> = labels.iter().map(|&l| relabel[l]).collect();
    let centers = order
        .iter()
        .map(|&old| LoadCenter {
            centroid: centers[old],
            members: (0..n).filter(|&i| labels[i] == relabel[old]).collect(),
        })
        .collect();
    Clustering {
        centers,
        labels,
        sse_history,
    }
}

/// Nearest facility for every cell of one region.
pub fn assign_vd(cells: &[GeoPoint], facilities: &[GeoPoint]) -> Result<Vec<usize>> {
    if facilities.is_empty() && !cells.is_empty() {
        return Err(Error::Allocation("no facilities to assign cells to".into()));
    }
    Ok(nearest(cells, facilities))
}

/// Cluster facilities into `k` load centers and send every cell to the
/// nearest center. Returns the per-cell cluster and the clustering.
pub fn assign_civd(
    cells: &[GeoPoint],
    facilities: &[GeoPoint],
    k: usize,
    seed: u64,
) -> Result<(Vec<usize>, Clustering)> {
    let clustering = kmeans(facilities, k, seed)?;
    let centers: Vec<GeoPoint> = clustering.centers.iter().map(|c| c.centroid).collect();
    Ok((nearest(cells, &centers), clustering))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    Vd,
    VdGpm,
    VdGnnGpm,
    Civd,
    CivdGpm,
    CivdGnnGpm,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightKind {
    Uniform,
    Static,
    Learned,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Vd,
        Method::VdGpm,
        Method::VdGnnGpm,
        Method::Civd,
        Method::CivdGpm,
        Method::CivdGnnGpm,
        Method::Uniform,
    ];

    /// The six partition/weight combinations compared in the results table.
    pub const COMPARED: [Method; 6] = [
        Method::Vd,
        Method::VdGpm,
        Method::VdGnnGpm,
        Method::Civd,
        Method::CivdGpm,
        Method::CivdGnnGpm,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            Method::Vd => "VD",
            Method::VdGpm => "VD-GPM",
            Method::VdGnnGpm => "VD-GNN-GPM",
            Method::Civd => "CIVD",
            Method::CivdGpm => "CIVD-GPM",
            Method::CivdGnnGpm => "CIVD-GNN-GPM",
            Method::Uniform => "uniform",
        }
    }

    pub fn weights(&self) -> WeightKind {
        match self {
            Method::Vd | Method::Civd | Method::Uniform => WeightKind::Uniform,
            Method::VdGpm | Method::CivdGpm => WeightKind::Static,
            Method::VdGnnGpm | Method::CivdGnnGpm => WeightKind::Learned,
        }
    }

    pub fn is_civd(&self) -> bool {
        matches!(self, Method::Civd | Method::CivdGpm | Method::CivdGnnGpm)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| Error::Allocation(format!("unknown method {s:?}")))
    }
}

fn cells_by_region(regions: &[Region], cells: &[GridCell]) -> Result<Vec<Vec<usize>>> {
    let index: HashMap<&str, usize> = regions.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
    let mut out = vec![Vec::new(); regions.len()];
    for (i, c) in cells.iter().enumerate() {
        let r = index
            .get(c.region_id.as_str())
            .ok_or_else(|| Error::Allocation(format!("cell {} has unknown region {}", c.id, c.region_id)))?;
        out[*r].push(i);
    }
    Ok(out)
}

fn normalize_per_region(regions: &[Region], cells: &[GridCell], raw: Vec<f64>, what: &str) -> Result<Vec<f64>> {
    let mut w = raw;
    for (r, members) in regions.iter().zip(cells_by_region(regions, cells)?) {
        let total: f64 = members.iter().map(|&i| w[i]).sum();
        if members.is_empty() {
            continue;
        }
        if !(total > 0.0) {
            return Err(Error::Allocation(format!("{what} weights of region {} sum to zero", r.id)));
        }
        for i in members {
            w[i] /= total;
        }
    }
    Ok(w)
}

/// Equal weight for every cell of a region.
pub fn uniform_weights(regions: &[Region], cells: &[GridCell]) -> Result<Vec<f64>> {
    normalize_per_region(regions, cells, vec![1.0; cells.len()], "uniform")
}

/// Weight proportional to the table entry of each cell's dominant class.
pub fn static_gpm_weights(
    regions: &[Region],
    cells: &[GridCell],
    class_set: &[String],
    table: &HashMap<String, f64>,
) -> Result<Vec<f64>> {
    let per_class = class_set
        .iter()
        .map(|c| match table.get(c) {
            Some(&w) if w >= 0.0 && w.is_finite() => Ok(w),
            Some(&w) => Err(Error::Config(format!("class weight for {c} is {w}"))),
            None => Err(Error::Config(format!("class weight table has no entry for {c}"))),
        })
        .collect::<Result<Vec<f64>>>()?;
    let raw = cells.iter().map(|c| per_class[c.dominant]).collect();
    normalize_per_region(regions, cells, raw, "static")
}

/// Learned edge weights re-indexed by cell, matched through agent ids.
pub fn learned_cell_weights(graph: &HeteroGraph, field: &EdgeWeightField, cells: &[GridCell]) -> Result<Vec<f64>> {
    let by_id: HashMap<&str, f64> = graph
        .edges_sa
        .iter()
        .zip(&field.weights)
        .map(|(&(_, a), &w)| (graph.agent_ids[a].as_str(), w))
        .collect();
    cells
        .iter()
        .map(|c| {
            by_id
                .get(c.id.as_str())
                .copied()
                .ok_or_else(|| Error::Allocation(format!("no learned weight for cell {}", c.id)))
        })
        .collect()
}

/// Reads `class,weight` rows.
pub fn read_class_table(path: &Path) -> Result<HashMap<String, f64>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut out = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let class = rec.get(0).unwrap_or("").trim().to_string();
        let w: f64 = rec
            .get(1)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::csv(path, format!("bad weight for class {class:?}")))?;
        out.insert(class, w);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllocatorConfig {
    /// Load centers per region; `None` means ⌈√facilities⌉.
    pub k: Option<usize>,
    pub seed: u64,
}

impl Default for AllocatorConfig {
    fn default() -> Self {
        Self { k: None, seed: 0 }
    }
}

impl AllocatorConfig {
    pub fn k_for(&self, n_facilities: usize) -> usize {
        self.k
            .unwrap_or_else(|| (n_facilities as f64).sqrt().ceil() as usize)
            .clamp(1, n_facilities.max(1))
    }

    fn region_seed(&self, region: usize) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(region as u64);
        rng.gen()
    }
}

/// Cell-to-facility structure of one region, shared by every weighting.
#[derive(Debug, Clone)]
pub struct RegionPartition {
    pub cells: Vec<usize>,
    pub facilities: Vec<usize>,
    /// Per region cell, index into `facilities`.
    pub vd: Vec<usize>,
    /// Per region cell, cluster index.
    pub civd: Vec<usize>,
    pub clustering: Option<Clustering>,
}

pub fn partition(
    regions: &[Region],
    cells: &[GridCell],
    facilities: &[Facility],
    config: &AllocatorConfig,
) -> Result<Vec<RegionPartition>> {
    let by_region = cells_by_region(regions, cells)?;
    regions
        .iter()
        .zip(by_region)
        .enumerate()
        .map(|(r, (region, cell_ix))| {
            let fac_ix: Vec<usize> = (0..facilities.len())
                .filter(|&f| facilities[f].region_id == region.id)
                .collect();
            if fac_ix.is_empty() {
                return Err(Error::Allocation(format!(
                    "region {} has no facilities; its {} cells cannot be assigned",
                    region.id,
                    cell_ix.len()
                )));
            }
            let pts: Vec<GeoPoint> = cell_ix.iter().map(|&i| cells[i].centroid).collect();
            let fpts: Vec<GeoPoint> = fac_ix.iter().map(|&f| facilities[f].location).collect();
            let vd = assign_vd(&pts, &fpts)?;
            let (civd, clustering) = assign_civd(&pts, &fpts, config.k_for(fpts.len()), config.region_seed(r))?;
            Ok(RegionPartition {
                cells: cell_ix,
                facilities: fac_ix,
                vd,
                civd,
                clustering: Some(clustering),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacilityAllocation {
    pub region_id: String,
    pub facility_id: String,
    pub volume: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationResult {
    pub method: Method,
    pub allocations: Vec<FacilityAllocation>,
}

/// Volume per facility of one region. `weights` is indexed by global cell.
pub fn aggregate_region(
    method: Method,
    region: &Region,
    part: &RegionPartition,
    weights: &[f64],
) -> Result<Vec<f64>> {
    let m = part.facilities.len();
    let v = region.total_volume;
    if method == Method::Uniform || part.cells.is_empty() {
        if part.cells.is_empty() && method != Method::Uniform {
            warn!("region {} has no cells; splitting its total evenly", region.id);
        }
        return Ok(vec![v / m as f64; m]);
    }
    let w: Vec<f64> = part.cells.iter().map(|&i| weights[i]).collect();
    let total: f64 = w.iter().sum();
    if !(total > 0.0) || w.iter().any(|x| !(*x >= 0.0)) {
        return Err(Error::Allocation(format!(
            "{method} weights in region {} are not a valid distribution",
            region.id
        )));
    }
    let mut out = vec![0.0; m];
    if method.is_civd() {
        let clustering = part
            .clustering
            .as_ref()
            .ok_or_else(|| Error::Allocation("missing clustering".into()))?;
        let mut mass = vec![0.0; clustering.centers.len()];
        for (&c, &wi) in part.civd.iter().zip(&w) {
            mass[c] += wi;
        }
        for (center, &wc) in clustering.centers.iter().zip(&mass) {
            // same operation order as the VD branch, so singleton clusters match it bit for bit
            let share = v * wc / total / center.members.len() as f64;
            for &f in &center.members {
                out[f] += share;
            }
        }
    } else {
        for (&f, &wi) in part.vd.iter().zip(&w) {
            out[f] += wi;
        }
        out.iter_mut().for_each(|x| *x = v * *x / total);
    }
    Ok(out)
}

/// Runs one method over every region.
pub fn allocate(
    method: Method,
    regions: &[Region],
    facilities: &[Facility],
    partitions: &[RegionPartition],
    weights: &[f64],
) -> Result<AllocationResult> {
    let mut allocations = Vec::new();
    for (region, part) in regions.iter().zip(partitions) {
        let volumes = aggregate_region(method, region, part, weights)?;
        for (&f, volume) in part.facilities.iter().zip(volumes) {
            allocations.push(FacilityAllocation {
                region_id: region.id.clone(),
                facility_id: facilities[f].id.clone(),
                volume,
            });
        }
    }
    Ok(AllocationResult { method, allocations })
}

pub fn write_allocations(path: &Path, results: &[AllocationResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["method", "region_id", "facility_id", "allocated_volume"])
        .map_err(|e| Error::csv(path, e))?;
    for res in results {
        for a in &res.allocations {
            w.write_record([res.method.tag(), &a.region_id, &a.facility_id, &a.volume.to_string()])
                .map_err(|e| Error::csv(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_allocations(path: &Path) -> Result<Vec<AllocationResult>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut out: Vec<AllocationResult> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let field = |i: usize| rec.get(i).unwrap_or("").trim();
        let method: Method = field(0).parse()?;
        let volume: f64 = field(3)
            .parse()
            .map_err(|_| Error::csv(path, format!("bad volume {:?}", field(3))))?;
        let alloc = FacilityAllocation {
            region_id: field(1).to_string(),
            facility_id: field(2).to_string(),
            volume,
        };
        match out.iter_mut().find(|r| r.method == method) {
            Some(r) => r.allocations.push(alloc),
            None => out.push(AllocationResult {
                method,
                allocations: vec![alloc],
            }),
        }
    }
    Ok(out)
}
