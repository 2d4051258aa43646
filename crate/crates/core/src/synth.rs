//! Synthetic benchmark with known per-cell weights. Regions are squares
//! tiled with rectangular land-use blocks; each class has a fixed demand
//! intensity, indicators are the resulting class-mass shares, and facility
//! demands come from exact Voronoi allocation of the planted weights.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::allocator::assign_vd;
use crate::error::{Error, Result};
use crate::geometry::{GeoPoint, MultiPolygon, Polygon};
use crate::grid::{generate_grids, GridCell, GridConfig};
use crate::ingest::{
    write_facilities, write_indicators, write_landuse, write_regions, Facility, LandUseMap, LandUsePatch, Region,
    Split,
};

pub const CLASSES: [&str; 5] = ["residential", "industrial", "commercial", "agricultural", "other"];
const RESIDENTIAL: usize = 0;
const INDUSTRIAL: usize = 1;
const COMMERCIAL: usize = 2;
const AGRICULTURAL: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub train_regions: usize,
    pub test_regions: usize,
    /// Side length of every square region, meters.
    pub region_size: f64,
    pub target_cell_count: usize,
    /// Demand intensity per class, in [`CLASSES`] order.
    pub intensities: [f64; 5],
    /// Land-use blocks along each axis of a region.
    pub blocks_per_side: usize,
    /// Settlements per region, each served by its own group of facilities.
    pub towns: usize,
    /// Range of a town's radius as a fraction of the region side.
    pub town_radius: [f64; 2],
    pub facilities_per_town: usize,
    /// Extra uniform probability mass when siting facilities, relative to the
    /// mean planted weight.
    pub facility_spread: f64,
    /// Random-move steps that even out the planted demand served by the
    /// facilities of one town, the way a planner sizes substations to
    /// comparable loads; 0 keeps the sampled sites.
    pub balance_steps: usize,
    /// Sum of all indicator components of a region.
    pub indicator_scale: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            train_regions: 4,
            test_regions: 2,
            region_size: 20_000.0,
            target_cell_count: 400,
            intensities: [2.0, 2.5, 3.0, 0.3, 0.0],
            blocks_per_side: 8,
            towns: 3,
            town_radius: [0.06, 0.16],
            facilities_per_town: 3,
            facility_spread: 0.2,
            balance_steps: 2000,
            indicator_scale: 1.0e6,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_regions + self.test_regions == 0 || self.towns == 0 || self.facilities_per_town == 0 {
            return Err(Error::Config("synthetic scenario needs regions, towns and facilities".into()));
        }
        if !(self.region_size > 0.0) || self.target_cell_count == 0 || self.blocks_per_side == 0 {
            return Err(Error::Config("region size, cell count and blocks must be positive".into()));
        }
        if self.intensities.iter().any(|v| !(*v >= 0.0)) || self.intensities.iter().all(|v| *v == 0.0) {
            return Err(Error::Config("intensities must be nonnegative and not all zero".into()));
        }
        if !(self.town_radius[0] > 0.0 && self.town_radius[0] <= self.town_radius[1]) {
            return Err(Error::Config("town_radius must be an increasing positive range".into()));
        }
        if self.facilities_per_region() > self.target_cell_count {
            return Err(Error::Config("more facilities than cells per region".into()));
        }
        Ok(())
    }

    pub fn facilities_per_region(&self) -> usize {
        self.towns * self.facilities_per_town
    }

    pub fn grid_config(&self) -> GridConfig {
        GridConfig {
            target_cell_count: self.target_cell_count,
            quantum: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScenario {
    pub regions: Vec<Region>,
    pub landuse: LandUseMap,
    pub facilities: Vec<Facility>,
    pub gva_categories: Vec<String>,
    pub cells: Vec<GridCell>,
    /// Per cell, aligned with `cells`; sums to 1 within each region.
    pub planted: Vec<f64>,
}

pub const GVA_CATEGORIES: [&str; 3] = ["industry", "commerce", "agriculture"];

/// Class probabilities by distance from the nearest town center, in units
/// of that town's radius.
fn class_mix(t: f64) -> [f64; 5] {
    if t < 0.5 {
        [0.3, 0.1, 0.6, 0.0, 0.0]
    } else if t < 1.0 {
        [0.6, 0.25, 0.15, 0.0, 0.0]
    } else if t < 1.6 {
        [0.3, 0.3, 0.0, 0.3, 0.1]
    } else {
        [0.05, 0.0, 0.0, 0.6, 0.35]
    }
}

fn draw(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let total: f64 = probs.iter().sum();
    let mut r = rng.gen::<f64>() * total;
    for (i, &p) in probs.iter().enumerate() {
        if r < p {
            return i;
        }
        r -= p;
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn cuts(rng: &mut ChaCha8Rng, lo: f64, hi: f64, pieces: usize) -> Vec<f64> {
    let mut c: Vec<f64> = (1..pieces).map(|_| rng.gen_range(lo..hi)).collect();
    c.sort_by(f64::total_cmp);
    std::iter::once(lo).chain(c).chain(std::iter::once(hi)).collect()
}

struct Town {
    center: GeoPoint,
    radius: f64,
}

impl Town {
    fn nearest(towns: &[Town], p: &GeoPoint) -> (usize, f64) {
        towns
            .iter()
            .enumerate()
            .map(|(i, t)| (i, p.distance(&t.center) / t.radius))
            .fold((0, f64::INFINITY), |best, x| if x.1 < best.1 { x } else { best })
    }
}

fn place_towns(rng: &mut ChaCha8Rng, x0: f64, size: f64, config: &SyntheticConfig) -> Vec<Town> {
    let min_gap = size * 0.8 / (config.towns as f64).sqrt();
    let mut towns: Vec<Town> = Vec::with_capacity(config.towns);
    let mut attempts = 0;
    while towns.len() < config.towns {
        let center = GeoPoint::new(x0 + size * rng.gen_range(0.15..0.85), size * rng.gen_range(0.15..0.85));
        attempts += 1;
        if attempts < 10_000 && towns.iter().any(|t| t.center.distance(&center) < min_gap) {
            continue;
        }
        let radius = size * rng.gen_range(config.town_radius[0]..=config.town_radius[1]);
        towns.push(Town { center, radius });
    }
    towns
}

fn town_patches(rng: &mut ChaCha8Rng, x0: f64, size: f64, towns: &[Town], blocks: usize) -> Vec<LandUsePatch> {
    let xs = cuts(rng, x0, x0 + size, blocks);
    let mut out = Vec::new();
    for w in xs.windows(2) {
        let ys = cuts(rng, 0.0, size, blocks);
        for h in ys.windows(2) {
            let center = GeoPoint::new((w[0] + w[1]) / 2.0, (h[0] + h[1]) / 2.0);
            let class = draw(rng, &class_mix(Town::nearest(towns, &center).1));
            out.push(LandUsePatch {
                polygon: MultiPolygon(vec![Polygon::rect(w[0], h[0], w[1], h[1])]),
                class,
            });
        }
    }
    out
}

/// Squared deviation of each facility's served planted mass from the mean
/// of its town group.
fn imbalance(owner: &[usize], mass: &[f64], group: &[usize], n_groups: usize) -> f64 {
    let mut load = vec![0.0; group.len()];
    for (&f, &m) in owner.iter().zip(mass) {
        load[f] += m;
    }
    let mut sum = vec![(0.0, 0usize); n_groups];
    for (&g, &l) in group.iter().zip(&load) {
        sum[g].0 += l;
        sum[g].1 += 1;
    }
    group
        .iter()
        .zip(&load)
        .map(|(&g, &l)| (l - sum[g].0 / sum[g].1 as f64).powi(2))
        .sum()
}

pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<SyntheticScenario> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.train_regions + config.test_regions;
    let size = config.region_size;
    let mut regions = Vec::with_capacity(n);
    let mut towns = Vec::with_capacity(n);
    let mut patches = Vec::new();
    for i in 0..n {
        let x0 = i as f64 * size;
        let (split, j) = if i < config.train_regions {
            (Split::Train, i)
        } else {
            (Split::Test, i - config.train_regions)
        };
        regions.push(Region {
            id: format!("{}{j}", split.as_str()),
            boundary: MultiPolygon(vec![Polygon::rect(x0, 0.0, x0 + size, size)]),
            population: 0.0,
            gva: vec![0.0; GVA_CATEGORIES.len()],
            total_volume: 1000.0 * rng.gen_range(0.5..1.5),
            split,
        });
        let t = place_towns(&mut rng, x0, size, config);
        patches.extend(town_patches(&mut rng, x0, size, &t, config.blocks_per_side));
        towns.push(t);
    }
    let landuse = LandUseMap {
        patches,
        class_set: CLASSES.iter().map(|s| s.to_string()).collect(),
    };
    let cells = generate_grids(&regions, &landuse, &config.grid_config())?;

    let mut planted = vec![0.0; cells.len()];
    let mut facilities = Vec::new();
    for (region, towns) in regions.iter_mut().zip(&towns) {
        let members: Vec<usize> = (0..cells.len()).filter(|&i| cells[i].region_id == region.id).collect();
        let mut mass = [0.0; 5];
        for &i in &members {
            mass[cells[i].dominant] += config.intensities[cells[i].dominant];
        }
        let total: f64 = mass.iter().sum();
        if !(total > 0.0) || members.len() < config.facilities_per_region() {
            return Err(Error::Config(format!(
                "region {} has no planted mass or too few cells for its facilities",
                region.id
            )));
        }
        for &i in &members {
            planted[i] = config.intensities[cells[i].dominant] / total;
        }
        let share = |k: usize| config.indicator_scale * mass[k] / total;
        region.population = share(RESIDENTIAL);
        region.gva = vec![share(INDUSTRIAL), share(COMMERCIAL), share(AGRICULTURAL)];

        // initial sites: demand-weighted draws among the cells of each town
        let floor = config.facility_spread / members.len() as f64;
        let centroids: Vec<GeoPoint> = members.iter().map(|&i| cells[i].centroid).collect();
        let home: Vec<usize> = centroids.iter().map(|c| Town::nearest(towns, c).0).collect();
        let mut sites = Vec::with_capacity(config.facilities_per_region());
        let mut group = Vec::with_capacity(config.facilities_per_region());
        for t in 0..towns.len() {
            let inside = |k: &usize| centroids[*k].distance(&towns[t].center) <= towns[t].radius;
            let mut pool: Vec<usize> = (0..members.len()).filter(|k| home[*k] == t && inside(k)).collect();
            if pool.len() < config.facilities_per_town {
                pool = (0..members.len()).collect();
            }
            for _ in 0..config.facilities_per_town {
                let probs: Vec<f64> = pool.iter().map(|&k| planted[members[k]] + floor).collect();
                let c = &cells[members[pool.remove(draw(&mut rng, &probs))]];
                let jitter = |rng: &mut ChaCha8Rng| rng.gen_range(-0.45..0.45) * c.side;
                sites.push(GeoPoint::new(c.centroid.x + jitter(&mut rng), c.centroid.y + jitter(&mut rng)));
                group.push(t);
            }
        }

        let cell_mass: Vec<f64> = members.iter().map(|&i| planted[i]).collect();
        let bbox = region.boundary.bbox();
        let step = cells[members[0]].side;
        let mut best = imbalance(&assign_vd(&centroids, &sites)?, &cell_mass, &group, towns.len());
        for _ in 0..config.balance_steps {
            let f = rng.gen_range(0..sites.len());
            let old = sites[f];
            let moved = GeoPoint::new(
                (old.x + step * rng.gen_range(-1.0..1.0)).clamp(bbox.min_x, bbox.max_x),
                (old.y + step * rng.gen_range(-1.0..1.0)).clamp(bbox.min_y, bbox.max_y),
            );
            let town = &towns[group[f]];
            if moved.distance(&town.center) > town.radius {
                continue;
            }
            sites[f] = moved;
            let candidate = imbalance(&assign_vd(&centroids, &sites)?, &cell_mass, &group, towns.len());
            if candidate < best {
                best = candidate;
            } else {
                sites[f] = old;
            }
        }

        sites.shuffle(&mut rng);
        let nearest = assign_vd(&centroids, &sites)?;
        let mut demand = vec![0.0; sites.len()];
        for (&f, &m) in nearest.iter().zip(&cell_mass) {
            demand[f] += m;
        }
        for (j, (site, d)) in sites.into_iter().zip(demand).enumerate() {
            facilities.push(Facility {
                id: format!("{}-f{j}", region.id),
                location: site,
                region_id: region.id.clone(),
                ground_truth_demand: Some(region.total_volume * d),
            });
        }
    }
    Ok(SyntheticScenario {
        regions,
        landuse,
        facilities,
        gva_categories: GVA_CATEGORIES.iter().map(|s| s.to_string()).collect(),
        cells,
        planted,
    })
}

/// Example static class-weight table for the GPM baselines.
pub fn example_class_table() -> Vec<(String, f64)> {
    [
        ("residential", 1.0),
        ("industrial", 1.0),
        ("commercial", 1.0),
        ("agricultural", 0.1),
        ("other", 0.1),
    ]
    .iter()
    .map(|(c, w)| (c.to_string(), *w))
    .collect()
}

#[derive(Debug, Clone)]
pub struct ScenarioFiles {
    pub regions: PathBuf,
    pub landuse: PathBuf,
    pub indicators: PathBuf,
    pub facilities: PathBuf,
    pub planted_weights: PathBuf,
    pub class_table: PathBuf,
}

impl ScenarioFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            regions: dir.join("regions.geojson"),
            landuse: dir.join("landuse.geojson"),
            indicators: dir.join("indicators.csv"),
            facilities: dir.join("facilities.csv"),
            planted_weights: dir.join("planted_weights.csv"),
            class_table: dir.join("gpm_class_weights.csv"),
        }
    }
}

pub fn write_scenario(dir: &Path, s: &SyntheticScenario) -> Result<ScenarioFiles> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = ScenarioFiles::in_dir(dir);
    write_regions(&files.regions, &s.regions, "synthetic planar meters")?;
    write_landuse(&files.landuse, &s.landuse)?;
    write_indicators(&files.indicators, &s.regions, &s.gva_categories)?;
    write_facilities(&files.facilities, &s.facilities)?;

    let p = &files.planted_weights;
    let mut w = csv::Writer::from_path(p).map_err(|e| Error::csv(p, e))?;
    w.write_record(["region_id", "cell_id", "weight"]).map_err(|e| Error::csv(p, e))?;
    for (c, wt) in s.cells.iter().zip(&s.planted) {
        w.write_record([c.region_id.as_str(), c.id.as_str(), &wt.to_string()])
            .map_err(|e| Error::csv(p, e))?;
    }
    w.flush().map_err(|e| Error::io(p, e))?;

    let p = &files.class_table;
    let mut w = csv::Writer::from_path(p).map_err(|e| Error::csv(p, e))?;
    w.write_record(["class", "weight"]).map_err(|e| Error::csv(p, e))?;
    for (c, wt) in example_class_table() {
        w.write_record([c, wt.to_string()]).map_err(|e| Error::csv(p, e))?;
    }
    w.flush().map_err(|e| Error::io(p, e))?;
    Ok(files)
}

/// Reads `planted_weights.csv` into a cell-id map.
pub fn read_planted_weights(path: &Path) -> Result<HashMap<String, f64>> {
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planted_weights_are_normalized_and_conserved() {
        let cfg = SyntheticConfig {
            train_regions: 1,
            test_regions: 1,
            ..Default::default()
        };
        let s = generate_synthetic(&cfg, 11).unwrap();
        assert_eq!(s.cells.len(), 800);
        for r in &s.regions {
            let sum: f64 = s
                .cells
                .iter()
                .zip(&s.planted)
                .filter(|(c, _)| c.region_id == r.id)
                .map(|(_, w)| w)
                .sum();
            assert!((sum - 1.0).abs() < 1e-12);
            let demand: f64 = s
                .facilities
                .iter()
                .filter(|f| f.region_id == r.id)
                .map(|f| f.ground_truth_demand.unwrap())
                .sum();
            assert!((demand - r.total_volume).abs() <= 1e-9 * r.total_volume);
        }
    }

    #[test]
    fn equal_intensities_give_uniform_weights() {
        let cfg = SyntheticConfig {
            train_regions: 1,
            test_regions: 0,
            intensities: [1.0; 5],
            ..Default::default()
        };
        let s = generate_synthetic(&cfg, 2).unwrap();
        for w in &s.planted {
            assert!((w - 1.0 / 400.0).abs() < 1e-15);
        }
    }

    #[test]
    fn same_seed_same_scenario() {
        let cfg = SyntheticConfig::default();
        let a = generate_synthetic(&cfg, 5).unwrap();
        let b = generate_synthetic(&cfg, 5).unwrap();
        assert_eq!(a.planted, b.planted);
        assert_eq!(a.facilities, b.facilities);
    }
}
