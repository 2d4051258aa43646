//! Dataset loading: region boundaries and land-use patches from GeoJSON,
//! socioeconomic indicators and facilities from CSV.
//!
//! All coordinates must already be in one planar reference system; the
//! collection-level `crs_note` member documents which one.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::geometry::{point_in_polygon, GeoPoint, MultiPolygon, Polygon, Ring};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Region {
    pub id: String,
    pub boundary: MultiPolygon,
    pub population: f64,
    /// Indexed like [`Dataset::gva_categories`].
    pub gva: Vec<f64>,
    pub total_volume: f64,
    pub split: Split,
}

impl Region {
    /// Population followed by every GVA component.
    pub fn indicator_total(&self) -> f64 {
        self.population + self.gva.iter().sum::<f64>()
    }
}

#[derive(Debug, Clone)]
pub struct LandUsePatch {
    pub polygon: MultiPolygon,
    pub class: usize,
}

#[derive(Debug, Clone, Default)]
pub struct LandUseMap {
    pub patches: Vec<LandUsePatch>,
    pub class_set: Vec<String>,
}

impl LandUseMap {
    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_set.iter().position(|c| c == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Facility {
    pub id: String,
    pub location: GeoPoint,
    pub region_id: String,
    pub ground_truth_demand: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub regions: Vec<Region>,
    pub landuse: LandUseMap,
    pub facilities: Vec<Facility>,
    /// Category names without the `gva_` prefix, in column order.
    pub gva_categories: Vec<String>,
    pub crs_note: Option<String>,
}

impl Dataset {
    pub fn region_index(&self, id: &str) -> Option<usize> {
        self.regions.iter().position(|r| r.id == id)
    }

    /// Indicator component names as they appear in the CSV header.
    pub fn indicator_names(&self) -> Vec<String> {
        std::iter::once("population".to_string())
            .chain(self.gva_categories.iter().map(|c| format!("gva_{c}")))
            .collect()
    }
}

pub struct DatasetPaths<'a> {
    pub regions: &'a Path,
    pub landuse: &'a Path,
    pub indicators: &'a Path,
    pub facilities: &'a Path,
}

pub fn load_dataset(paths: &DatasetPaths<'_>) -> Result<Dataset> {
    let (region_features, crs_note) = read_feature_collection(paths.regions, "id")?;
    if crs_note.is_none() {
        warn!(
            "{} declares no crs_note; assuming planar coordinates",
            paths.regions.display()
        );
    }
    let (patch_features, _) = read_feature_collection(paths.landuse, "class")?;

    let mut class_set: Vec<String> = Vec::new();
    let mut patches = Vec::with_capacity(patch_features.len());
    for f in patch_features {
        let class = match class_set.iter().position(|c| *c == f.key) {
            Some(i) => i,
            None => {
                class_set.push(f.key.clone());
                class_set.len() - 1
            }
        };
        patches.push(LandUsePatch {
            polygon: f.geometry,
            class,
        });
    }

    let indicators = read_indicators(paths.indicators)?;
    let mut regions = Vec::with_capacity(region_features.len());
    let mut seen = HashSet::new();
    for f in region_features {
        if !seen.insert(f.key.clone()) {
            return Err(Error::Load(format!("duplicate region id {}", f.key)));
        }
        let row = indicators.rows.get(&f.key).ok_or_else(|| {
            Error::Load(format!("region {} has no indicator row", f.key))
        })?;
        let split = match f.split.as_deref() {
            None | Some("train") => Split::Train,
            Some("test") => Split::Test,
            Some(other) => {
                return Err(Error::Load(format!(
                    "region {}: unknown split {other:?}",
                    f.key
                )))
            }
        };
        regions.push(Region {
            id: f.key,
            boundary: f.geometry,
            population: row.population,
            gva: row.gva.clone(),
            total_volume: row.total_volume,
            split,
        });
    }
    for id in indicators.order.iter() {
        if !seen.contains(id) {
            return Err(Error::Load(format!(
                "indicator row for unknown region {id}"
            )));
        }
    }

    let facilities = read_facilities(paths.facilities)?;
    for fac in &facilities {
        let declared = regions.iter().find(|r| r.id == fac.region_id).ok_or_else(|| {
            Error::Load(format!(
                "facility {} references unknown region {}",
                fac.id, fac.region_id
            ))
        })?;
        if !point_in_polygon(&fac.location, &declared.boundary) {
            match regions
                .iter()
                .find(|r| point_in_polygon(&fac.location, &r.boundary))
            {
                Some(r) => warn!(
                    "facility {} lies in region {} but is declared in {}",
                    fac.id, r.id, fac.region_id
                ),
                None => {
                    return Err(Error::Load(format!(
                        "facility {} at ({}, {}) lies outside all regions",
                        fac.id, fac.location.x, fac.location.y
                    )))
                }
            }
        }
    }

    Ok(Dataset {
        regions,
        landuse: LandUseMap { patches, class_set },
        facilities,
        gva_categories: indicators.categories,
        crs_note,
    })
}

struct ParsedFeature {
    key: String,
    split: Option<String>,
    geometry: MultiPolygon,
}

#[derive(Deserialize)]
struct RawCollection<'a> {
    #[serde(rename = "type")]
    kind: String,
    #[serde(borrow)]
    features: Vec<&'a RawValue>,
    #[serde(default)]
    crs_note: Option<String>,
    #[serde(default)]
    properties: Option<Value>,
}

fn read_feature_collection(path: &Path, key: &str) -> Result<(Vec<ParsedFeature>, Option<String>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |offset: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        offset,
        message,
    };
    let collection: RawCollection<'_> = serde_json::from_str(&text)
        .map_err(|e| parse_err(byte_offset(&text, e.line(), e.column()), e.to_string()))?;
    if collection.kind != "FeatureCollection" {
        return Err(parse_err(0, format!("expected FeatureCollection, found {}", collection.kind)));
    }
    let crs_note = collection.crs_note.clone().or_else(|| {
        collection
            .properties
            .as_ref()
            .and_then(|p| p.get("crs_note"))
            .and_then(Value::as_str)
            .map(str::to_owned)
    });

    let base = text.as_ptr() as usize;
    let mut out = Vec::with_capacity(collection.features.len());
    for raw in collection.features {
        let offset = raw.get().as_ptr() as usize - base;
        let feature: Value = serde_json::from_str(raw.get())
            .map_err(|e| parse_err(offset, e.to_string()))?;
        let props = feature.get("properties");
        let key_value = props
            .and_then(|p| p.get(key))
            .and_then(|v| match v {
                Value::String(s) => Some(s.clone()),
                Value::Number(n) => Some(n.to_string()),
                _ => None,
            })
            .ok_or_else(|| parse_err(offset, format!("feature lacks property `{key}`")))?;
        let split = props
            .and_then(|p| p.get("split"))
            .and_then(Value::as_str)
            .map(str::to_owned);
        let geometry = feature
            .get("geometry")
            .ok_or_else(|| parse_err(offset, "feature has no geometry".into()))
            .and_then(|g| parse_geometry(g).map_err(|m| parse_err(offset, m)))?;
        geometry
            .validate()
            .map_err(|e| parse_err(offset, format!("feature {key_value}: {e}")))?;
        out.push(ParsedFeature {
            key: key_value,
            split,
            geometry,
        });
    }
    Ok((out, crs_note))
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut offset = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)).min(text.len());
        }
        offset += l.len();
    }
    text.len()
}

fn parse_geometry(g: &Value) -> std::result::Result<MultiPolygon, String> {
    let kind = g
        .get("type")
        .and_then(Value::as_str)
        .ok_or("geometry lacks type")?;
    let coords = g.get("coordinates").ok_or("geometry lacks coordinates")?;
    match kind {
        "Polygon" => Ok(MultiPolygon(vec![parse_polygon(coords)?])),
        "MultiPolygon" => {
            let parts = coords.as_array().ok_or("MultiPolygon coordinates must be an array")?;
            parts
                .iter()
                .map(parse_polygon)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(MultiPolygon)
        }
        other => Err(format!("unsupported geometry type {other}")),
    }
}

fn parse_polygon(v: &Value) -> std::result::Result<Polygon, String> {
    let rings = v.as_array().ok_or("polygon must be an array of rings")?;
    let mut parsed = rings
        .iter()
        .map(parse_ring)
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if parsed.is_empty() {
        return Err("polygon has no rings".into());
    }
    let exterior = parsed.remove(0);
    Ok(Polygon::new(exterior, parsed))
}

fn parse_ring(v: &Value) -> std::result::Result<Ring, String> {
    let positions = v.as_array().ok_or("ring must be an array of positions")?;
    positions
        .iter()
        .map(|p| {
            let xy = p.as_array().ok_or("position must be an array")?;
            match (xy.first().and_then(Value::as_f64), xy.get(1).and_then(Value::as_f64)) {
                (Some(x), Some(y)) => Ok(GeoPoint::new(x, y)),
                _ => Err("position needs two numeric coordinates".to_string()),
            }
        })
        .collect::<std::result::Result<Vec<_>, _>>()
        .map(Ring)
}

struct IndicatorRow {
    population: f64,
    total_volume: f64,
    gva: Vec<f64>,
}

struct Indicators {
    categories: Vec<String>,
    rows: HashMap<String, IndicatorRow>,
    order: Vec<String>,
}

fn parse_nonneg(path: &Path, line: u64, field: &str, raw: &str) -> Result<f64> {
    let v: f64 = raw.trim().parse().map_err(|_| {
        Error::csv(path, format!("line {line}: {field} = {raw:?} is not a number"))
    })?;
    if !v.is_finite() || v < 0.0 {
        return Err(Error::csv(
            path,
            format!("line {line}: {field} = {v} must be finite and nonnegative"),
        ));
    }
    Ok(v)
}

fn read_indicators(path: &Path) -> Result<Indicators> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let headers = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::csv(path, format!("missing column {name}")))
    };
    let (id_col, pop_col, vol_col) = (col("region_id")?, col("population")?, col("total_volume")?);
    let gva_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.trim().strip_prefix("gva_").map(|c| (i, c.to_string())))
        .collect();

    let mut rows = HashMap::new();
    let mut order = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let id = rec.get(id_col).unwrap_or("").trim().to_string();
        let field = |i: usize, name: &str| parse_nonneg(path, line, name, rec.get(i).unwrap_or(""));
        let row = IndicatorRow {
            population: field(pop_col, "population")?,
            total_volume: field(vol_col, "total_volume")?,
            gva: gva_cols
                .iter()
                .map(|(i, c)| field(*i, c))
                .collect::<Result<_>>()?,
        };
        if rows.insert(id.clone(), row).is_some() {
            return Err(Error::csv(path, format!("duplicate indicator row for {id}")));
        }
        order.push(id);
    }
    Ok(Indicators {
        categories: gva_cols.into_iter().map(|(_, c)| c).collect(),
        rows,
        order,
    })
}

pub fn read_facilities(path: &Path) -> Result<Vec<Facility>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let headers = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
    if headers.is_empty() {
        return Ok(Vec::new());
    }
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let need = |name: &str| col(name).ok_or_else(|| Error::csv(path, format!("missing column {name}")));
    let (id_col, region_col, x_col, y_col) = (need("id")?, need("region_id")?, need("x")?, need("y")?);
    let truth_col = col("ground_truth_demand");

    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let coord = |i: usize, name: &str| -> Result<f64> {
            let raw = rec.get(i).unwrap_or("");
            raw.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::csv(path, format!("line {line}: bad {name} {raw:?}")))
        };
        let ground_truth_demand = match truth_col.and_then(|i| rec.get(i)).map(str::trim) {
            None | Some("") => None,
            Some(raw) => Some(parse_nonneg(path, line, "ground_truth_demand", raw)?),
        };
        out.push(Facility {
            id: rec.get(id_col).unwrap_or("").trim().to_string(),
            region_id: rec.get(region_col).unwrap_or("").trim().to_string(),
            location: GeoPoint::new(coord(x_col, "x")?, coord(y_col, "y")?),
            ground_truth_demand,
        });
    }
    Ok(out)
}

fn polygon_json(poly: &Polygon) -> Value {
    let ring = |r: &Ring| -> Value {
        Value::Array(r.points().iter().map(|p| json!([p.x, p.y])).collect())
    };
    Value::Array(poly.rings().map(ring).collect())
}

fn geometry_json(geom: &MultiPolygon) -> Value {
    match geom.parts() {
        [single] => json!({"type": "Polygon", "coordinates": polygon_json(single)}),
        parts => json!({
            "type": "MultiPolygon",
            "coordinates": parts.iter().map(polygon_json).collect::<Vec<_>>(),
        }),
    }
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_regions(path: &Path, regions: &[Region], crs_note: &str) -> Result<()> {
    let features: Vec<Value> = regions
        .iter()
        .map(|r| {
            json!({
                "type": "Feature",
                "properties": {"id": r.id, "split": r.split.as_str()},
                "geometry": geometry_json(&r.boundary),
            })
        })
        .collect();
    write_json(
        path,
        &json!({"type": "FeatureCollection", "crs_note": crs_note, "features": features}),
    )
}

pub fn write_landuse(path: &Path, landuse: &LandUseMap) -> Result<()> {
    let features: Vec<Value> = landuse
        .patches
        .iter()
        .map(|p| {
            json!({
                "type": "Feature",
                "properties": {"class": landuse.class_set[p.class]},
                "geometry": geometry_json(&p.polygon),
            })
        })
        .collect();
    write_json(path, &json!({"type": "FeatureCollection", "features": features}))
}

pub fn write_indicators(path: &Path, regions: &[Region], gva_categories: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut header = vec![
        "region_id".to_string(),
        "population".to_string(),
        "total_volume".to_string(),
    ];
    header.extend(gva_categories.iter().map(|c| format!("gva_{c}")));
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    for r in regions {
        let mut rec = vec![r.id.clone(), r.population.to_string(), r.total_volume.to_string()];
        rec.extend(r.gva.iter().map(f64::to_string));
        w.write_record(&rec).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_facilities(path: &Path, facilities: &[Facility]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["id", "region_id", "x", "y", "ground_truth_demand"])
        .map_err(|e| Error::csv(path, e))?;
    for f in facilities {
        w.write_record([
            f.id.clone(),
            f.region_id.clone(),
            f.location.x.to_string(),
            f.location.y.to_string(),
            f.ground_truth_demand.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
