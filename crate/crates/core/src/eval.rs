//! RMSE against ground-truth demands, the method comparison table and
//! weight-quality scores against known cell weights.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::allocator::{AllocationResult, FacilityAllocation, Method};
use crate::error::{Error, Result};
use crate::ingest::{Facility, Region};

/// `√(mean (allocated − truth)²)` over the given allocations.
pub fn rmse(allocations: &[FacilityAllocation], facilities: &[Facility]) -> Result<f64> {
    let truth: HashMap<&str, Option<f64>> = facilities
        .iter()
        .map(|f| (f.id.as_str(), f.ground_truth_demand))
        .collect();
    let mut missing = Vec::new();
    let mut sum = 0.0;
    for a in allocations {
        match truth.get(a.facility_id.as_str()) {
            Some(Some(t)) => sum += (a.volume - t).powi(2),
            _ => missing.push(a.facility_id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingGroundTruth(missing));
    }
    if allocations.is_empty() {
        return Ok(0.0);
    }
    Ok((sum / allocations.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub region_id: String,
    pub split: String,
    /// In [`Method::COMPARED`] order.
    pub rmse: [f64; 6],
    /// Percent RMSE reduction of VD-GNN-GPM relative to VD-GPM.
    pub vd_gain: Option<f64>,
    /// Percent RMSE reduction of CIVD-GNN-GPM relative to CIVD-GPM.
    pub civd_gain: Option<f64>,
}

impl ComparisonRow {
    pub fn get(&self, method: Method) -> Option<f64> {
        Method::COMPARED.iter().position(|&m| m == method).map(|i| self.rmse[i])
    }
}

/// `(baseline − candidate) / baseline × 100`, undefined for a zero baseline.
pub fn percent_change(baseline: f64, candidate: f64) -> Option<f64> {
    (baseline != 0.0).then(|| (baseline - candidate) / baseline * 100.0)
}

/// One row per region plus a trailing `average` row.
pub fn comparison_rows(
    results: &[AllocationResult],
    regions: &[Region],
    facilities: &[Facility],
) -> Result<Vec<ComparisonRow>> {
    // report every facility lacking truth at once, not region by region
    let known: HashMap<&str, bool> = facilities
        .iter()
        .map(|f| (f.id.as_str(), f.ground_truth_demand.is_some()))
        .collect();
    let mut missing: Vec<String> = Vec::new();
    for a in results.iter().flat_map(|r| &r.allocations) {
        if !known.get(a.facility_id.as_str()).copied().unwrap_or(false) && !missing.contains(&a.facility_id) {
            missing.push(a.facility_id.clone());
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingGroundTruth(missing));
    }
    let mut rows = Vec::with_capacity(regions.len() + 1);
    for region in regions {
        let mut rmses = [0.0; 6];
        for (slot, method) in rmses.iter_mut().zip(Method::COMPARED) {
            let res = results
                .iter()
                .find(|r| r.method == method)
                .ok_or_else(|| Error::Allocation(format!("no {method} allocation to evaluate")))?;
            let allocs: Vec<FacilityAllocation> = res
                .allocations
                .iter()
                .filter(|a| a.region_id == region.id)
                .cloned()
                .collect();
            *slot = rmse(&allocs, facilities)?;
        }
        rows.push(ComparisonRow {
            region_id: region.id.clone(),
            split: region.split.as_str().to_string(),
            vd_gain: percent_change(rmses[1], rmses[2]),
            civd_gain: percent_change(rmses[4], rmses[5]),
            rmse: rmses,
        });
    }
    if !rows.is_empty() {
        let n = rows.len() as f64;
        let mut avg = [0.0; 6];
        for r in &rows {
            for (a, v) in avg.iter_mut().zip(r.rmse) {
                *a += v / n;
            }
        }
        let mean_gain = |f: fn(&ComparisonRow) -> Option<f64>| {
            let g: Vec<f64> = rows.iter().filter_map(f).collect();
            (!g.is_empty()).then(|| g.iter().sum::<f64>() / g.len() as f64)
        };
        rows.push(ComparisonRow {
            region_id: "average".into(),
            split: "all".into(),
            rmse: avg,
            vd_gain: mean_gain(|r| r.vd_gain),
            civd_gain: mean_gain(|r| r.civd_gain),
        });
    }
    Ok(rows)
}

fn header() -> Vec<String> {
    let mut h = vec!["region_id".to_string(), "split".to_string()];
    h.extend(Method::COMPARED.iter().map(|m| m.tag().to_string()));
    h.push("VD-GNN-GPM_vs_VD-GPM_pct".into());
    h.push("CIVD-GNN-GPM_vs_CIVD-GPM_pct".into());
    h
}

fn cells(row: &ComparisonRow) -> Vec<String> {
    let pct = |g: Option<f64>| g.map_or("NA".to_string(), |v| format!("{v:.6}"));
    let mut c = vec![row.region_id.clone(), row.split.clone()];
    c.extend(row.rmse.iter().map(|v| format!("{v:.6}")));
    c.push(pct(row.vd_gain));
    c.push(pct(row.civd_gain));
    c
}

pub fn write_comparison_csv(path: &Path, rows: &[ComparisonRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(header()).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.write_record(cells(r)).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Column-aligned plain-text rendering of the comparison table.
pub fn format_comparison_table(rows: &[ComparisonRow]) -> String {
    let mut table = vec![header()];
    table.extend(rows.iter().map(cells));
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &table {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (v, &w))| if i < 2 { format!("{v:<w$}") } else { format!("{v:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

pub fn write_comparison_txt(path: &Path, rows: &[ComparisonRow]) -> Result<()> {
    std::fs::write(path, format_comparison_table(rows)).map_err(|e| Error::io(path, e))
}

/// Average ranks, ties sharing the mean of their positions (1-based).
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

fn top_set(v: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx.sort_unstable();
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightQuality {
    pub spearman: Option<f64>,
    /// Share of the top 10% cells by planted weight that are also in the top
    /// 10% by predicted weight (ties broken by cell order).
    pub top_decile_overlap: f64,
}

pub fn weight_quality(predicted: &[f64], planted: &[f64]) -> Result<WeightQuality> {
    if predicted.len() != planted.len() {
        return Err(Error::Model(format!(
            "{} predicted weights vs {} planted",
            predicted.len(),
            planted.len()
        )));
    }
    let n_top = ((predicted.len() as f64) * 0.1).ceil() as usize;
    let overlap = if n_top == 0 {
        1.0
    } else {
        let a = top_set(predicted, n_top);
        let b = top_set(planted, n_top);
        a.iter().filter(|i| b.binary_search(i).is_ok()).count() as f64 / n_top as f64
    };
    Ok(WeightQuality {
        spearman: spearman(predicted, planted),
        top_decile_overlap: overlap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fac(id: &str, truth: Option<f64>) -> Facility {
        Facility {
            id: id.into(),
            location: crate::geometry::GeoPoint::new(0.0, 0.0),
            region_id: "r".into(),
            ground_truth_demand: truth,
        }
    }

    fn alloc(id: &str, v: f64) -> FacilityAllocation {
        FacilityAllocation {
            region_id: "r".into(),
            facility_id: id.into(),
            volume: v,
        }
    }

    #[test]
    fn rmse_hand_values() {
        let f = [fac("a", Some(10.0)), fac("b", Some(0.0))];
        assert_eq!(rmse(&[alloc("a", 10.0), alloc("b", 0.0)], &f).unwrap(), 0.0);
        let r = rmse(&[alloc("a", 13.0), alloc("b", 4.0)], &f).unwrap();
        assert!((r - 12.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn rmse_lists_missing_truth() {
        let f = [fac("a", None), fac("b", Some(1.0)), fac("c", None)];
        let err = rmse(&[alloc("a", 1.0), alloc("b", 1.0), alloc("c", 1.0)], &f).unwrap_err();
        match err {
            Error::MissingGroundTruth(ids) => assert_eq!(ids, vec!["a", "c"]),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn spearman_extremes_and_ties() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&a, &a), Some(1.0));
        assert_eq!(spearman(&a, &[4.0, 3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&a, &[5.0; 4]), None);
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn identical_weights_overlap_fully() {
        let w: Vec<f64> = (0..40).map(|i| (i * 7 % 13) as f64).collect();
        let q = weight_quality(&w, &w).unwrap();
        assert_eq!(q.spearman, Some(1.0));
        assert_eq!(q.top_decile_overlap, 1.0);
    }

    #[test]
    fn percent_change_sign_and_zero_baseline() {
        assert_eq!(percent_change(10.0, 8.0), Some(20.0));
        assert_eq!(percent_change(0.0, 1.0), None);
    }
}
