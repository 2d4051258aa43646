//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Criteria run one after another so the timing and memory
//! checks are not disturbed by each other.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use gridalloc::allocator::{
    aggregate_region, assign_civd, assign_vd, read_allocations, Method, RegionPartition,
};
use gridalloc::autodiff::{Tape, Tensor};
use gridalloc::encoder::EncoderConfig;
use gridalloc::geometry::{GeoPoint, MultiPolygon, Polygon};
use gridalloc::graph::{build_graph, HeteroGraph};
use gridalloc::grid::{argmax_first, generate_grids, read_cells, GridCell, GridConfig};
use gridalloc::ingest::{load_dataset, DatasetPaths, LandUseMap, LandUsePatch, Region, Split};
use gridalloc::model::{init_model, predict_weights, ModelParams};
use gridalloc::predictor::{grouped_softmax, read_weights_csv};
use gridalloc::trainer::{
    edge_bucket_matrix, kl_loss, reconstruct, train, CategoryMapping, LossContext, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SCALE_CHILD: &str = "--scale-child";

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn random_graph(rng: &mut ChaCha8Rng, max_sources: usize, max_agents: usize, ds: usize, da: usize) -> HeteroGraph {
    let ns = rng.gen_range(1..=max_sources);
    let na = rng.gen_range(1..=max_agents);
    let mut edges: Vec<(usize, usize)> = (0..na).map(|a| (rng.gen_range(0..ns), a)).collect();
    edges.sort_unstable();
    let feats = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    };
    HeteroGraph::from_parts(
        feats(rng, ns, ds),
        feats(rng, na, da),
        edges,
        (0..ns).map(|i| format!("s{i}")).collect(),
        (0..na).map(|i| format!("a{i}")).collect(),
    )
    .unwrap()
}

fn scale_params(p: &mut ModelParams, k: f64) {
    p.visit_mut(&mut |_, t| t.data_mut().iter_mut().for_each(|x| *x *= k));
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = EncoderConfig {
        source_dim: 4,
        agent_dim: 10,
        latent_dim: 16,
        heads: 4,
        layers: 2,
    };
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let g = random_graph(&mut rng, 5, 200, 4, 10);
        let mut params = init_model(&cfg, i).unwrap();
        scale_params(&mut params, rng.gen_range(0.5..4.0));
        let tau = 10f64.powf(rng.gen_range(-2.0..1.0));
        let field = predict_weights(&g, &params, tau).unwrap();
        assert!(field.weights.iter().all(|w| w.is_finite() && *w >= 0.0));
        worst = worst.max(field.max_normalization_error());
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-9 && secs < 10.0,
        format!("1000 graphs, max |sum - 1| = {worst:.2e}, {secs:.1}s (limits 1e-9, 10s)"),
    )
}

fn gradient_fixture() -> (LossContext, ModelParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let classes: Vec<String> = ["residential", "industrial", "commercial", "agricultural", "other"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let gva: Vec<String> = ["industry", "commerce", "agriculture"].iter().map(|s| s.to_string()).collect();
    let regions: Vec<Region> = (0..2)
        .map(|i| Region {
            id: format!("r{i}"),
            boundary: MultiPolygon(vec![Polygon::rect(0.0, 0.0, 1.0, 1.0)]),
            population: rng.gen_range(1.0..5.0),
            gva: (0..3).map(|_| rng.gen_range(0.5..3.0)).collect(),
            total_volume: 10.0,
            split: Split::Train,
        })
        .collect();
    let cells: Vec<GridCell> = (0..10)
        .map(|i| {
            let mut fractions: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..1.0)).collect();
            let s: f64 = fractions.iter().sum();
            fractions.iter_mut().for_each(|f| *f /= s);
            GridCell {
                id: format!("c{i}"),
                region_id: format!("r{}", i / 5),
                row: 0,
                col: i % 5,
                centroid: GeoPoint::new(i as f64, 0.0),
                side: 1.0,
                dominant: argmax_first(&fractions),
                fractions,
            }
        })
        .collect();
    let (graph, _) = build_graph(&regions, &cells, &gva, &classes).unwrap();
    let tc = TrainConfig {
        latent_dim: 8,
        heads: 2,
        layers: 2,
        ..Default::default()
    };
    let ctx = LossContext::new(&graph, &regions, &gva, &classes, &CategoryMapping::default(), &tc).unwrap();
    let params = init_model(&tc.encoder_config(&graph), 9).unwrap();
    (ctx, params)
}

fn perturbed(p: &ModelParams, index: usize, delta: f64) -> ModelParams {
    let mut q = p.clone();
    let mut seen = 0;
    q.visit_mut(&mut |_, t| {
        let n = t.len();
        if index >= seen && index < seen + n {
            t.data_mut()[index - seen] += delta;
        }
        seen += n;
    });
    q
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let (ctx, params) = gradient_fixture();
    let (_, grads) = ctx.loss_and_grad(&params).unwrap();
    let mut analytic = Vec::new();
    grads.visit(&mut |_, t| analytic.extend_from_slice(t.data()));
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let up = ctx.loss(&perturbed(&params, i, h)).unwrap();
        let down = ctx.loss(&perturbed(&params, i, -h)).unwrap();
        let fd = (up - down) / (2.0 * h);
        // absolute floor of 1e-8 on the error, i.e. gradients below 1e-4 compare in absolute terms
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
        worst = worst.max(rel);
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-4 && secs < 60.0,
        format!(
            "{} parameters, max relative error {worst:.2e}, {secs:.1}s (limits 1e-4, 60s)",
            analytic.len()
        ),
    )
}

fn criterion_3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut self_worst: f64 = 0.0;
    for _ in 0..1000 {
        let k = rng.gen_range(2..8);
        let mut p: Vec<f64> = (0..k).map(|_| if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.0..1.0) }).collect();
        p[0] += 1e-3;
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= s);
        self_worst = self_worst.max(kl_loss(&[p.clone()], &[p.clone()], 1e-8));
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_vec(1, k, p.clone()).unwrap()).unwrap();
        let l = tape.kl_div(Tensor::from_vec(1, k, p).unwrap(), q, 1e-8).unwrap();
        self_worst = self_worst.max(tape.value(l).item());
    }
    let hand0 = kl_loss(&[vec![1.0, 0.0]], &[vec![0.5, 0.5]], 0.0);
    let hand8 = kl_loss(&[vec![1.0, 0.0]], &[vec![0.5, 0.5]], 1e-8);
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::from_vec(1, 2, vec![0.5, 0.5]).unwrap()).unwrap();
    let l = tape.kl_div(Tensor::from_vec(1, 2, vec![1.0, 0.0]).unwrap(), q, 1e-8).unwrap();
    let hand_tape = tape.value(l).item();
    let ln2 = std::f64::consts::LN_2;
    let hand_err = [hand0, hand8, hand_tape].iter().map(|v| (v - ln2).abs()).fold(0.0, f64::max);
    verdict(
        self_worst <= 1e-6 && hand_err <= 1e-12,
        format!("max loss(P,P) = {self_worst:.2e} at eps 1e-8; hand case |loss - ln 2| = {hand_err:.1e}"),
    )
}

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mapping = CategoryMapping::default();
    let classes: Vec<String> = ["residential", "industrial", "commercial", "agricultural", "other"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let ns = rng.gen_range(1..=5);
        let na = rng.gen_range(1..=200);
        let mut edges: Vec<(usize, usize)> = (0..na).map(|a| (rng.gen_range(0..ns), a)).collect();
        edges.sort_unstable();
        let mut feats = Vec::with_capacity(na * 10);
        for _ in 0..na {
            let k = rng.gen_range(0..5);
            feats.extend([0.0; 5]);
            feats.extend((0..5).map(|j| if j == k { 1.0 } else { 0.0 }));
        }
        let g = HeteroGraph::from_parts(
            Tensor::zeros(ns, 4),
            Tensor::from_vec(na, 10, feats).unwrap(),
            edges,
            (0..ns).map(|i| format!("s{i}")).collect(),
            (0..na).map(|i| format!("a{i}")).collect(),
        )
        .unwrap();
        let scale = 10f64.powf(rng.gen_range(-1.0..2.0));
        let costs: Vec<f64> = (0..na).map(|_| rng.gen_range(0.0..scale)).collect();
        let field = grouped_softmax(&costs, &g.edge_sources(), rng.gen_range(0.05..2.0)).unwrap();
        let buckets = edge_bucket_matrix(&g, &mapping.class_buckets(&classes), mapping.n_buckets());
        let isolated = g.isolated_sources();
        for (s, p) in reconstruct(&field, &buckets, ns).iter().enumerate() {
            if !isolated.contains(&s) {
                worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    verdict(worst <= 1e-9, format!("1000 random weight fields, max |sum_k P_hat - 1| = {worst:.2e}"))
}

fn brute_nearest(p: &GeoPoint, targets: &[GeoPoint]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, t) in targets.iter().enumerate() {
        let d = (p.x - t.x) * (p.x - t.x) + (p.y - t.y) * (p.y - t.y);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

fn criterion_5() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cells: Vec<GeoPoint> = (0..1000)
        .map(|_| GeoPoint::new(rng.gen_range(0.0..5000.0), rng.gen_range(0.0..5000.0)))
        .collect();
    let weights: Vec<f64> = (0..1000).map(|_| rng.gen_range(0.0..1.0)).collect();
    let region = Region {
        id: "r".into(),
        boundary: MultiPolygon(vec![Polygon::rect(0.0, 0.0, 5000.0, 5000.0)]),
        population: 1.0,
        gva: vec![],
        total_volume: 1234.5,
        split: Split::Train,
    };
    let mut mismatches = 0;
    let mut civd_vd_equal = true;
    for set in 0..20 {
        let n = rng.gen_range(1..=30);
        let facs: Vec<GeoPoint> = (0..n)
            .map(|_| GeoPoint::new(rng.gen_range(0.0..5000.0), rng.gen_range(0.0..5000.0)))
            .collect();
        let vd = assign_vd(&cells, &facs).unwrap();
        let k = rng.gen_range(1..=n);
        let (civd, clustering) = assign_civd(&cells, &facs, k, set).unwrap();
        let centers: Vec<GeoPoint> = clustering.centers.iter().map(|c| c.centroid).collect();
        for (i, c) in cells.iter().enumerate() {
            mismatches += usize::from(vd[i] != brute_nearest(c, &facs));
            mismatches += usize::from(civd[i] != brute_nearest(c, &centers));
        }
        let (civd_n, clustering_n) = assign_civd(&cells, &facs, n, set).unwrap();
        let part = RegionPartition {
            cells: (0..cells.len()).collect(),
            facilities: (0..n).collect(),
            vd: vd.clone(),
            civd: civd_n,
            clustering: Some(clustering_n),
        };
        for (v, c) in [(Method::Vd, Method::Civd), (Method::VdGpm, Method::CivdGpm)] {
            let a = aggregate_region(v, &region, &part, &weights).unwrap();
            let b = aggregate_region(c, &region, &part, &weights).unwrap();
            civd_vd_equal &= a == b;
        }
    }
    verdict(
        mismatches == 0 && civd_vd_equal,
        format!(
            "1000 cells x 20 sets: {mismatches} assignment mismatches; CIVD with k=n equals VD exactly: {civd_vd_equal}"
        ),
    )
}

/// Artifacts of the shipped synthetic scenario, produced by the quickstart run.
struct ScenarioRun {
    out: PathBuf,
    secs: f64,
}

fn quickstart(out: &Path, seed: Option<u64>, epochs: Option<i64>) -> (PathBuf, f64) {
    let config = workspace_root().join("configs/quickstart.toml");
    let config = match epochs {
        None => config,
        Some(e) => {
            let mut v: toml::Value = toml::from_str(&fs::read_to_string(&config).unwrap()).unwrap();
            v["train"]["epochs"] = toml::Value::Integer(e);
            let p = out.with_extension("toml");
            fs::write(&p, toml::to_string(&v).unwrap()).unwrap();
            p
        }
    };
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gridalloc"));
    cmd.arg("--config").arg(&config).arg("--out").arg(out);
    if let Some(s) = seed {
        cmd.arg("--seed").arg(s.to_string());
    }
    let start = Instant::now();
    let res = cmd.arg("full-run").output().expect("gridalloc runs");
    let secs = start.elapsed().as_secs_f64();
    assert!(res.status.success(), "full-run failed: {}", String::from_utf8_lossy(&res.stderr));
    (out.to_path_buf(), secs)
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn load_run_dataset(out: &Path) -> gridalloc::ingest::Dataset {
    let d = out.join("data");
    load_dataset(&DatasetPaths {
        regions: &d.join("regions.geojson"),
        landuse: &d.join("landuse.geojson"),
        indicators: &d.join("indicators.csv"),
        facilities: &d.join("facilities.csv"),
    })
    .unwrap()
}

fn criterion_6(run: &ScenarioRun) -> Verdict {
    let ds = load_run_dataset(&run.out);
    let results = read_allocations(&run.out.join("allocations.csv")).unwrap();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for res in &results {
        for r in &ds.regions {
            let sum: f64 = res.allocations.iter().filter(|a| a.region_id == r.id).map(|a| a.volume).sum();
            worst = worst.max((sum - r.total_volume).abs() / r.total_volume);
            checked += 1;
        }
    }
    verdict(
        worst <= 1e-6 && results.len() == Method::ALL.len(),
        format!(
            "{} methods x {} regions ({checked} sums), max relative deviation {worst:.2e} (limit 1e-6)",
            results.len(),
            ds.regions.len()
        ),
    )
}

fn criterion_7(run: &ScenarioRun) -> Verdict {
    let trace = csv_rows(&run.out.join("loss_trace.csv"));
    let initial: f64 = trace[0][1].parse().unwrap();
    let last: f64 = trace.last().unwrap()[1].parse().unwrap();
    let epochs = trace.len();
    let mut train_min = f64::INFINITY;
    let mut test_min = f64::INFINITY;
    for row in csv_rows(&run.out.join("weight_quality.csv")) {
        let rho: f64 = row[2].parse().unwrap_or(f64::NAN);
        let slot = if row[1] == "train" { &mut train_min } else { &mut test_min };
        *slot = if rho.is_nan() { f64::NAN } else { slot.min(rho) };
    }
    let mut worst_ratio: f64 = 0.0;
    for row in csv_rows(&run.out.join("comparison.csv")) {
        if row[0] == "average" {
            continue;
        }
        let civd: f64 = row[5].parse().unwrap();
        let gnn: f64 = row[7].parse().unwrap();
        worst_ratio = worst_ratio.max(gnn / civd);
    }
    let pass = epochs == 500
        && last < 0.1 * initial
        && train_min >= 0.8
        && test_min >= 0.6
        && worst_ratio <= 0.8
        && run.secs < 300.0;
    verdict(
        pass,
        format!(
            "{epochs} epochs, loss {initial:.4} -> {last:.2e} (ratio {:.1e}); min Spearman train {train_min:.3}, held-out {test_min:.3}; \
             max CIVD-GNN-GPM / CIVD RMSE {worst_ratio:.3}; full run {:.0}s",
            last / initial,
            run.secs
        ),
    )
}

fn scale_workload() -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let side = 22_400.0;
    let classes: Vec<String> = ["residential", "industrial", "commercial", "agricultural", "other"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let blocks = 20;
    let b = side / blocks as f64;
    let mut patches = Vec::new();
    for i in 0..blocks {
        for j in 0..blocks {
            patches.push(LandUsePatch {
                polygon: MultiPolygon(vec![Polygon::rect(
                    i as f64 * b,
                    j as f64 * b,
                    (i + 1) as f64 * b,
                    (j + 1) as f64 * b,
                )]),
                class: rng.gen_range(0..5),
            });
        }
    }
    let landuse = LandUseMap { patches, class_set: classes.clone() };
    let region = Region {
        id: "big".into(),
        boundary: MultiPolygon(vec![Polygon::rect(0.0, 0.0, side, side)]),
        population: 5.0e5,
        gva: vec![2.0e5, 1.5e5, 1.0e5],
        total_volume: 1000.0,
        split: Split::Train,
    };
    let gva: Vec<String> = ["industry", "commerce", "agriculture"].iter().map(|s| s.to_string()).collect();
    let start = Instant::now();
    let cells = generate_grids(
        std::slice::from_ref(&region),
        &landuse,
        &GridConfig {
            target_cell_count: 50_000,
            quantum: 1.0,
        },
    )
    .unwrap();
    let (graph, _) = build_graph(std::slice::from_ref(&region), &cells, &gva, &classes).unwrap();
    let tc = TrainConfig {
        epochs: 1,
        latent_dim: 64,
        heads: 4,
        layers: 2,
        ..Default::default()
    };
    let ctx = LossContext::new(&graph, &[region], &gva, &classes, &CategoryMapping::default(), &tc).unwrap();
    let outcome = train(&ctx, &tc.encoder_config(&graph), &tc).unwrap();
    assert!(outcome.final_loss.is_finite());
    (cells.len(), start.elapsed().as_secs_f64())
}

fn peak_rss_kb() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

fn criterion_8() -> Verdict {
    let exe = std::env::current_exe().unwrap();
    let out = Command::new(exe).arg(SCALE_CHILD).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    if !out.status.success() {
        return verdict(false, format!("scale run failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
    let cells = v["cells"].as_u64().unwrap();
    let secs = v["seconds"].as_f64().unwrap();
    let mem = v["peak_rss_kb"].as_u64();
    let gb = mem.map(|k| k as f64 / (1024.0 * 1024.0));
    verdict(
        cells >= 50_000 && secs < 60.0 && gb.is_some_and(|g| g < 4.0),
        format!(
            "{cells} cells, grid + graph + 1 epoch (d=64, H=4, L=2) in {secs:.1}s, peak memory {} (limits 60s, 4 GB)",
            gb.map_or("unknown".into(), |g| format!("{g:.2} GB"))
        ),
    )
}

fn criterion_9(scratch: &Path) -> Verdict {
    let (a, _) = quickstart(&scratch.join("det_a"), Some(7), Some(40));
    let (b, _) = quickstart(&scratch.join("det_b"), Some(7), Some(40));
    let ca = fs::read(a.join("comparison.csv")).unwrap();
    let cb = fs::read(b.join("comparison.csv")).unwrap();
    verdict(
        ca == cb,
        format!("two full-runs with --seed 7 (40 epochs): comparison.csv identical = {}", ca == cb),
    )
}

fn criterion_10(run: &ScenarioRun) -> Verdict {
    let ds = load_run_dataset(&run.out);
    let grid = GridConfig {
        target_cell_count: 400,
        quantum: 1.0,
    };
    let cells = read_cells(&run.out.join("cells.json"), &ds.landuse.class_set, &grid).unwrap();
    let weights = read_weights_csv(&run.out.join("weights.csv")).unwrap();
    let mapping = CategoryMapping::default();
    let buckets = mapping.class_buckets(&ds.landuse.class_set);
    let residual = mapping.residual_bucket();
    let (mut other, mut mapped) = (Vec::new(), Vec::new());
    for c in &cells {
        let w = weights[&c.id];
        if buckets[c.dominant] == residual {
            other.push(w);
        } else {
            mapped.push(w);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mo, mm) = (mean(&other), mean(&mapped));
    verdict(
        !other.is_empty() && mo < 0.25 * mm,
        format!(
            "mean weight over {} unmapped-class cells {mo:.3e} vs {} mapped-class cells {mm:.3e} (ratio {:.2e}, limit 0.25)",
            other.len(),
            mapped.len(),
            mo / mm
        ),
    )
}

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            verdict(false, format!("error: {msg}"))
        }
    }
}

fn main() {
    if std::env::args().any(|a| a == SCALE_CHILD) {
        let (cells, secs) = scale_workload();
        let mem = peak_rss_kb();
        println!("{}", serde_json::json!({"cells": cells, "seconds": secs, "peak_rss_kb": mem}));
        return;
    }
    // libtest flags such as --list or a name filter are not meaningful here
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let scratch = tempfile::tempdir().unwrap();
    let run = guarded(|| {
        let (out, secs) = quickstart(&scratch.path().join("quickstart"), None, None);
        SCENARIO.with(|s| *s.borrow_mut() = Some(ScenarioRun { out, secs }));
        verdict(true, String::new())
    });
    let with_run = |f: fn(&ScenarioRun) -> Verdict| -> Verdict {
        if !run.pass {
            return verdict(false, format!("quickstart run failed: {}", run.detail));
        }
        SCENARIO.with(|s| guarded(|| f(s.borrow().as_ref().unwrap())))
    };

    let mut results: Vec<(u8, &str, Verdict)> = Vec::new();
    results.push((1, "weight normalization", guarded(criterion_1)));
    results.push((2, "gradient fidelity", guarded(criterion_2)));
    results.push((3, "KL correctness", guarded(criterion_3)));
    results.push((4, "reconstruction conservation", guarded(criterion_4)));
    results.push((5, "partition oracle", guarded(criterion_5)));
    results.push((6, "allocation conservation", with_run(criterion_6)));
    results.push((7, "synthetic recovery", with_run(criterion_7)));
    results.push((8, "scale check", guarded(criterion_8)));
    results.push((9, "determinism", guarded(|| criterion_9(scratch.path()))));
    results.push((10, "plausibility of unmapped-class weights", with_run(criterion_10)));

    println!();
    let mut failed = 0;
    for (id, name, v) in &results {
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("acceptance {id:>2} [{tag}] {name}: {}", v.detail);
        failed += usize::from(!v.pass);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

thread_local! {
    static SCENARIO: std::cell::RefCell<Option<ScenarioRun>> = const { std::cell::RefCell::new(None) };
}
