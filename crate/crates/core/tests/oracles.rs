//! Library results checked against small independent reimplementations and
//! brute-force scans.

use std::path::Path;

use gridalloc::allocator::kmeans;
use gridalloc::autodiff::{Tape, Tensor};
use gridalloc::encoder::{encode, init_params, EncoderConfig};
use gridalloc::geometry::{point_in_polygon, GeoPoint, MultiPolygon, Polygon};
use gridalloc::graph::{build_graph, HeteroGraph};
use gridalloc::grid::GridCell;
use gridalloc::ingest::{load_dataset, DatasetPaths, Region, Split};
use gridalloc::model::{init_model, predict_weights};
use gridalloc::predictor::{grouped_softmax, relation_cost};
use gridalloc::trainer::{edge_bucket_matrix, reconstruct, CategoryMapping};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn two_region_fixture_loads_with_hand_counted_contents() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/two_regions");
    let ds = load_dataset(&DatasetPaths {
        regions: &dir.join("regions.geojson"),
        landuse: &dir.join("landuse.geojson"),
        indicators: &dir.join("indicators.csv"),
        facilities: &dir.join("facilities.csv"),
    })
    .unwrap();
    assert_eq!(ds.regions.len(), 2);
    assert_eq!(ds.landuse.class_set.len(), 5);
    assert_eq!(ds.landuse.patches.len(), 6);
    assert_eq!(ds.facilities.len(), 7);
    assert_eq!(ds.gva_categories, vec!["industry", "commerce", "agriculture"]);
    assert_eq!(ds.crs_note.as_deref(), Some("local planar meters"));
    assert_eq!(ds.regions[1].split, Split::Test);
    assert_eq!(ds.regions[0].indicator_total(), 5500.0);
    assert_eq!(ds.facilities[1].ground_truth_demand, Some(50.5));
}

fn square_region(id: &str, x0: f64) -> Region {
    Region {
        id: id.into(),
        boundary: MultiPolygon(vec![Polygon::rect(x0, 0.0, x0 + 10.0, 10.0)]),
        population: 1.0,
        gva: vec![1.0],
        total_volume: 1.0,
        split: Split::Train,
    }
}

fn cell(id: String, region: &str, x: f64, y: f64, fractions: Vec<f64>) -> GridCell {
    let dominant = gridalloc::grid::argmax_first(&fractions);
    GridCell {
        id,
        region_id: region.into(),
        row: 0,
        col: 0,
        centroid: GeoPoint::new(x, y),
        side: 1.0,
        fractions,
        dominant,
    }
}

#[test]
fn containment_edges_match_brute_force() {
    let regions = vec![square_region("a", 0.0), square_region("b", 20.0)];
    let mut cells = Vec::new();
    for i in 0..3 {
        cells.push(cell(format!("a{i}"), "a", 1.0 + 3.0 * i as f64, 5.0, vec![1.0, 0.0]));
    }
    for i in 0..5 {
        cells.push(cell(format!("b{i}"), "b", 21.0 + 2.0 * i as f64, 2.0, vec![0.0, 1.0]));
    }
    let classes = vec!["x".to_string(), "y".to_string()];
    let (g, _) = build_graph(&regions, &cells, &["c".to_string()], &classes).unwrap();
    let mut brute = Vec::new();
    for (s, r) in regions.iter().enumerate() {
        for (a, c) in cells.iter().enumerate() {
            if point_in_polygon(&c.centroid, &r.boundary) {
                brute.push((s, a));
            }
        }
    }
    let mut got = g.edges_sa.clone();
    got.sort_unstable();
    assert_eq!(got, brute);
    assert_eq!(g.neighborhood(0).unwrap().len(), 3);
    assert_eq!(g.neighborhood(1).unwrap().len(), 5);
    let reversed: Vec<(usize, usize)> = g.edges_as.iter().map(|&(a, s)| (s, a)).collect();
    assert_eq!(reversed, g.edges_sa);
}

#[test]
fn three_layer_composition_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random_tensor(&mut rng, 4, 3);
    let mut params = vec![
        random_tensor(&mut rng, 3, 5),
        random_tensor(&mut rng, 1, 5),
        random_tensor(&mut rng, 5, 4),
        random_tensor(&mut rng, 4, 2),
    ];
    let run = |p: &[Tensor], grad: bool| -> (f64, Vec<Tensor>) {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let v: Vec<_> = p.iter().map(|t| tape.param(t.clone()).unwrap()).collect();
        let h = tape.matmul(xv, v[0]).unwrap();
        let h = tape.add_row(h, v[1]).unwrap();
        let h = tape.tanh(h).unwrap();
        let h = tape.matmul(h, v[2]).unwrap();
        let h = tape.sigmoid(h).unwrap();
        let h = tape.matmul(h, v[3]).unwrap();
        let h2 = tape.mul(h, h).unwrap();
        let loss = tape.sum(h2).unwrap();
        let value = tape.value(loss).item();
        if !grad {
            return (value, Vec::new());
        }
        let mut g = tape.backward(loss).unwrap();
        (value, v.iter().map(|&var| g.take(var).unwrap()).collect())
    };
    let (_, grads) = run(&params, true);
    let h = 1e-5;
    for (pi, g) in grads.iter().enumerate() {
        for i in 0..g.len() {
            let orig = params[pi].data()[i];
            params[pi].data_mut()[i] = orig + h;
            let up = run(&params, false).0;
            params[pi].data_mut()[i] = orig - h;
            let down = run(&params, false).0;
            params[pi].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = g.data()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            assert!(rel <= 1e-4, "param {pi}[{i}]: {a} vs {fd}");
        }
    }
}

#[test]
fn single_neighbor_attention_by_hand() {
    // one source, one agent, identity projections: the attention weight is
    // exactly 1, so each node's message is the other node's embedding
    let cfg = EncoderConfig {
        source_dim: 2,
        agent_dim: 2,
        latent_dim: 2,
        heads: 1,
        layers: 1,
    };
    let mut p = init_params(&cfg, 0).unwrap();
    let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    p.proj_source = eye.clone();
    p.proj_agent = eye.clone();
    let l = &mut p.layers[0];
    for rel in [&mut l.source_to_agent, &mut l.agent_to_source] {
        rel.query = eye.clone();
        rel.key = eye.clone();
        rel.value = eye.clone();
        rel.output = eye.clone();
    }
    l.ff_source = eye.clone();
    l.ff_agent = eye.clone();
    l.scale_source = Tensor::scalar(0.5);
    l.scale_agent = Tensor::scalar(2.0);
    let xs = [0.3, -0.7];
    let xa = [1.2, 0.4];
    let g = HeteroGraph::from_parts(
        Tensor::from_vec(1, 2, xs.to_vec()).unwrap(),
        Tensor::from_vec(1, 2, xa.to_vec()).unwrap(),
        vec![(0, 0)],
        vec!["s".into()],
        vec!["a".into()],
    )
    .unwrap();
    let (hs, ha) = encode(&g, &p).unwrap();
    for k in 0..2 {
        let want_s = xs[k] + 0.5 * xa[k].tanh();
        let want_a = xa[k] + 2.0 * xs[k].tanh();
        assert!((hs.get(0, k) - want_s).abs() < 1e-15);
        assert!((ha.get(0, k) - want_a).abs() < 1e-15);
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn predicted_weights_match_straight_line_reimplementation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (ns, na, d) = (3, 17, 8);
    let edges: Vec<(usize, usize)> = (0..na).map(|a| (a % ns, a)).collect();
    let mut sorted = edges.clone();
    sorted.sort_unstable();
    let g = HeteroGraph::from_parts(
        random_tensor(&mut rng, ns, 4),
        random_tensor(&mut rng, na, 6),
        sorted.clone(),
        (0..ns).map(|i| format!("s{i}")).collect(),
        (0..na).map(|i| format!("a{i}")).collect(),
    )
    .unwrap();
    let cfg = EncoderConfig {
        source_dim: 4,
        agent_dim: 6,
        latent_dim: d,
        heads: 2,
        layers: 2,
    };
    let model = init_model(&cfg, 77).unwrap();
    let tau = 0.7;
    let field = predict_weights(&g, &model, tau).unwrap();

    let (hs, ha) = encode(&g, &model.encoder).unwrap();
    let pw = &model.predictor;
    let mut costs = Vec::new();
    for &(s, a) in &g.edges_sa {
        let x: Vec<f64> = hs.row(s).iter().chain(ha.row(a)).copied().collect();
        let mut logit = pw.gate_bias.get(0, 0);
        for j in 0..d {
            let mut pre = pw.hidden_bias.get(0, j);
            for (i, xi) in x.iter().enumerate() {
                pre += xi * pw.hidden.get(i, j);
            }
            logit += pre.max(0.0) * pw.gate.get(j, 0);
        }
        let dist: f64 = hs.row(s).iter().zip(ha.row(a)).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        costs.push(sigmoid(logit) * dist);
    }
    let lib_costs = relation_cost(&hs, &ha, &g.edges_sa, pw).unwrap();
    for (c, l) in costs.iter().zip(&lib_costs) {
        assert!((c - l).abs() <= 1e-12 * (1.0 + c.abs()));
    }
    for s in 0..ns {
        let idx: Vec<usize> = (0..g.n_edges()).filter(|&e| g.edges_sa[e].0 == s).collect();
        let z: f64 = idx.iter().map(|&e| (-costs[e] / tau).exp()).sum();
        for &e in &idx {
            let want = (-costs[e] / tau).exp() / z;
            assert!((field.weights[e] - want).abs() <= 1e-12, "edge {e}");
        }
    }
}

#[test]
fn ten_cell_reconstruction_matches_category_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let classes: Vec<String> = ["residential", "industrial", "commercial", "agricultural", "other"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mapping = CategoryMapping::default();
    let dominant: Vec<usize> = (0..10).map(|_| rng.gen_range(0..5)).collect();
    let mut feats = Vec::new();
    for &k in &dominant {
        feats.extend([0.2; 5]);
        feats.extend((0..5).map(|j| if j == k { 1.0 } else { 0.0 }));
    }
    let edges: Vec<(usize, usize)> = (0..10).map(|a| (usize::from(a >= 4), a)).collect();
    let g = HeteroGraph::from_parts(
        Tensor::zeros(2, 4),
        Tensor::from_vec(10, 10, feats).unwrap(),
        edges.clone(),
        vec!["r0".into(), "r1".into()],
        (0..10).map(|i| format!("c{i}")).collect(),
    )
    .unwrap();
    let costs: Vec<f64> = (0..10).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let field = grouped_softmax(&costs, &g.edge_sources(), 1.0).unwrap();
    let buckets = edge_bucket_matrix(&g, &mapping.class_buckets(&classes), mapping.n_buckets());
    let got = reconstruct(&field, &buckets, 2);

    let mut want = vec![vec![0.0; 5]; 2];
    for (e, &(s, a)) in g.edges_sa.iter().enumerate() {
        let bucket = match classes[dominant[a]].as_str() {
            "residential" => 0,
            "industrial" => 1,
            "commercial" => 2,
            "agricultural" => 3,
            _ => 4,
        };
        want[s][bucket] += field.weights[e];
    }
    for s in 0..2 {
        for k in 0..5 {
            assert!((got[s][k] - want[s][k]).abs() < 1e-15);
        }
        assert!((got[s].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn two_blobs_match_the_best_two_partition() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut pts = Vec::new();
    for center in [(0.0, 0.0), (100.0, 40.0)] {
        for _ in 0..5 {
            pts.push(GeoPoint::new(center.0 + rng.gen_range(-3.0..3.0), center.1 + rng.gen_range(-3.0..3.0)));
        }
    }
    let sse = |mask: u32| -> f64 {
        let mut total = 0.0;
        for side in [0, 1] {
            let m: Vec<&GeoPoint> = (0..10).filter(|i| (mask >> i) & 1 == side).map(|i| &pts[i]).collect();
            if m.is_empty() {
                return f64::INFINITY;
            }
            let cx = m.iter().map(|p| p.x).sum::<f64>() / m.len() as f64;
            let cy = m.iter().map(|p| p.y).sum::<f64>() / m.len() as f64;
            total += m.iter().map(|p| (p.x - cx).powi(2) + (p.y - cy).powi(2)).sum::<f64>();
        }
        total
    };
    let best = (1..(1u32 << 10) - 1).min_by(|a, b| sse(*a).total_cmp(&sse(*b))).unwrap();
    let c = kmeans(&pts, 2, 4).unwrap();
    let same = |i: usize, j: usize| ((best >> i) & 1) == ((best >> j) & 1);
    for i in 0..10 {
        for j in 0..10 {
            assert_eq!(c.labels[i] == c.labels[j], same(i, j));
        }
    }
    assert!((c.sse_history.last().unwrap() - sse(best)).abs() < 1e-9);
}
