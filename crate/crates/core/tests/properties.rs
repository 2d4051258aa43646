use gridalloc::allocator::{aggregate_region, assign_vd, kmeans, nearest, Method, RegionPartition};
use gridalloc::autodiff::Tensor;
use gridalloc::eval::{rmse, spearman};
use gridalloc::geometry::{GeoPoint, MultiPolygon, Polygon};
use gridalloc::ingest::{Facility, Region, Split};
use gridalloc::predictor::grouped_softmax;
use gridalloc::trainer::{kl_loss, reconstruct};
use proptest::prelude::*;

fn brute_nearest(p: &GeoPoint, targets: &[GeoPoint]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, t) in targets.iter().enumerate() {
        let d = (p.x - t.x).powi(2) + (p.y - t.y).powi(2);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

fn points(max: usize) -> impl Strategy<Value = Vec<GeoPoint>> {
    prop::collection::vec((-1e3..1e3f64, -1e3..1e3f64), 1..max)
        .prop_map(|v| v.into_iter().map(|(x, y)| GeoPoint::new(x, y)).collect())
}

fn distribution(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..1.0f64, k).prop_map(|mut v| {
        v[0] += 1e-3;
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
        v
    })
}

fn region(volume: f64) -> Region {
    Region {
        id: "r".into(),
        boundary: MultiPolygon(vec![Polygon::rect(0.0, 0.0, 1.0, 1.0)]),
        population: 1.0,
        gva: vec![],
        total_volume: volume,
        split: Split::Train,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn grouped_softmax_normalizes_every_group(
        edges in prop::collection::vec((0usize..6, -50.0..50.0f64), 1..300),
        tau in 0.01..10.0f64,
    ) {
        let mut edges = edges;
        edges.sort_by_key(|e| e.0);
        let groups: Vec<usize> = edges.iter().map(|e| e.0).collect();
        let costs: Vec<f64> = edges.iter().map(|e| e.1).collect();
        let field = grouped_softmax(&costs, &groups, tau).unwrap();
        prop_assert!(field.max_normalization_error() <= 1e-9);
        prop_assert!(field.weights.iter().all(|w| *w >= 0.0 && *w <= 1.0));
    }

    #[test]
    fn reconstruction_is_a_distribution(
        edges in prop::collection::vec((0usize..4, -20.0..20.0f64, 0usize..5), 1..200),
    ) {
        let mut edges = edges;
        edges.sort_by_key(|e| e.0);
        let groups: Vec<usize> = edges.iter().map(|e| e.0).collect();
        let costs: Vec<f64> = edges.iter().map(|e| e.1).collect();
        let field = grouped_softmax(&costs, &groups, 0.5).unwrap();
        let rows: Vec<Vec<f64>> = edges
            .iter()
            .map(|e| (0..5).map(|k| if k == e.2 { 1.0 } else { 0.0 }).collect())
            .collect();
        let buckets = Tensor::from_rows(&rows).unwrap();
        let n_sources = groups.iter().max().unwrap() + 1;
        for (s, p) in reconstruct(&field, &buckets, n_sources).iter().enumerate() {
            if groups.contains(&s) {
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn vd_matches_brute_force(cells in points(300), facilities in points(25)) {
        let got = assign_vd(&cells, &facilities).unwrap();
        for (c, &f) in cells.iter().zip(&got) {
            prop_assert_eq!(f, brute_nearest(c, &facilities));
        }
        prop_assert_eq!(nearest(&cells, &facilities), got);
    }

    #[test]
    fn kmeans_is_a_consistent_partition(pts in points(60), seed in any::<u64>(), k_raw in 1usize..10) {
        let k = k_raw.min(pts.len());
        let c = kmeans(&pts, k, seed).unwrap();
        prop_assert_eq!(c.centers.len(), k);
        for w in c.sse_history.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-9);
        }
        let mut seen = vec![false; pts.len()];
        for (ci, center) in c.centers.iter().enumerate() {
            prop_assert!(!center.members.is_empty());
            let (mut sx, mut sy) = (0.0, 0.0);
            for &m in &center.members {
                prop_assert_eq!(c.labels[m], ci);
                prop_assert!(!seen[m]);
                seen[m] = true;
                sx += pts[m].x;
                sy += pts[m].y;
            }
            let n = center.members.len() as f64;
            prop_assert!((center.centroid.x - sx / n).abs() <= 1e-9 * (1.0 + sx.abs()));
            prop_assert!((center.centroid.y - sy / n).abs() <= 1e-9 * (1.0 + sy.abs()));
        }
        prop_assert!(seen.iter().all(|s| *s));
        let first: Vec<usize> = c.centers.iter().map(|z| z.members[0]).collect();
        prop_assert!(first.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn every_method_conserves_the_regional_total(
        cells in points(200),
        facilities in points(12),
        seed in any::<u64>(),
        volume in 1.0..1e6f64,
    ) {
        let w: Vec<f64> = cells.iter().enumerate().map(|(i, _)| ((i * 37 % 11) + 1) as f64).collect();
        let k = ((facilities.len() as f64).sqrt().ceil() as usize).min(facilities.len());
        let (civd, clustering) = gridalloc::allocator::assign_civd(&cells, &facilities, k, seed).unwrap();
        let part = RegionPartition {
            cells: (0..cells.len()).collect(),
            facilities: (0..facilities.len()).collect(),
            vd: assign_vd(&cells, &facilities).unwrap(),
            civd,
            clustering: Some(clustering),
        };
        let r = region(volume);
        for m in Method::ALL {
            let v = aggregate_region(m, &r, &part, &w).unwrap();
            prop_assert_eq!(v.len(), facilities.len());
            prop_assert!(v.iter().all(|x| *x >= 0.0));
            prop_assert!((v.iter().sum::<f64>() - volume).abs() <= 1e-9 * volume);
        }
    }

    #[test]
    fn rmse_ignores_facility_order(values in prop::collection::vec((0.0..100.0f64, 0.0..100.0f64), 1..30), rot in 0usize..30) {
        let facs: Vec<Facility> = values.iter().enumerate().map(|(i, v)| Facility {
            id: format!("f{i}"),
            location: GeoPoint::new(0.0, 0.0),
            region_id: "r".into(),
            ground_truth_demand: Some(v.1),
        }).collect();
        let mut allocs: Vec<_> = values.iter().enumerate().map(|(i, v)| gridalloc::allocator::FacilityAllocation {
            region_id: "r".into(),
            facility_id: format!("f{i}"),
            volume: v.0,
        }).collect();
        let a = rmse(&allocs, &facs).unwrap();
        allocs.rotate_left(rot % values.len());
        let b = rmse(&allocs, &facs).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a));
        prop_assert!(a >= 0.0);
        let exact: Vec<_> = allocs.iter().map(|x| {
            let i: usize = x.facility_id[1..].parse().unwrap();
            gridalloc::allocator::FacilityAllocation { volume: values[i].1, ..x.clone() }
        }).collect();
        prop_assert_eq!(rmse(&exact, &facs).unwrap(), 0.0);
    }

    #[test]
    fn spearman_is_bounded_and_symmetric(
        pairs in prop::collection::vec((-10.0..10.0f64, -10.0..10.0f64), 2..80),
    ) {
        let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        if let Some(r) = spearman(&a, &b) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
            prop_assert!((spearman(&b, &a).unwrap() - r).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_itself(p in distribution(5), q in distribution(5)) {
        prop_assert!(kl_loss(&[p.clone()], &[q], 0.0) >= -1e-12);
        prop_assert!(kl_loss(&[p.clone()], &[p], 1e-8) <= 1e-6);
    }
}
