use std::collections::{BTreeMap, BTreeSet};

use autolabel::boxes::Box3D;
use autolabel::completion::make_partial;
use autolabel::eval::{average_precision, Criterion, Detection, MatchSpec};
use autolabel::geometry::Point;
use autolabel::occupancy::{voxelize, GridSpec, LabeledPoint};
use proptest::collection::vec;
use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

fn det(frame: u32, x: f64, y: f64, conf: f64) -> Detection {
    Detection {
        frame_index: frame,
        instance_id: 0,
        category: "car".into(),
        bbox: Box3D::new(Point::new(x, y, 0.0), [4.5, 1.9, 1.6], 0.0),
        confidence: conf,
    }
}

fn only(m: BTreeMap<String, f64>) -> f64 {
    assert_eq!(m.len(), 1);
    m.into_values().next().unwrap()
}

fn key(p: &Point) -> [u64; 3] {
    [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ap_is_bounded_and_a_top_false_positive_never_helps(
        truths in vec((0u32..4, -30.0f64..30.0, -30.0f64..30.0), 1..12),
        jitter in vec((-1.0f64..1.0, -1.0f64..1.0, 0.05f64..0.95), 12),
    ) {
        let spec = MatchSpec::default();
        let t: Vec<Detection> = truths.iter().map(|&(f, x, y)| det(f, x, y, 1.0)).collect();
        let p: Vec<Detection> = truths
            .iter()
            .zip(&jitter)
            .map(|(&(f, x, y), &(dx, dy, c))| det(f, x + dx, y + dy, c))
            .collect();
        for criterion in [Criterion::Iou, Criterion::BevDistance] {
            let base = only(average_precision(&p, &t, &spec, criterion));
            prop_assert!((0.0..=1.0).contains(&base), "{base}");
            let mut worse = p.clone();
            worse.push(det(0, 500.0, 500.0, 1.0));
            let after = only(average_precision(&worse, &t, &spec, criterion));
            prop_assert!(after <= base + 1e-12, "{after} > {base}");
        }
    }

    #[test]
    fn make_partial_returns_an_ordered_subset(
        pts in vec((-2.0f64..2.0, -1.0f64..1.0, 0.0f64..1.5), 8..120),
        frac in 0.0f64..1.0,
        seed in 0u64..1000,
    ) {
        let points: Vec<Point> = pts.iter().map(|&(x, y, z)| Point::new(x, y, z)).collect();
        let view = Point::new(-10.0, 3.0, 1.0);
        let out = make_partial(&points, &view, frac, seed);
        let expected = points.len() - ((frac * points.len() as f64).round() as usize).min(points.len());
        prop_assert_eq!(out.len(), expected);
        // order preserved: `out` is a subsequence of the input
        let mut it = points.iter().map(key);
        for q in &out {
            let k = key(q);
            prop_assert!(it.any(|p| p == k));
        }
        prop_assert_eq!(make_partial(&points, &view, frac, seed), out);
    }

    #[test]
    fn voxelized_class_counts_cover_every_occupied_voxel(
        pts in vec((-8.0f64..8.0, -8.0f64..8.0, -2.0f64..2.0, 0u16..4, 0u32..3), 1..300),
        min_points in 1usize..4,
    ) {
        let spec = GridSpec { origin: [-8.0, -8.0, -2.0], voxel_size: 1.0, dims: [16, 16, 4] };
        let labeled: Vec<LabeledPoint> = pts
            .iter()
            .map(|&(x, y, z, s, i)| LabeledPoint { point: Point::new(x, y, z), semantic_id: s, instance_id: i })
            .collect();
        let grid = voxelize(&labeled, &spec, 0, min_points);
        let counts = grid.class_counts();
        prop_assert_eq!(counts.values().sum::<usize>(), grid.voxels.len());
        let seen: BTreeSet<u16> = pts.iter().map(|p| p.3).collect();
        prop_assert!(counts.keys().all(|k| seen.contains(k)));
    }
}
