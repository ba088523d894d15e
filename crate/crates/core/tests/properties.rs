use ndarray::{Array2, Array3, Axis};
use proptest::prelude::*;
use pstnet::data::{self, Distortion, MotionSpec, SequenceRecord, CANVAS};
use pstnet::geom::{farthest_point_sample, radius_neighbors};
use pstnet::psttrans::interp_weights;
use pstnet::{PointCloudSequence, PstConv, Sampling, TubeSpec};

/// Coordinates on a 1/8 grid so translations by integers stay exact.
fn grid_points(max: usize) -> impl Strategy<Value = Array2<f64>> {
    (1..=max).prop_flat_map(|n| {
        prop::collection::vec(-64i32..64, n * 3)
            .prop_map(move |v| Array2::from_shape_vec((n, 3), v.into_iter().map(|x| x as f64 / 8.0).collect()).unwrap())
    })
}

fn sorted_rows(a: &Array2<f64>, idx: &[usize]) -> Vec<[u64; 3]> {
    let mut rows: Vec<[u64; 3]> =
        idx.iter().map(|&i| [a[[i, 0]].to_bits(), a[[i, 1]].to_bits(), a[[i, 2]].to_bits()]).collect();
    rows.sort_unstable();
    rows
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fps_full_sample_is_a_permutation(pts in grid_points(20)) {
        let n = pts.nrows();
        let mut idx = farthest_point_sample(pts.view(), n, Sampling::Deterministic).unwrap();
        idx.sort_unstable();
        prop_assert_eq!(idx, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn fps_is_permutation_invariant(pts in grid_points(20), k in 1usize..20, seed in any::<u64>()) {
        let n = pts.nrows();
        let k = k.min(n);
        let perm = data::shuffled(n, seed);
        let permuted = pts.select(Axis(0), &perm);
        // distinct points, otherwise tie-breaking by index legitimately differs
        let mut uniq = sorted_rows(&pts, &(0..n).collect::<Vec<_>>());
        uniq.dedup();
        prop_assume!(uniq.len() == n);
        let a = farthest_point_sample(pts.view(), k, Sampling::Deterministic).unwrap();
        let b = farthest_point_sample(permuted.view(), k, Sampling::Deterministic).unwrap();
        prop_assert_eq!(sorted_rows(&pts, &a), sorted_rows(&permuted, &b));
    }

    #[test]
    fn neighbors_respect_radius_and_translation(
        pts in grid_points(24),
        anchor in prop::array::uniform3(-64i32..64),
        shift in prop::array::uniform3(-16i32..16),
        r in 1u32..40,
        k in prop::option::of(1usize..12),
    ) {
        let anchor = anchor.map(|x| x as f64 / 8.0);
        let r = r as f64 / 4.0;
        let a = radius_neighbors(anchor, pts.view(), r, k, Sampling::Deterministic).unwrap();
        if !a.clamped {
            for d in &a.displacements {
                prop_assert!(d.iter().map(|x| x * x).sum::<f64>() <= r * r);
            }
        }
        if let Some(k) = k {
            prop_assert_eq!(a.indices.len(), k);
        }
        let shift = shift.map(f64::from);
        let moved = &pts + &ndarray::arr1(&shift);
        let moved_anchor = [anchor[0] + shift[0], anchor[1] + shift[1], anchor[2] + shift[2]];
        let b = radius_neighbors(moved_anchor, moved.view(), r, k, Sampling::Deterministic).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn conv_features_are_translation_invariant(
        seed in any::<u64>(),
        shift in prop::array::uniform3(-32i32..32),
    ) {
        let mut rng = pstnet::rng::rng(seed);
        let coords = Array3::from_shape_fn((4, 12, 3), |_| (rand::Rng::gen_range(&mut rng, 0..32) as f64) / 8.0);
        let feats = Array3::from_shape_fn((4, 12, 2), |_| rand::Rng::gen_range(&mut rng, -1.0..1.0));
        let conv = PstConv::init(TubeSpec::new(3, 2, [1, 1], 2, 1.0, Some(4)), 2, 3, 3, true, 1.0, &mut rng).unwrap();
        let a = conv.forward(coords.view(), feats.view(), Sampling::Deterministic).unwrap();
        let shift = ndarray::arr1(&shift.map(f64::from));
        let moved = &coords + &shift;
        let b = conv.forward(moved.view(), feats.view(), Sampling::Deterministic).unwrap();
        prop_assert_eq!(&a.out_coords + &shift, b.out_coords);
        let diff = (&a.out_feats - &b.out_feats).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(diff <= 1e-12, "max diff {}", diff);
    }

    #[test]
    fn interpolation_weights_are_normalized(pts in grid_points(30), anchors in grid_points(8), r in 1u32..64) {
        let w = interp_weights(pts.view(), anchors.view(), r as f64 / 8.0).unwrap();
        prop_assert_eq!(w.entries.len(), pts.nrows());
        for e in &w.entries {
            prop_assert!(!e.is_empty());
            let total: f64 = e.iter().map(|&(_, w)| w).sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!(e.iter().all(|&(i, w)| i < anchors.nrows() && w >= 0.0));
        }
    }

    #[test]
    fn pcsq_round_trip(
        l in 1usize..4, n in 1usize..6, c in 0usize..3, label in any::<i32>(),
        with_labels in any::<bool>(), seed in any::<u64>(),
    ) {
        let mut rng = pstnet::rng::rng(seed);
        // f32-representable values so the round trip is exact
        let mut draw = |shape: (usize, usize, usize)| {
            Array3::from_shape_simple_fn(shape, || rand::Rng::gen::<f32>(&mut rng) as f64 * 64.0)
        };
        let sequence = PointCloudSequence::new(draw((l, n, 3)), draw((l, n, c))).unwrap();
        let point_labels = with_labels.then(|| (0..(l * n) as i32).collect());
        let record = SequenceRecord { sequence, label, point_labels };
        let bytes = record.encode().unwrap();
        prop_assert_eq!(SequenceRecord::decode(&bytes).unwrap(), record);
        prop_assert!(SequenceRecord::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extended = bytes.clone();
        extended.push(0);
        prop_assert!(SequenceRecord::decode(&extended).is_err());
    }

    #[test]
    fn generated_digits_stay_on_canvas(class in 0usize..144, seed in any::<u64>(), digit in 0usize..10) {
        let motion = MotionSpec::from_class_id(class).unwrap();
        prop_assert_eq!(motion.class_id(), class);
        let points = data::builtin_digit(digit, seed).unwrap();
        let (seq, id) = data::generate_moving_digit(points.view(), motion, seed).unwrap();
        prop_assert_eq!(id, class);
        prop_assert_eq!(seq.coords().dim(), (16, 128, 3));
        for p in seq.coords().rows() {
            prop_assert!((0.0..=CANVAS).contains(&p[0]) && (0.0..=CANVAS).contains(&p[1]));
            prop_assert_eq!(p[2], 0.0);
        }
    }
}

#[test]
fn distortion_taxonomy_is_exhaustive() {
    let ids: std::collections::BTreeSet<usize> = MotionSpec::all().map(|m| m.class_id()).collect();
    assert_eq!(ids.len(), 144);
    let m = MotionSpec::new(4, 0, Distortion::Vertical).unwrap();
    assert_eq!(m.class_id(), 4 * 16 + 1);
}
