mod common;

use common::{max_rel_diff, uniform2, uniform3, ConvParams};
use ndarray::{Array1, Array3};
use pstnet::geom::{farthest_point_sample, Sampling};
use pstnet::pstops::{PstConv, SpatialKernel, TemporalKernel};
use pstnet::psttrans::{PstTrans, TransKernel};
use pstnet::tube::TubeSpec;
use rand::Rng;

const TOL: f64 = 1e-12;

/// A random valid tube configuration over `frames` frames.
fn random_spec(rng: &mut impl Rng, frames: usize, points: usize) -> (usize, usize, [usize; 2], usize) {
    loop {
        let l = [1, 3][rng.gen_range(0..2)];
        let s_t = rng.gen_range(1..=2);
        let h = l / 2;
        let p = [rng.gen_range(0..=h), rng.gen_range(0..=h)];
        let s_s = rng.gen_range(1..=points.min(4));
        if frames + p[0] + p[1] >= l {
            return (l, s_t, p, s_s);
        }
    }
}

#[test]
fn fps_matches_recomputing_oracle() {
    let mut rng = common::rng(11);
    for _ in 0..100 {
        let n = rng.gen_range(1..=12);
        let pts = uniform2(&mut rng, (n, 3), -1.0, 1.0);
        let m = rng.gen_range(1..=n);
        assert_eq!(farthest_point_sample(pts.view(), m, Sampling::Deterministic).unwrap(), common::fps(pts.view(), m));
    }
}

#[test]
fn pst_conv_matches_oracle() {
    let mut rng = common::rng(1);
    let mut cases = 0;
    let mut worst: f64 = 0.0;
    for case in 0..150 {
        let frames = rng.gen_range(1..=4);
        let n = rng.gen_range(1..=8);
        let c = rng.gen_range(0..=3);
        let cm = rng.gen_range(1..=3);
        let co = rng.gen_range(1..=3);
        let (l, s_t, p, s_s) = random_spec(&mut rng, frames, n);
        let r = rng.gen_range(0.2..1.5);
        let k = if rng.gen_bool(0.5) { None } else { Some(rng.gen_range(1..=5)) };
        let coords = uniform3(&mut rng, (frames, n, 3), 0.0, 1.0);
        let feats = uniform3(&mut rng, (frames, n, c), -1.0, 1.0);
        // cycle through the three kernel forms
        let form = case % 3;
        let theta_d = (form != 2 || c == 0).then(|| uniform2(&mut rng, (cm, 3), -1.0, 1.0));
        let theta_s = (form != 1 && c > 0).then(|| uniform2(&mut rng, (cm, c), -1.0, 1.0));
        let temporal = uniform3(&mut rng, (l, co, cm), -1.0, 1.0);
        let bias = rng.gen_bool(0.5).then(|| Array1::from_shape_simple_fn(co, || rng.gen_range(-1.0..1.0)));

        let spatial = match (&theta_d, &theta_s) {
            (Some(d), Some(s)) => SpatialKernel::full(d.clone(), s.clone()).unwrap(),
            (Some(d), None) => SpatialKernel::displacement_only(d.clone()).unwrap(),
            (None, Some(s)) => SpatialKernel::sharing_only(s.clone()).unwrap(),
            (None, None) => unreachable!(),
        };
        let spec = TubeSpec::new(l, s_t, p, s_s, r, k);
        let conv = PstConv::new(spec, spatial, TemporalKernel::new(temporal.clone(), bias.clone()).unwrap()).unwrap();
        let io = conv.forward(coords.view(), feats.view(), Sampling::Deterministic).unwrap();

        let params = ConvParams { l, s_t, p, s_s, r, k, theta_d, theta_s, temporal, bias };
        let (oc, of) = common::pst_conv(coords.view(), feats.view(), &params);
        assert_eq!(io.out_coords, oc, "anchor coordinates, case {case}");
        assert_eq!(io.out_feats.dim(), of.dim());
        let err = max_rel_diff(io.out_feats.as_slice().unwrap(), of.as_slice().unwrap());
        assert!(err <= TOL, "case {case}: relative error {err:e}");
        worst = worst.max(err);
        cases += 1;
    }
    assert!(cases >= 100);
    println!("{cases} convolution instances, worst relative error {worst:e}");
}

#[test]
fn pst_trans_matches_oracle() {
    let mut rng = common::rng(2);
    let mut worst: f64 = 0.0;
    for case in 0..150 {
        let frames = rng.gen_range(1..=4);
        let n = rng.gen_range(1..=8);
        let (ci, cm, co) = (rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=3));
        let (l, s_t, p, s_s) = random_spec(&mut rng, frames, n);
        let r = rng.gen_range(0.2..1.5);
        let spec = TubeSpec::new(l, s_t, p, s_s, r, None);
        let original = uniform3(&mut rng, (frames, n, 3), 0.0, 1.0);
        let lo = spec.output_frames(frames).unwrap();
        let no = spec.output_points(n).unwrap();
        // encoded points: a subset of each anchor frame, as a PST convolution would produce
        let anchors_t = common::anchor_frames(frames, l, s_t, p);
        let mut enc = Array3::zeros((lo, no, 3));
        for (i, &a) in anchors_t.iter().enumerate() {
            let sel = common::fps(original.index_axis(ndarray::Axis(0), a), no);
            for (j, &s) in sel.iter().enumerate() {
                for d in 0..3 {
                    enc[[i, j, d]] = original[[a, s, d]];
                }
            }
        }
        let feats = uniform3(&mut rng, (lo, no, ci), -1.0, 1.0);
        let temporal = uniform3(&mut rng, (l, cm, ci), -1.0, 1.0);
        let sharing = uniform2(&mut rng, (co, cm), -1.0, 1.0);
        let trans = PstTrans::new(spec, TransKernel::new(temporal.clone(), sharing.clone()).unwrap()).unwrap();
        let got = trans.forward(enc.view(), feats.view(), original.view()).unwrap().out_feats;
        let want = common::pst_trans(enc.view(), feats.view(), original.view(), l, s_t, p, r, &temporal, &sharing);
        assert_eq!(got.dim(), (frames, n, co));
        let err = max_rel_diff(got.as_slice().unwrap(), want.as_slice().unwrap());
        assert!(err <= TOL, "case {case}: relative error {err:e}");
        worst = worst.max(err);
    }
    println!("150 transposed instances, worst relative error {worst:e}");
}
