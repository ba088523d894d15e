//! Central-difference checks of every differentiable op and of small
//! end-to-end networks.

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::Sampling;
use crate::net::{self, LayerConfig, NetConfig, Network, Skip, Target, Task};
use crate::nn::{self, BatchNorm, GradCheckReport, Linear};
use crate::pstops::{PstConv, SpatialKernel, TemporalKernel};
use crate::psttrans::{PstTrans, TransKernel};
use crate::rng;
use crate::sequence::PointCloudSequence;
use crate::tube::{build_tube, TubeSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    /// `op.tensor`, e.g. `pstconv.theta_d`.
    pub name: String,
    pub report: GradCheckReport,
}

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

type Tensors = Vec<ArrayD<f64>>;

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(lo..hi))
}

fn weighted(out: &ArrayD<f64>, w: &ArrayD<f64>) -> f64 {
    (out * w).sum()
}

fn d2(a: &ArrayD<f64>) -> Array2<f64> {
    a.clone().into_dimensionality().expect("rank 2")
}

fn d3(a: &ArrayD<f64>) -> Array3<f64> {
    a.clone().into_dimensionality().expect("rank 3")
}

fn d1(a: &ArrayD<f64>) -> Array1<f64> {
    a.clone().into_dimensionality().expect("rank 1")
}

/// Check each tensor of `tensors` against `analytic`, perturbing one tensor at a time.
fn check_tensors(
    op: &str,
    names: &[&str],
    tensors: &Tensors,
    analytic: &Tensors,
    loss: impl Fn(&Tensors) -> Result<f64>,
    eps: f64,
    tol: f64,
) -> Result<Vec<OpCheck>> {
    let mut out = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let x: Vec<f64> = tensors[i].iter().copied().collect();
        let a: Vec<f64> = analytic[i].iter().copied().collect();
        let shape = tensors[i].raw_dim();
        let report = nn::grad_check(
            |probe| {
                let mut t = tensors.clone();
                t[i] = ArrayD::from_shape_vec(shape.clone(), probe.to_vec()).expect("shape");
                loss(&t).unwrap_or(f64::NAN)
            },
            &x,
            &a,
            eps,
            tol,
        )?;
        out.push(OpCheck { name: format!("{op}.{name}"), report });
    }
    Ok(out)
}

fn random_coords(rng: &mut ChaCha8Rng, frames: usize, points: usize) -> Array3<f64> {
    d3(&rand_array(rng, &[frames, points, 3], 0.0, 1.0))
}

fn check_pstconv(form: &str, seed: u64, eps: f64, tol: f64) -> Result<Vec<OpCheck>> {
    let mut rng = rng::rng(rng::derive(seed, &[1]));
    let (frames, points, c, cm, co) = (4, 8, 2, 3, 2);
    let spec = TubeSpec::new(3, 1, [1, 1], 2, 0.7, Some(3));
    let coords = random_coords(&mut rng, frames, points);
    let tube = build_tube(coords.view(), &spec, Sampling::Deterministic)?;
    let lo = spec.output_frames(frames)?;
    let no = spec.output_points(points)?;
    let w = rand_array(&mut rng, &[lo, no, co], -1.0, 1.0);

    let feats = rand_array(&mut rng, &[frames, points, c], -1.0, 1.0);
    let theta_d = rand_array(&mut rng, &[cm, 3], -1.0, 1.0);
    let theta_s = rand_array(&mut rng, &[cm, c], -1.0, 1.0);
    let temporal = rand_array(&mut rng, &[3, co, cm], -1.0, 1.0);
    let bias = rand_array(&mut rng, &[co], -1.0, 1.0);

    let (names, tensors): (Vec<&str>, Tensors) = match form {
        "full" => (
            vec!["feats", "theta_d", "theta_s", "temporal", "bias"],
            vec![feats, theta_d, theta_s, temporal, bias],
        ),
        "displacement" => (vec!["theta_d", "temporal", "bias"], vec![theta_d, temporal, bias]),
        "sharing" => (vec!["feats", "theta_s", "temporal", "bias"], vec![feats, theta_s, temporal, bias]),
        other => return Err(Error::invalid(format!("unknown kernel form {other}"))),
    };
    let build = |t: &Tensors| -> Result<(PstConv, Array3<f64>)> {
        Ok(match form {
            "full" => (
                PstConv::new(
                    spec.clone(),
                    SpatialKernel::full(d2(&t[1]), d2(&t[2]))?,
                    TemporalKernel::new(d3(&t[3]), Some(d1(&t[4])))?,
                )?,
                d3(&t[0]),
            ),
            "displacement" => (
                PstConv::new(
                    spec.clone(),
                    SpatialKernel::displacement_only(d2(&t[0]))?,
                    TemporalKernel::new(d3(&t[1]), Some(d1(&t[2])))?,
                )?,
                Array3::zeros((frames, points, 0)),
            ),
            _ => (
                PstConv::new(
                    spec.clone(),
                    SpatialKernel::sharing_only(d2(&t[1]))?,
                    TemporalKernel::new(d3(&t[2]), Some(d1(&t[3])))?,
                )?,
                d3(&t[0]),
            ),
        })
    };
    let loss = |t: &Tensors| -> Result<f64> {
        let (conv, f) = build(t)?;
        let io = conv.forward_with_tube(tube.clone(), f.view())?;
        Ok(weighted(&io.out_feats.into_dyn(), &w))
    };
    let (conv, f) = build(&tensors)?;
    let io = conv.forward_with_tube(tube.clone(), f.view())?;
    let g = conv.backward(&io, d3(&w).view())?;
    let missing = || Error::InvalidState("gradient missing".into());
    let analytic: Tensors = names
        .iter()
        .map(|n| {
            Ok(match *n {
                "feats" => g.input_feats.clone().ok_or_else(missing)?.into_dyn(),
                "theta_d" => g.theta_d.clone().ok_or_else(missing)?.into_dyn(),
                "theta_s" => g.theta_s.clone().ok_or_else(missing)?.into_dyn(),
                "temporal" => g.temporal.clone().into_dyn(),
                _ => g.bias.clone().ok_or_else(missing)?.into_dyn(),
            })
        })
        .collect::<Result<_>>()?;
    check_tensors(&format!("pstconv_{form}"), &names, &tensors, &analytic, loss, eps, tol)
}

fn check_psttrans(seed: u64, eps: f64, tol: f64) -> Result<Vec<OpCheck>> {
    let mut rng = rng::rng(rng::derive(seed, &[2]));
    let (frames, points, ci, cm, co) = (5, 8, 2, 3, 2);
    let enc = TubeSpec::new(3, 2, [1, 1], 4, 0.8, Some(3));
    let coords = random_coords(&mut rng, frames, points);
    let tube = build_tube(coords.view(), &enc, Sampling::Deterministic)?;
    let (lo, no) = (tube.out_frames(), tube.out_points());
    let mut enc_coords = Array3::zeros((lo, no, 3));
    for (i, anchors) in tube.anchors.iter().enumerate() {
        for (n, a) in anchors.iter().enumerate() {
            for d in 0..3 {
                enc_coords[[i, n, d]] = a.coords[d];
            }
        }
    }
    let w = rand_array(&mut rng, &[frames, points, co], -1.0, 1.0);
    let tensors = vec![
        rand_array(&mut rng, &[lo, no, ci], -1.0, 1.0),
        rand_array(&mut rng, &[3, cm, ci], -1.0, 1.0),
        rand_array(&mut rng, &[co, cm], -1.0, 1.0),
    ];
    let build = |t: &Tensors| PstTrans::new(enc.clone(), TransKernel::new(d3(&t[1]), d2(&t[2]))?);
    let loss = |t: &Tensors| -> Result<f64> {
        let io = build(t)?.forward(enc_coords.view(), d3(&t[0]).view(), coords.view())?;
        Ok(weighted(&io.out_feats.into_dyn(), &w))
    };
    let trans = build(&tensors)?;
    let io = trans.forward(enc_coords.view(), d3(&tensors[0]).view(), coords.view())?;
    let g = trans.backward(&io, d3(&w).view())?;
    let analytic = vec![g.encoded_feats.into_dyn(), g.temporal.into_dyn(), g.sharing.into_dyn()];
    check_tensors("psttrans", &["encoded_feats", "temporal", "sharing"], &tensors, &analytic, loss, eps, tol)
}

fn check_batchnorm(seed: u64, training: bool, eps: f64, tol: f64) -> Result<Vec<OpCheck>> {
    let mut rng = rng::rng(rng::derive(seed, &[3, training as u64]));
    let (rows, c) = (6, 3);
    let w = rand_array(&mut rng, &[rows, c], -1.0, 1.0);
    let tensors = vec![
        rand_array(&mut rng, &[rows, c], -2.0, 2.0),
        rand_array(&mut rng, &[c], 0.5, 1.5),
        rand_array(&mut rng, &[c], -0.5, 0.5),
    ];
    let mut base = BatchNorm::new(c);
    base.running_mean = d1(&rand_array(&mut rng, &[c], -0.5, 0.5));
    base.running_var = d1(&rand_array(&mut rng, &[c], 0.5, 2.0));
    let run = |t: &Tensors| -> Result<(BatchNorm, Array2<f64>, nn::BatchNormCache)> {
        let mut bn = base.clone();
        bn.gamma = d1(&t[1]);
        bn.beta = d1(&t[2]);
        let (y, cache) = bn.forward(d2(&t[0]).view(), training)?;
        Ok((bn, y, cache))
    };
    let loss = |t: &Tensors| run(t).map(|(_, y, _)| weighted(&y.into_dyn(), &w));
    let (bn, _, cache) = run(&tensors)?;
    let (dx, dg, db) = bn.backward(&cache, d2(&w).view());
    let op = if training { "batchnorm_train" } else { "batchnorm_eval" };
    let analytic = vec![dx.into_dyn(), dg.into_dyn(), db.into_dyn()];
    check_tensors(op, &["x", "gamma", "beta"], &tensors, &analytic, loss, eps, tol)
}

fn check_linear(seed: u64, eps: f64, tol: f64) -> Result<Vec<OpCheck>> {
    let mut rng = rng::rng(rng::derive(seed, &[4]));
    let w = rand_array(&mut rng, &[4, 2], -1.0, 1.0);
    let tensors = vec![
        rand_array(&mut rng, &[4, 3], -1.0, 1.0),
        rand_array(&mut rng, &[2, 3], -1.0, 1.0),
        rand_array(&mut rng, &[2], -1.0, 1.0),
    ];
    let lin = |t: &Tensors| Linear::new(d2(&t[1]), d1(&t[2]));
    let loss = |t: &Tensors| Ok(weighted(&lin(t)?.forward(d2(&t[0]).view())?.into_dyn(), &w));
    let (dx, dw, db) = lin(&tensors)?.backward(d2(&tensors[0]).view(), d2(&w).view());
    let analytic = vec![dx.into_dyn(), dw.into_dyn(), db.into_dyn()];
    check_tensors("linear", &["x", "weight", "bias"], &tensors, &analytic, loss, eps, tol)
}

fn check_pointwise(seed: u64, eps: f64, tol: f64) -> Result<Vec<OpCheck>> {
    let mut rng = rng::rng(rng::derive(seed, &[5]));
    let mut out = Vec::new();

    // relu, with inputs kept away from the kink
    let x = rand_array(&mut rng, &[5, 3], 0.1, 1.0).mapv(|v| if rng.gen() { v } else { -v });
    let w = rand_array(&mut rng, &[5, 3], -1.0, 1.0);
    let analytic = vec![nn::relu_backward(&x, &w)];
    let loss = |t: &Tensors| Ok(weighted(&nn::relu(&t[0]), &w));
    out.extend(check_tensors("relu", &["x"], &vec![x], &analytic, loss, eps, tol)?);

    // sequence pooling
    let feats = rand_array(&mut rng, &[3, 4, 2], -1.0, 1.0);
    let w = rand_array(&mut rng, &[2], -1.0, 1.0);
    let (_, cache) = nn::pool_sequence(d3(&feats).view())?;
    let analytic = vec![nn::pool_sequence_backward(&cache, d1(&w).view()).into_dyn()];
    let loss = |t: &Tensors| Ok(weighted(&nn::pool_sequence(d3(&t[0]).view())?.0.into_dyn(), &w));
    out.extend(check_tensors("pool", &["feats"], &vec![feats], &analytic, loss, eps, tol)?);

    // softmax cross-entropy
    let logits = rand_array(&mut rng, &[4], -2.0, 2.0);
    let (_, g) = nn::softmax_cross_entropy(d1(&logits).view(), 2)?;
    let loss = |t: &Tensors| Ok(nn::softmax_cross_entropy(d1(&t[0]).view(), 2)?.0);
    out.extend(check_tensors("softmax_ce", &["logits"], &vec![logits], &vec![g.into_dyn()], loss, eps, tol)?);
    Ok(out)
}

/// Two PST convolutions, batch norm, pooling and an FC head on `L = 3, N = 8` clips.
pub fn micro_classification_config() -> NetConfig {
    NetConfig {
        task: Task::Classification,
        input_channels: 0,
        clip_len: 3,
        layers: vec![
            LayerConfig::PstConv {
                name: "conv1".into(),
                spec: TubeSpec::new(1, 1, [0, 0], 2, 0.6, Some(4)),
                c_in: 0,
                c_mid: 4,
                c_out: 4,
                bias: true,
                kernel: Default::default(),
            },
            LayerConfig::Bn { channels: 4 },
            LayerConfig::Relu,
            LayerConfig::PstConv {
                name: "conv2".into(),
                spec: TubeSpec::new(3, 1, [1, 1], 2, 1.2, Some(3)),
                c_in: 4,
                c_mid: 4,
                c_out: 5,
                bias: true,
                kernel: Default::default(),
            },
            LayerConfig::Pool,
            LayerConfig::Fc { c_in: 5, c_out: 3 },
        ],
        skips: Vec::new(),
        num_classes: 3,
        init_scale: 1.0,
        radius_multiplier: 2.0,
    }
}

/// Encoder layer, transposed layer with an input skip, and a per-point head.
pub fn micro_segmentation_config() -> NetConfig {
    NetConfig {
        task: Task::Segmentation,
        input_channels: 1,
        clip_len: 3,
        layers: vec![
            LayerConfig::PstConv {
                name: "conv1".into(),
                spec: TubeSpec::new(3, 1, [1, 1], 2, 0.6, Some(4)),
                c_in: 1,
                c_mid: 3,
                c_out: 4,
                bias: true,
                kernel: Default::default(),
            },
            LayerConfig::Bn { channels: 4 },
            LayerConfig::Relu,
            LayerConfig::PstTrans {
                name: "trans1".into(),
                pair: 0,
                spec: TubeSpec::new(3, 1, [1, 1], 1, 0.8, None),
                c_in: 4,
                c_mid: 3,
                c_out: 3,
            },
            LayerConfig::Conv1d { c_in: 4, c_out: 2 },
        ],
        skips: vec![Skip { source: None, dest: 3 }],
        num_classes: 2,
        init_scale: 1.0,
        radius_multiplier: 2.0,
    }
}

/// Check every parameter of `net` on one training-mode batch.
pub fn check_network(
    name: &str,
    net: &Network,
    batch: &[PointCloudSequence],
    targets: &[Target],
    eps: f64,
    tol: f64,
) -> Result<Vec<OpCheck>> {
    let loss = |t: &Tensors| -> Result<f64> {
        let mut n = net.clone();
        for (mut p, v) in n.params_mut().into_iter().zip(t) {
            p.assign(v);
        }
        let pass = n.forward(batch, true, Sampling::Deterministic)?;
        Ok(net::batch_loss(&pass.logits, targets)?.0)
    };
    let tensors: Tensors = net.params().iter().map(|p| p.to_owned()).collect();
    let mut probe = net.clone();
    let pass = probe.forward(batch, true, Sampling::Deterministic)?;
    let (_, grad_logits) = net::batch_loss(&pass.logits, targets)?;
    let analytic = probe.backward(&pass, &grad_logits)?;
    let names = net.param_names();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    check_tensors(name, &names, &tensors, &analytic, loss, eps, tol)
}

fn micro_batch(seed: u64, channels: usize, points: usize) -> Result<Vec<PointCloudSequence>> {
    let mut rng = rng::rng(seed);
    (0..2)
        .map(|_| {
            let coords = random_coords(&mut rng, 3, points);
            let feats = d3(&rand_array(&mut rng, &[3, points, channels], -1.0, 1.0));
            PointCloudSequence::new(coords, feats)
        })
        .collect()
}

/// Every op check plus both micro networks.
pub fn run_suite(seed: u64, eps: f64, tol: f64) -> Result<Vec<OpCheck>> {
    let mut out = Vec::new();
    for form in ["full", "displacement", "sharing"] {
        out.extend(check_pstconv(form, seed, eps, tol)?);
    }
    out.extend(check_psttrans(seed, eps, tol)?);
    out.extend(check_batchnorm(seed, true, eps, tol)?);
    out.extend(check_batchnorm(seed, false, eps, tol)?);
    out.extend(check_linear(seed, eps, tol)?);
    out.extend(check_pointwise(seed, eps, tol)?);

    let cls = Network::new(micro_classification_config(), rng::derive(seed, &[6]))?;
    let batch = micro_batch(rng::derive(seed, &[7]), 0, 8)?;
    out.extend(check_network("micro_cls", &cls, &batch, &[Target::Class(0), Target::Class(2)], eps, tol)?);

    let seg = Network::new(micro_segmentation_config(), rng::derive(seed, &[8]))?;
    let batch = micro_batch(rng::derive(seed, &[9]), 1, 8)?;
    let mut lrng = rng::rng(rng::derive(seed, &[10]));
    let targets: Vec<Target> = (0..2).map(|_| Target::PerPoint((0..24).map(|_| lrng.gen_range(0..2)).collect())).collect();
    out.extend(check_network("micro_seg", &seg, &batch, &targets, eps, tol)?);
    Ok(out)
}
