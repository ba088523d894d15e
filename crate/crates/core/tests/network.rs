mod common;

use common::uniform3;
use ndarray::{concatenate, Array1, Array3, Axis};
use pstnet::checkpoint;
use pstnet::data::{split_clips, velocity_subset_sample, DigitSource};
use pstnet::net::{build_classification_net, build_segmentation_net, LayerConfig, Network, Shape};
use pstnet::nn::softmax;
use pstnet::{NetConfig, PointCloudSequence, PstConv, PstTrans, Sampling, Target, Task};

fn points(shape: Shape) -> (usize, usize, usize) {
    match shape {
        Shape::Points { frames, points, channels } => (frames, points, channels),
        Shape::Global { .. } => panic!("expected a point-level shape"),
    }
}

/// Run every PST layer of `config` on random data and compare each realized
/// output with the declared shape (minus skip channels, which the network concatenates).
fn audit(config: &NetConfig, frames: usize, n: usize) {
    let declared = config.shapes(frames, n).unwrap();
    let mut rng = common::rng(0);
    let mut prng = pstnet::rng::rng(0);
    let mut coords = uniform3(&mut rng, (frames, n, 3), 0.0, 8.0);
    let mut feats = Array3::<f64>::zeros((frames, n, config.input_channels));
    // (coords, feats) at the input of each layer
    let mut inputs: Vec<(Array3<f64>, Array3<f64>)> = Vec::new();
    for (i, layer) in config.layers.iter().enumerate() {
        inputs.push((coords.clone(), feats.clone()));
        match layer {
            LayerConfig::PstConv { spec, c_in, c_mid, c_out, bias, .. } => {
                let conv = PstConv::init(spec.clone(), *c_in, *c_mid, *c_out, *bias, 1.0, &mut prng).unwrap();
                let io = conv.forward(coords.view(), feats.view(), Sampling::Deterministic).unwrap();
                coords = io.out_coords;
                feats = io.out_feats;
                assert_eq!(feats.dim(), points(declared[i]), "layer {i}");
            }
            LayerConfig::PstTrans { pair, spec, c_in, c_mid, c_out, .. } => {
                let trans = PstTrans::init(spec.clone(), *c_in, *c_mid, *c_out, 1.0, &mut prng).unwrap();
                let target = &inputs[*pair].0;
                let io = trans.forward(coords.view(), feats.view(), target.view()).unwrap();
                let skips: Vec<Array3<f64>> = config
                    .skips
                    .iter()
                    .filter(|s| s.dest == i)
                    .map(|s| s.source.map_or_else(|| inputs[0].1.clone(), |src| inputs[src + 1].1.clone()))
                    .collect();
                let mut parts = vec![io.out_feats.view()];
                parts.extend(skips.iter().map(|s| s.view()));
                coords = target.clone();
                feats = concatenate(Axis(2), &parts).unwrap();
                assert_eq!(feats.dim(), points(declared[i]), "layer {i}");
            }
            LayerConfig::Conv1d { c_out, .. } => {
                feats = Array3::zeros((feats.dim().0, feats.dim().1, *c_out));
                assert_eq!(feats.dim(), points(declared[i]));
            }
            _ => {}
        }
    }
}

#[test]
fn classification_stack_halves_frames_twice() {
    let config = build_classification_net(20, 0.5, &[8, 8, 8, 8, 8, 8], 24).unwrap();
    let shapes = config.shapes(24, 2048).unwrap();
    let convs: Vec<(usize, usize)> = config
        .layers
        .iter()
        .zip(&shapes)
        .filter(|(l, _)| matches!(l, LayerConfig::PstConv { .. }))
        .map(|(_, s)| {
            let (f, p, _) = points(*s);
            (f, p)
        })
        .collect();
    assert_eq!(convs, vec![(24, 1024), (12, 512), (12, 512), (6, 256), (6, 256), (6, 128)]);
    assert_eq!(shapes.last(), Some(&Shape::Global { channels: 20 }));
    for layer in &config.layers {
        if let LayerConfig::PstConv { spec, .. } = layer {
            assert_eq!(spec.k, Some(9));
        }
    }
    audit(&config, 24, 2048);
}

#[test]
fn segmentation_stack_keeps_frames_and_restores_points() {
    let config = build_segmentation_net(5, 0.5, &[8, 8, 8, 8, 8, 8, 8, 8], 3, 2).unwrap();
    let shapes = config.shapes(3, 512).unwrap();
    for s in &shapes {
        assert_eq!(points(*s).0, 3);
    }
    assert_eq!(shapes.last(), Some(&Shape::Points { frames: 3, points: 512, channels: 5 }));
    // skip concatenation: decoder width = own output + encoder-level width
    let widths: Vec<usize> = config
        .layers
        .iter()
        .zip(&shapes)
        .filter(|(l, _)| matches!(l, LayerConfig::PstTrans { .. }))
        .map(|(_, s)| s.channels())
        .collect();
    assert_eq!(widths, vec![16, 16, 16, 10]);
    audit(&config, 3, 512);
}

#[test]
fn short_clip_is_rejected() {
    let config = build_classification_net(4, 0.5, &[8; 6], 24).unwrap();
    assert!(config.shapes(2, 64).is_err());
    assert!(build_classification_net(4, 0.0, &[8; 6], 24).is_err());
}

#[test]
fn config_json_round_trip() {
    let config = build_segmentation_net(3, 1.0, &[8; 8], 3, 0).unwrap();
    let back = NetConfig::from_json(&config.to_json().unwrap()).unwrap();
    assert_eq!(config, back);
}

fn small_net(seed: u64) -> Network {
    Network::new(build_classification_net(3, 0.3, &[8; 6], 4).unwrap(), seed).unwrap()
}

#[test]
fn featureless_zero_clip_gives_finite_logits() {
    let mut net = small_net(1);
    let seq = PointCloudSequence::from_coords(Array3::zeros((4, 16, 3))).unwrap();
    let logits = net.predict(&[seq]).unwrap();
    assert!(logits[0].iter().all(|v| v.is_finite()));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut net = small_net(2);
    let mut rng = common::rng(2);
    let batch: Vec<PointCloudSequence> =
        (0..3).map(|_| PointCloudSequence::from_coords(uniform3(&mut rng, (4, 32, 3), 0.0, 1.0)).unwrap()).collect();
    // move the batch-norm running statistics away from their initial values
    net.forward(&batch, true, Sampling::Deterministic).unwrap();
    let before = net.predict(&batch).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    checkpoint::save(&path, &net, Some(4), Some(0.5)).unwrap();
    let (mut loaded, manifest) = checkpoint::load(&path).unwrap();
    assert_eq!((manifest.epoch, manifest.metric), (Some(4), Some(0.5)));
    let after = loaded.predict(&batch).unwrap();
    for (a, b) in before.iter().zip(&after) {
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn corrupt_checkpoints_are_parse_errors() {
    let net = small_net(3);
    let bytes = checkpoint::encode(&net, None, None).unwrap();
    for bad in [&bytes[..3], &bytes[..bytes.len() - 4], &[b"PSTCK0", &bytes[6..]].concat()[..]] {
        assert!(matches!(checkpoint::decode(bad), Err(pstnet::Error::Parse(_))));
    }
}

#[test]
fn single_clip_sequence_matches_clip_prediction() {
    let mut net = small_net(4);
    let mut rng = common::rng(4);
    let seq = PointCloudSequence::from_coords(uniform3(&mut rng, (4, 32, 3), 0.0, 1.0)).unwrap();
    let (class, probs) = net.evaluate_sequence(&seq, 4, 1).unwrap();
    let direct = softmax(net.predict(std::slice::from_ref(&seq)).unwrap()[0].row(0));
    assert_eq!(probs, direct);
    assert_eq!(class, pstnet::net::argmax(direct.view()));
}

#[test]
fn clip_probabilities_are_averaged() {
    let mut net = small_net(5);
    let mut rng = common::rng(5);
    let seq = PointCloudSequence::from_coords(uniform3(&mut rng, (6, 32, 3), 0.0, 1.0)).unwrap();
    let clips = split_clips(&seq, 4, 1).unwrap();
    assert_eq!(clips.len(), 3);
    let mut mean = Array1::<f64>::zeros(3);
    for c in &clips {
        mean += &softmax(net.predict(std::slice::from_ref(c)).unwrap()[0].row(0));
    }
    mean /= 3.0;
    let (_, probs) = net.evaluate_sequence(&seq, 4, 1).unwrap();
    assert!((probs - mean).iter().all(|d| d.abs() < 1e-15));
    assert!(net.evaluate_sequence(&seq, 7, 1).is_err());
}

#[test]
fn segmentation_logits_cover_every_point() {
    let config = build_segmentation_net(2, 2.0, &[8; 8], 3, 0).unwrap();
    assert_eq!(config.task, Task::Segmentation);
    let mut net = Network::new(config, 0).unwrap();
    let (seq, labels) = pstnet::data::generate_two_digit_segmentation(&DigitSource::Builtin, 0).unwrap();
    let logits = net.predict(std::slice::from_ref(&seq)).unwrap();
    assert_eq!(logits[0].dim(), (3 * 256, 2));
    let targets = [Target::PerPoint(labels.iter().map(|&l| l as usize).collect())];
    let (loss, _) = pstnet::net::batch_loss(&logits, &targets).unwrap();
    assert!(loss.is_finite());
}

#[test]
fn velocity_subset_is_deterministic() {
    let a = velocity_subset_sample(&DigitSource::Builtin, 3, 9).unwrap();
    let b = velocity_subset_sample(&DigitSource::Builtin, 3, 9).unwrap();
    assert_eq!(a, b);
}
