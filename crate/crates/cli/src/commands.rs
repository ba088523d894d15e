use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array3;
use pstnet::checkpoint;
use pstnet::data::{
    self, DatasetManifest, DigitSource, ManifestEntry, MotionSpec, SequenceRecord, NUM_MOTIONS,
};
use pstnet::gradcheck::{self, OpCheck};
use pstnet::metrics::Confusion;
use pstnet::net::{self, LayerConfig, Network, Shape};
use pstnet::rng;
use pstnet::train::{Sample, TrainConfig, Trainer};
use pstnet::tube::select_anchor_frames;
use pstnet::{Error, NetConfig, PointCloudSequence, Result, Target, Task};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{RunConfig, RunManifest};
use crate::TaskArg;

const METRIC_LOG: &str = "metrics.csv";
const RUN_MANIFEST: &str = "run.json";
const BEST_CHECKPOINT: &str = "best.ckpt";
const LAST_CHECKPOINT: &str = "last.ckpt";

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidState(format!("metric log: {other:?}")),
    }
}

/// Print a result document; a closed pipe downstream is not an error.
fn emit(text: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

// ---------------------------------------------------------------------------
// generate

pub fn generate(task: TaskArg, out: &Path, count: usize, seed: u64, digits: &str, test_every: usize) -> Result<()> {
    if count == 0 {
        return Err(invalid("--count must be positive"));
    }
    let source = DigitSource::open(digits, seed)?;
    fs::create_dir_all(out)?;
    let records: Vec<(String, SequenceRecord)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let item_seed = rng::derive(seed, &[i as u64]);
            let record = match task {
                TaskArg::Cls => {
                    let motion = MotionSpec::from_class_id(i % NUM_MOTIONS)?;
                    let digit = source.pick(rng::derive(item_seed, &[0]))?;
                    let (sequence, class_id) = data::generate_moving_digit(digit.view(), motion, rng::derive(item_seed, &[1]))?;
                    SequenceRecord { sequence, label: class_id as i32, point_labels: None }
                }
                TaskArg::Seg => {
                    let (sequence, labels) = data::generate_two_digit_segmentation(&source, item_seed)?;
                    SequenceRecord { sequence, label: -1, point_labels: Some(labels) }
                }
            };
            Ok((format!("seq_{i:05}.pcsq"), record))
        })
        .collect::<Result<_>>()?;

    let mut entries = Vec::with_capacity(count);
    for (i, (name, record)) in records.iter().enumerate() {
        data::write_sequence(&out.join(name), record)?;
        let split = if test_every > 0 && i % test_every == test_every - 1 { "test" } else { "train" };
        entries.push(ManifestEntry { path: name.clone(), label: record.label, split: split.into() });
    }
    let (task_name, num_classes) = match task {
        TaskArg::Cls => ("classification", NUM_MOTIONS),
        TaskArg::Seg => ("segmentation", 2),
    };
    DatasetManifest { task: task_name.into(), num_classes, seed, digits: digits.into(), records: entries }.save(out)?;
    println!("wrote {count} {task_name} records to {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// init-config

pub fn init_config(
    task: TaskArg,
    out: &Path,
    widths: Option<Vec<usize>>,
    radius: Option<f64>,
    clip_len: Option<usize>,
    classes: Option<usize>,
) -> Result<()> {
    let network = match task {
        TaskArg::Cls => {
            let w: [usize; 6] = match widths {
                Some(w) => w.try_into().map_err(|w: Vec<usize>| invalid(format!("cls needs 6 widths, got {}", w.len())))?,
                None => net::DEFAULT_CLS_WIDTHS,
            };
            net::build_classification_net(
                classes.unwrap_or(NUM_MOTIONS),
                radius.unwrap_or(1.5),
                &w,
                clip_len.unwrap_or(data::SEQ_FRAMES),
            )?
        }
        TaskArg::Seg => {
            let w: [usize; 8] = match widths {
                Some(w) => w.try_into().map_err(|w: Vec<usize>| invalid(format!("seg needs 8 widths, got {}", w.len())))?,
                None => net::DEFAULT_SEG_WIDTHS,
            };
            net::build_segmentation_net(
                classes.unwrap_or(2),
                radius.unwrap_or(2.0),
                &w,
                clip_len.unwrap_or(data::SEG_FRAMES),
                0,
            )?
        }
    };
    network.validate()?;
    RunConfig::new(network).save(out)?;
    println!("wrote {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// dataset loading and evaluation

fn load_samples(dir: &Path, manifest: &DatasetManifest, split: &str, config: &NetConfig) -> Result<Vec<Sample>> {
    let entries: Vec<&ManifestEntry> = if split == "all" {
        manifest.records.iter().collect()
    } else {
        manifest.split(split).collect()
    };
    entries
        .into_iter()
        .map(|entry| {
            let path = DatasetManifest::resolve(dir, entry);
            let record = data::read_sequence(&path)?;
            if record.sequence.channels() != config.input_channels {
                return Err(invalid(format!(
                    "{} has {} feature channels, network expects {}",
                    path.display(),
                    record.sequence.channels(),
                    config.input_channels
                )));
            }
            let target = match config.task {
                Task::Classification => {
                    let label = usize::try_from(record.label)
                        .ok()
                        .filter(|&l| l < config.num_classes)
                        .ok_or_else(|| invalid(format!("{}: label {} outside 0..{}", path.display(), record.label, config.num_classes)))?;
                    Target::Class(label)
                }
                Task::Segmentation => {
                    let labels = record
                        .point_labels
                        .ok_or_else(|| invalid(format!("{} has no per-point labels", path.display())))?;
                    let labels = labels
                        .into_iter()
                        .map(|l| usize::try_from(l).ok().filter(|&l| l < config.num_classes))
                        .collect::<Option<Vec<_>>>()
                        .ok_or_else(|| invalid(format!("{}: point label outside 0..{}", path.display(), config.num_classes)))?;
                    Target::PerPoint(labels)
                }
            };
            Ok(Sample { sequence: record.sequence, target })
        })
        .collect()
}

/// Cut classification sequences into training clips that inherit the label.
fn training_clips(samples: &[Sample], clip_len: usize, frame_stride: usize) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for s in samples {
        if s.sequence.frames() == clip_len {
            out.push(s.clone());
            continue;
        }
        if matches!(s.target, Target::PerPoint(_)) {
            return Err(invalid(format!(
                "segmentation sequences must have exactly {clip_len} frames, got {}",
                s.sequence.frames()
            )));
        }
        for clip in data::split_clips(&s.sequence, clip_len, frame_stride)? {
            out.push(Sample { sequence: clip, target: s.target.clone() });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
struct Metrics {
    task: Task,
    sequences: usize,
    loss: f64,
    accuracy: f64,
    miou: f64,
    per_class_iou: Vec<Option<f64>>,
}

impl Metrics {
    /// The validation metric checkpoints are selected by.
    fn primary(&self) -> f64 {
        match self.task {
            Task::Classification => self.accuracy,
            Task::Segmentation => self.miou,
        }
    }
}

fn evaluate(net: &mut Network, samples: &[Sample], clip_len: usize, frame_stride: usize, batch: usize) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(invalid("no evaluation samples"));
    }
    let task = net.config().task;
    let mut confusion = Confusion::new(net.config().num_classes);
    let loss = match task {
        Task::Classification => {
            let mut loss = 0.0;
            for s in samples {
                let Target::Class(label) = s.target else {
                    return Err(invalid("classification sample without a class label"));
                };
                let (pred, probs) = net.evaluate_sequence(&s.sequence, clip_len, frame_stride)?;
                loss -= probs[label].max(f64::MIN_POSITIVE).ln();
                confusion.add(label, pred)?;
            }
            loss / samples.len() as f64
        }
        Task::Segmentation => {
            let clips = training_clips(samples, clip_len, frame_stride)?;
            let (mut loss, mut rows) = (0.0, 0usize);
            for chunk in clips.chunks(batch.max(1)) {
                let seqs: Vec<PointCloudSequence> = chunk.iter().map(|s| s.sequence.clone()).collect();
                let targets: Vec<Target> = chunk.iter().map(|s| s.target.clone()).collect();
                let logits = net.predict(&seqs)?;
                let n: usize = logits.iter().map(|l| l.nrows()).sum();
                loss += net::batch_loss(&logits, &targets)?.0 * n as f64;
                rows += n;
                for (lg, t) in logits.iter().zip(&targets) {
                    let Target::PerPoint(labels) = t else {
                        return Err(invalid("segmentation sample without point labels"));
                    };
                    for (row, &label) in lg.rows().into_iter().zip(labels) {
                        confusion.add(label, net::argmax(row))?;
                    }
                }
            }
            loss / rows as f64
        }
    };
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("evaluation loss became {loss}")));
    }
    Ok(Metrics {
        task,
        sequences: samples.len(),
        loss,
        accuracy: confusion.accuracy(),
        miou: confusion.mean_iou(),
        per_class_iou: confusion.iou(),
    })
}

// ---------------------------------------------------------------------------
// train

pub fn train(config_path: &Path, data_dir: &Path, epochs: usize, batch: usize, seed: u64, out: &Path) -> Result<()> {
    let run = RunConfig::load(config_path)?;
    run.network.validate()?;
    if epochs == 0 || batch == 0 {
        return Err(invalid("--epochs and --batch must be positive"));
    }
    let manifest = DatasetManifest::load(data_dir)?;
    let train_set = load_samples(data_dir, &manifest, "train", &run.network)?;
    if train_set.is_empty() {
        return Err(invalid(format!("{} has no training records", data_dir.display())));
    }
    let mut val_set = load_samples(data_dir, &manifest, "test", &run.network)?;
    let val_split = if val_set.is_empty() {
        val_set = train_set.clone();
        "train-eval"
    } else {
        "test"
    };
    let clip_len = run.network.clip_len;
    let clips = training_clips(&train_set, clip_len, run.frame_stride)?;

    fs::create_dir_all(out)?;
    let run_manifest = RunManifest {
        config: config_path.display().to_string(),
        dataset: data_dir.display().to_string(),
        seed,
        epochs,
        batch_size: batch,
        output_dir: out.display().to_string(),
        metric_log: METRIC_LOG.into(),
        run_config: run.clone(),
    };
    fs::write(out.join(RUN_MANIFEST), serde_json::to_string_pretty(&run_manifest)?)?;

    let net = Network::new(run.network.clone(), seed)?;
    let config = TrainConfig {
        epochs,
        batch_size: batch,
        seed,
        sgd: run.sgd.clone(),
        seeded_sampling: run.seeded_sampling,
    };
    let mut trainer = Trainer::new(net, config)?;
    let mut log = csv::Writer::from_path(out.join(METRIC_LOG)).map_err(csv_err)?;
    log.write_record(["epoch", "split", "lr", "loss", "accuracy", "miou"]).map_err(csv_err)?;
    println!(
        "training on {} clips from {} sequences, validating on {} {val_split} sequences",
        clips.len(),
        train_set.len(),
        val_set.len()
    );

    let mut best = f64::NEG_INFINITY;
    for epoch in 0..epochs {
        let lr = run.sgd.lr_at(epoch);
        let train_loss = trainer.train_epoch(&clips, epoch)?;
        log.write_record([epoch.to_string(), "train".into(), lr.to_string(), train_loss.to_string(), String::new(), String::new()])
            .map_err(csv_err)?;
        let m = evaluate(&mut trainer.net, &val_set, clip_len, run.frame_stride, batch)?;
        log.write_record([
            epoch.to_string(),
            val_split.into(),
            lr.to_string(),
            m.loss.to_string(),
            m.accuracy.to_string(),
            m.miou.to_string(),
        ])
        .map_err(csv_err)?;
        log.flush()?;
        println!(
            "epoch {epoch:3}  lr {lr:<8}  train loss {train_loss:.4}  {val_split} loss {:.4}  accuracy {:.4}  mIoU {:.4}",
            m.loss, m.accuracy, m.miou
        );
        if m.primary() > best {
            best = m.primary();
            checkpoint::save(&out.join(BEST_CHECKPOINT), &trainer.net, Some(epoch), Some(best))?;
        }
    }
    checkpoint::save(&out.join(LAST_CHECKPOINT), &trainer.net, Some(epochs - 1), None)?;
    println!("best {val_split} metric {best:.4}; checkpoints in {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval / predict

pub fn eval(ckpt: &Path, data_dir: &Path, split: &str, clip_len: Option<usize>, frame_stride: usize) -> Result<()> {
    let (mut net, _) = checkpoint::load(ckpt)?;
    let config = net.config().clone();
    let manifest = DatasetManifest::load(data_dir)?;
    let samples = load_samples(data_dir, &manifest, split, &config)?;
    if samples.is_empty() {
        return Err(invalid(format!("split {split:?} of {} is empty", data_dir.display())));
    }
    let clip_len = clip_len.unwrap_or(config.clip_len);
    let metrics = evaluate(&mut net, &samples, clip_len, frame_stride, 16)?;
    emit(&serde_json::to_string_pretty(&metrics)?);
    Ok(())
}

pub fn predict(ckpt: &Path, input: &Path, frame_stride: usize) -> Result<()> {
    let (mut net, _) = checkpoint::load(ckpt)?;
    let record = data::read_sequence(input)?;
    let config = net.config().clone();
    let value = match config.task {
        Task::Classification => {
            let (class, probs) = net.evaluate_sequence(&record.sequence, config.clip_len, frame_stride)?;
            serde_json::json!({ "class": class, "probabilities": probs.to_vec() })
        }
        Task::Segmentation => {
            let logits = net.predict(std::slice::from_ref(&record.sequence))?;
            let labels: Vec<usize> = logits[0].rows().into_iter().map(net::argmax).collect();
            serde_json::json!({ "frames": record.sequence.frames(), "points": record.sequence.points(), "labels": labels })
        }
    };
    emit(&value.to_string());
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck

/// Two random sequences sized for `config`, dense enough that the first
/// layer's neighborhoods hold several points.
fn random_batch(config: &NetConfig, seed: u64) -> Result<(Vec<PointCloudSequence>, Vec<Target>)> {
    let (frames, points) = (config.clip_len, config.min_points().max(4) * 2);
    let r = config
        .layers
        .iter()
        .find_map(|l| match l {
            LayerConfig::PstConv { spec, .. } => Some(spec.r),
            _ => None,
        })
        .unwrap_or(1.0);
    // about eight points per ball of radius r
    let side = r * (points as f64 * 4.19 / 8.0).cbrt();
    let mut g = rng::rng(seed);
    let mut batch = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..2 {
        let coords = Array3::from_shape_simple_fn((frames, points, 3), || g.gen_range(0.0..side));
        let feats = Array3::from_shape_simple_fn((frames, points, config.input_channels), || g.gen_range(-1.0..1.0));
        batch.push(PointCloudSequence::new(coords, feats)?);
        targets.push(match config.task {
            Task::Classification => Target::Class(g.gen_range(0..config.num_classes)),
            Task::Segmentation => Target::PerPoint((0..frames * points).map(|_| g.gen_range(0..config.num_classes)).collect()),
        });
    }
    Ok((batch, targets))
}

pub fn gradcheck(config: Option<&Path>, seed: u64, tol: f64, eps: f64) -> Result<()> {
    if !(tol > 0.0 && eps > 0.0) {
        return Err(invalid("--tol and --eps must be positive"));
    }
    let mut checks: Vec<OpCheck> = gradcheck::run_suite(seed, eps, tol)?;
    if let Some(path) = config {
        let run = RunConfig::load(path)?;
        let net = Network::new(run.network.clone(), seed)?;
        let (batch, targets) = random_batch(&run.network, rng::derive(seed, &[u64::MAX]))?;
        checks.extend(gradcheck::check_network("config", &net, &batch, &targets, eps, tol)?);
    }
    let mut failed = Vec::new();
    for c in &checks {
        let status = if c.report.passed { "PASS" } else { "FAIL" };
        println!("{status}  {:<32} max rel error {:.3e} over {} entries", c.name, c.report.max_rel_error, c.report.checked);
        if !c.report.passed {
            failed.push(c.name.clone());
        }
    }
    if failed.is_empty() {
        println!("all {} gradient checks passed at tolerance {tol:e}", checks.len());
        Ok(())
    } else {
        Err(Error::Numerical(format!("gradient check failed at tolerance {tol:e}: {}", failed.join(", "))))
    }
}

// ---------------------------------------------------------------------------
// inspect

fn fmt_shape(s: Shape) -> String {
    match s {
        Shape::Points { frames, points, channels } => format!("{frames}x{points}x{channels}"),
        Shape::Global { channels } => format!("{channels}"),
    }
}

pub fn inspect(config_path: &Path, frames: Option<usize>, points: usize) -> Result<()> {
    let config = RunConfig::load(config_path)?.network;
    let frames = frames.unwrap_or(config.clip_len);
    let shapes = config.layer_shapes(frames, points)?;
    let input = Shape::Points { frames, points, channels: config.input_channels };
    println!("{:<4} {:<9} {:<14} {:<14} tube", "#", "layer", "input", "output");
    let mut cur = input;
    for (i, (layer, &out)) in config.layers.iter().zip(&shapes).enumerate() {
        let tube = match (layer, cur) {
            (LayerConfig::PstConv { spec, .. }, Shape::Points { frames: f, .. }) => {
                let anchors = select_anchor_frames(f, spec)?;
                let padded: usize = anchors
                    .iter()
                    .map(|&a| spec.offsets().iter().filter(|&&o| a as isize + o < 0 || a as isize + o >= f as isize).count())
                    .sum();
                let k = spec.k.map_or("all".to_string(), |k| k.to_string());
                format!(
                    "l={} s_t={} p={:?} s_s={} r={} k={k} anchors={anchors:?} padded slices={padded}/{}",
                    spec.l,
                    spec.s_t,
                    spec.p,
                    spec.s_s,
                    spec.r,
                    anchors.len() * spec.l
                )
            }
            (LayerConfig::PstTrans { pair, spec, .. }, _) => format!("inverts #{pair}, l={} r={}", spec.l, spec.r),
            _ => String::new(),
        };
        println!("{i:<4} {:<9} {:<14} {:<14} {tube}", layer.kind(), fmt_shape(cur), fmt_shape(out));
        cur = out;
    }
    if let Shape::Points { frames: lo, points: no, .. } = cur {
        println!("{frames}x{points} -> {lo}x{no}");
    } else {
        println!("{frames}x{points} -> {}", fmt_shape(cur));
    }
    Ok(())
}
