//! Mini-batch SGD training and evaluation.

use serde::{Deserialize, Serialize};

use crate::data;
use crate::error::{Error, Result};
use crate::geom::Sampling;
use crate::metrics::Confusion;
use crate::net::{self, argmax, Network, Target, Task};
use crate::nn::{Sgd, SgdConfig};
use crate::rng;
use crate::sequence::PointCloudSequence;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sequence: PointCloudSequence,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub sgd: SgdConfig,
    /// Seeded anchor/neighbor sampling during training; evaluation is always deterministic.
    pub seeded_sampling: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 35, batch_size: 16, seed: 0, sgd: SgdConfig::default(), seeded_sampling: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    /// Sequence accuracy (classification) or per-point accuracy (segmentation).
    pub accuracy: f64,
    pub miou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval: Option<EvalResult>,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: Network,
    pub config: TrainConfig,
    sgd: Sgd,
}

fn check_finite(what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{what} became {v}")))
    }
}

impl Trainer {
    pub fn new(net: Network, config: TrainConfig) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        let sgd = Sgd::new(config.sgd.clone())?;
        Ok(Self { net, config, sgd })
    }

    fn sampling(&self, path: &[u64]) -> Sampling {
        if self.config.seeded_sampling {
            Sampling::Seeded(rng::derive(self.config.seed, path))
        } else {
            Sampling::Deterministic
        }
    }

    /// One SGD step on `batch`; returns the loss before the update.
    pub fn step(&mut self, batch: &[&Sample], epoch: usize, step: usize) -> Result<f64> {
        let seqs: Vec<PointCloudSequence> = batch.iter().map(|s| s.sequence.clone()).collect();
        let targets: Vec<Target> = batch.iter().map(|s| s.target.clone()).collect();
        let mode = self.sampling(&[epoch as u64, step as u64]);
        let pass = self.net.forward(&seqs, true, mode)?;
        let (loss, grad_logits) = net::batch_loss(&pass.logits, &targets)?;
        check_finite("training loss", loss)?;
        let grads = self.net.backward(&pass, &grad_logits)?;
        self.sgd.step(self.net.params_mut(), &grads, epoch)?;
        for (name, p) in self.net.param_names().iter().zip(self.net.params()) {
            if let Some(v) = p.iter().find(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("parameter {name} became {v} at epoch {epoch}, step {step}")));
            }
        }
        Ok(loss)
    }

    /// One pass over `samples` in a seeded shuffled order; returns the mean batch loss.
    pub fn train_epoch(&mut self, samples: &[Sample], epoch: usize) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::invalid("no training samples"));
        }
        let order = data::shuffled(samples.len(), rng::derive(self.config.seed, &[u64::MAX, epoch as u64]));
        let mut total = 0.0;
        let mut steps = 0;
        for (step, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            total += self.step(&batch, epoch, step)?;
            steps += 1;
        }
        Ok(total / steps as f64)
    }

    pub fn evaluate(&mut self, samples: &[Sample]) -> Result<EvalResult> {
        evaluate(&mut self.net, samples, self.config.batch_size)
    }

    /// Train for the configured epochs, evaluating on `test` after each one.
    /// `on_epoch` sees every log entry as soon as it is available.
    pub fn fit(
        &mut self,
        train: &[Sample],
        test: &[Sample],
        mut on_epoch: impl FnMut(&EpochLog, &Network) -> Result<()>,
    ) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::with_capacity(self.config.epochs);
        for epoch in 0..self.config.epochs {
            let lr = self.config.sgd.lr_at(epoch);
            let train_loss = self.train_epoch(train, epoch)?;
            let eval = if test.is_empty() { None } else { Some(self.evaluate(test)?) };
            let log = EpochLog { epoch, lr, train_loss, eval };
            on_epoch(&log, &self.net)?;
            logs.push(log);
        }
        Ok(logs)
    }
}

/// Eval-mode loss, accuracy and mIoU over `samples`.
pub fn evaluate(net: &mut Network, samples: &[Sample], batch_size: usize) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(Error::invalid("no evaluation samples"));
    }
    let classes = net.config().num_classes;
    let mut confusion = Confusion::new(classes);
    let mut loss = 0.0;
    let mut rows = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let seqs: Vec<PointCloudSequence> = chunk.iter().map(|s| s.sequence.clone()).collect();
        let targets: Vec<Target> = chunk.iter().map(|s| s.target.clone()).collect();
        let logits = net.forward(&seqs, false, Sampling::Deterministic)?.logits;
        let n: usize = logits.iter().map(|l| l.nrows()).sum();
        let (l, _) = net::batch_loss(&logits, &targets)?;
        loss += l * n as f64;
        rows += n;
        for (lg, t) in logits.iter().zip(&targets) {
            let truth: &[usize] = match t {
                Target::Class(c) => std::slice::from_ref(c),
                Target::PerPoint(v) => v,
            };
            for (row, &label) in lg.rows().into_iter().zip(truth) {
                confusion.add(label, argmax(row))?;
            }
        }
    }
    let loss = loss / rows as f64;
    check_finite("evaluation loss", loss)?;
    Ok(EvalResult { loss, accuracy: confusion.accuracy(), miou: confusion.mean_iou() })
}

/// Sequence-level accuracy with clip-probability averaging.
pub fn evaluate_sequences(net: &mut Network, samples: &[Sample], clip_len: usize, frame_stride: usize) -> Result<f64> {
    if net.config().task != Task::Classification {
        return Err(Error::invalid("clip averaging applies to classification networks"));
    }
    if samples.is_empty() {
        return Err(Error::invalid("no evaluation samples"));
    }
    let mut correct = 0;
    for s in samples {
        let Target::Class(label) = s.target else {
            return Err(Error::invalid("classification sample without a class label"));
        };
        let (pred, _) = net.evaluate_sequence(&s.sequence, clip_len, frame_stride)?;
        correct += (pred == label) as usize;
    }
    Ok(correct as f64 / samples.len() as f64)
}
