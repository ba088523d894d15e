//! Classification accuracy, confusion matrices and mean IoU.

use ndarray::Array2;

use crate::error::{Error, Result};

/// `matrix[[truth, predicted]]` counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Confusion {
    pub matrix: Array2<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self { matrix: Array2::zeros((classes, classes)) }
    }

    pub fn from_pairs(classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        let mut c = Self::new(classes);
        c.add_all(truth, predicted)?;
        Ok(c)
    }

    pub fn classes(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let k = self.classes();
        if truth >= k || predicted >= k {
            return Err(Error::invalid(format!("label pair ({truth}, {predicted}) outside {k} classes")));
        }
        self.matrix[[truth, predicted]] += 1;
        Ok(())
    }

    pub fn add_all(&mut self, truth: &[usize], predicted: &[usize]) -> Result<()> {
        if truth.len() != predicted.len() {
            return Err(Error::invalid("truth and prediction lengths differ"));
        }
        truth.iter().zip(predicted).try_for_each(|(&t, &p)| self.add(t, p))
    }

    pub fn total(&self) -> u64 {
        self.matrix.sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        self.matrix.diag().sum() as f64 / total as f64
    }

    /// `TP / (TP + FP + FN)` per class; `None` when the class never occurs
    /// in either truth or prediction.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.classes())
            .map(|c| {
                let tp = self.matrix[[c, c]];
                let fn_ = self.matrix.row(c).sum() - tp;
                let fp = self.matrix.column(c).sum() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Mean IoU over the classes that occur.
    pub fn mean_iou(&self) -> f64 {
        let present: Vec<f64> = self.iou().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}
