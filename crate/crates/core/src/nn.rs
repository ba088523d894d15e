//! Framework-free building blocks with explicit forward/backward passes.

use ndarray::{Array1, Array2, ArrayD, ArrayView1, ArrayView2, ArrayView3, ArrayViewMutD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod init {
    use ndarray::{Array, Dimension, ShapeBuilder};
    use rand::Rng;

    /// Uniform Kaiming fan-in init: `U(-b, b)` with `b = scale * sqrt(6 / fan_in)`.
    pub fn uniform<R, Sh, D>(rng: &mut R, shape: Sh, fan_in: usize, scale: f64) -> Array<f64, D>
    where
        R: Rng,
        D: Dimension,
        Sh: ShapeBuilder<Dim = D>,
    {
        let bound = scale * (6.0 / fan_in.max(1) as f64).sqrt();
        Array::from_shape_simple_fn(shape, || rng.gen_range(-bound..=bound))
    }
}

/// Row-major copy of `a` unless it already is; matrix products may hand back
/// column-major results, which cannot be reshaped in place.
pub(crate) fn standard<D: ndarray::Dimension>(a: ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

// ---------------------------------------------------------------------------
// Batch normalization

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    training: bool,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Normalize rows of `x` (samples x channels). In training mode the batch
    /// statistics are used and folded into the running estimates.
    pub fn forward(&mut self, x: ArrayView2<'_, f64>, training: bool) -> Result<(Array2<f64>, BatchNormCache)> {
        let (rows, c) = x.dim();
        if c != self.channels() {
            return Err(Error::invalid(format!("batch norm over {} channels got {c}", self.channels())));
        }
        let (mean, var) = if training {
            if rows < 2 {
                return Err(Error::invalid("training-mode batch norm needs at least 2 samples"));
            }
            let mean = x.mean_axis(Axis(0)).expect("rows > 0");
            let var = x.var_axis(Axis(0), 0.0);
            let unbiased = &var * (rows as f64 / (rows - 1) as f64);
            self.running_mean = &self.running_mean * self.momentum + &mean * (1.0 - self.momentum);
            self.running_var = &self.running_var * self.momentum + &unbiased * (1.0 - self.momentum);
            (mean, var)
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let xhat = (&x - &mean) * &inv_std;
        let y = &xhat * &self.gamma + &self.beta;
        Ok((y, BatchNormCache { xhat, inv_std, training }))
    }

    /// Returns `(dx, dgamma, dbeta)`.
    pub fn backward(
        &self,
        cache: &BatchNormCache,
        grad: ArrayView2<'_, f64>,
    ) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
        let dgamma = (&grad * &cache.xhat).sum_axis(Axis(0));
        let dbeta = grad.sum_axis(Axis(0));
        let dxhat = &grad * &self.gamma;
        let dx = if cache.training {
            let rows = grad.nrows() as f64;
            let mean_dxhat = dxhat.sum_axis(Axis(0)) / rows;
            let mean_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(0)) / rows;
            (&dxhat - &mean_dxhat - &(&cache.xhat * &mean_dxhat_xhat)) * &cache.inv_std
        } else {
            dxhat * &cache.inv_std
        };
        (dx, dgamma, dbeta)
    }
}

// ---------------------------------------------------------------------------
// Activations and pooling

pub fn relu<D: ndarray::Dimension>(x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    x.mapv(|v| v.max(0.0))
}

/// Pass the gradient where the forward input was positive.
pub fn relu_backward<D: ndarray::Dimension>(
    input: &ndarray::Array<f64, D>,
    grad: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let mut g = grad.clone();
    g.zip_mut_with(input, |g, &x| {
        if x <= 0.0 {
            *g = 0.0
        }
    });
    g
}

#[derive(Debug, Clone)]
pub struct PoolCache {
    frames: usize,
    points: usize,
    /// Winning frame per channel.
    argmax: Vec<usize>,
}

/// Mean over the points of each frame, then max over frames.
pub fn pool_sequence(feats: ArrayView3<'_, f64>) -> Result<(Array1<f64>, PoolCache)> {
    let (frames, points, c) = feats.dim();
    if frames == 0 || points == 0 {
        return Err(Error::invalid("cannot pool an empty sequence"));
    }
    let means = feats.mean_axis(Axis(1)).expect("points > 0");
    let mut out = Array1::from_elem(c, f64::NEG_INFINITY);
    let mut argmax = vec![0; c];
    for t in 0..frames {
        for ch in 0..c {
            if means[[t, ch]] > out[ch] {
                out[ch] = means[[t, ch]];
                argmax[ch] = t;
            }
        }
    }
    Ok((out, PoolCache { frames, points, argmax }))
}

pub fn pool_sequence_backward(cache: &PoolCache, grad: ArrayView1<'_, f64>) -> ndarray::Array3<f64> {
    let c = cache.argmax.len();
    let mut g = ndarray::Array3::zeros((cache.frames, cache.points, c));
    let share = 1.0 / cache.points as f64;
    for (ch, &t) in cache.argmax.iter().enumerate() {
        for n in 0..cache.points {
            g[[t, n, ch]] = grad[ch] * share;
        }
    }
    g
}

// ---------------------------------------------------------------------------
// Affine maps

/// `y = W x + b`, applied to each row. Serves as the FC head (one row per
/// sequence) and the per-point 1D convolution head (one row per point).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(Error::invalid("bias width differs from output rows"));
        }
        Ok(Self { weight, bias })
    }

    pub fn init<R: Rng>(c_in: usize, c_out: usize, scale: f64, rng: &mut R) -> Self {
        Self { weight: init::uniform(rng, (c_out, c_in), c_in, scale), bias: Array1::zeros(c_out) }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.in_channels() {
            return Err(Error::invalid(format!(
                "linear map expects {} inputs, got {}",
                self.in_channels(),
                x.ncols()
            )));
        }
        Ok(x.dot(&self.weight.t()) + &self.bias)
    }

    /// Returns `(dx, dW, db)`.
    pub fn backward(&self, x: ArrayView2<'_, f64>, grad: ArrayView2<'_, f64>) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
        (grad.dot(&self.weight), grad.t().dot(&x), grad.sum_axis(Axis(0)))
    }
}

// ---------------------------------------------------------------------------
// Loss

pub fn softmax(logits: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = logits.mapv(|v| (v - max).exp());
    let z = e.sum();
    e / z
}

/// Returns `(loss, dloss/dlogits)`.
pub fn softmax_cross_entropy(logits: ArrayView1<'_, f64>, label: usize) -> Result<(f64, Array1<f64>)> {
    if label >= logits.len() {
        return Err(Error::invalid(format!("label {label} out of {} classes", logits.len())));
    }
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok((lse - logits[label], grad))
}

// ---------------------------------------------------------------------------
// Optimizer

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_rate: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 0.01, momentum: 0.9, decay_epochs: vec![10, 20], decay_rate: 0.1 }
    }
}

impl SgdConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        // dividing by the integral reciprocal keeps 0.01 -> 0.001 -> 0.0001 exact
        self.lr / self.decay_rate.recip().powi(decays as i32)
    }
}

/// SGD with momentum: `v <- μ v + g`, `p <- p - lr v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<ArrayD<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", config.lr)));
        }
        Ok(Self { config, velocity: Vec::new() })
    }

    pub fn velocity(&self) -> &[ArrayD<f64>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, v: Vec<ArrayD<f64>>) {
        self.velocity = v;
    }

    /// Apply one update, returning the learning rate used.
    pub fn step(&mut self, params: Vec<ArrayViewMutD<'_, f64>>, grads: &[ArrayD<f64>], epoch: usize) -> Result<f64> {
        if params.len() != grads.len() {
            return Err(Error::invalid(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| ArrayD::zeros(g.raw_dim())).collect();
        }
        let lr = self.config.lr_at(epoch);
        let mu = self.config.momentum;
        for ((mut p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() {
                return Err(Error::invalid(format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape())));
            }
            v.zip_mut_with(g, |v, &g| *v = mu * *v + g);
            p.zip_mut_with(v, |p, &v| *p -= lr * v);
        }
        Ok(lr)
    }
}

// ---------------------------------------------------------------------------
// Gradient checking

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub passed: bool,
}

/// Magnitude below which both gradients count as zero.
pub const GRAD_CHECK_FLOOR: f64 = 1e-7;

/// `|a - n| / max(|a|, |n|)`, zero when both are below [`GRAD_CHECK_FLOOR`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < GRAD_CHECK_FLOOR {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compare `analytic` against central differences of `f` around `x`.
pub fn grad_check<F>(mut f: F, x: &[f64], analytic: &[f64], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if x.len() != analytic.len() {
        return Err(Error::invalid("gradient length differs from input length"));
    }
    let mut probe = x.to_vec();
    let mut worst = (0.0, 0);
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let up = f(&probe);
        probe[i] = x[i] - eps;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * eps);
        let err = relative_error(analytic[i], numeric);
        if !(err <= worst.0) {
            worst = (err, i);
        }
    }
    let max_rel_error = worst.0;
    Ok(GradCheckReport { max_rel_error, worst_index: worst.1, checked: x.len(), passed: max_rel_error < tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array3};

    #[test]
    fn bn_constant_input_gives_beta() {
        let mut bn = BatchNorm::new(2);
        bn.beta = arr1(&[0.5, -1.0]);
        let x = arr2(&[[3.0, 7.0], [3.0, 7.0], [3.0, 7.0]]);
        let (y, _) = bn.forward(x.view(), true).unwrap();
        for r in y.rows() {
            assert_eq!(r, arr1(&[0.5, -1.0]));
        }
    }

    #[test]
    fn bn_eval_identity() {
        let mut bn = BatchNorm::new(3);
        bn.eps = 0.0;
        let x = arr2(&[[1.0, -2.0, 3.5]]);
        let (y, _) = bn.forward(x.view(), false).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn bn_training_statistics() {
        let mut rng = crate::rng::rng(1);
        let x = Array2::from_shape_simple_fn((200, 4), || rng.gen_range(-3.0..5.0));
        let mut bn = BatchNorm::new(4);
        bn.eps = 0.0;
        let (y, _) = bn.forward(x.view(), true).unwrap();
        for c in 0..4 {
            let col = y.column(c);
            assert!(col.mean().unwrap().abs() < 1e-6);
            assert!((col.var(0.0) - 1.0).abs() < 1e-6);
        }
        assert!(bn.running_var.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn bn_needs_two_rows() {
        let mut bn = BatchNorm::new(1);
        assert!(bn.forward(arr2(&[[1.0]]).view(), true).is_err());
    }

    #[test]
    fn relu_values() {
        assert_eq!(relu(&arr1(&[-1.0, 2.0])), arr1(&[0.0, 2.0]));
        assert_eq!(relu_backward(&arr1(&[-1.0, 2.0]), &arr1(&[5.0, 5.0])), arr1(&[0.0, 5.0]));
    }

    #[test]
    fn pool_examples() {
        let c = Array3::from_elem((3, 4, 2), 1.5);
        assert_eq!(pool_sequence(c.view()).unwrap().0, arr1(&[1.5, 1.5]));
        let one = Array3::from_shape_vec((1, 1, 2), vec![3.0, -4.0]).unwrap();
        assert_eq!(pool_sequence(one.view()).unwrap().0, arr1(&[3.0, -4.0]));
        // frame means [1, 5] and [4, 2]
        let two = Array3::from_shape_vec((2, 2, 2), vec![0.0, 4.0, 2.0, 6.0, 3.0, 1.0, 5.0, 3.0])
            .unwrap();
        assert_eq!(pool_sequence(two.view()).unwrap().0, arr1(&[4.0, 5.0]));
    }

    #[test]
    fn linear_examples() {
        let id = Linear::new(Array2::eye(3), Array1::zeros(3)).unwrap();
        let x = arr2(&[[1.0, -2.0, 0.5]]);
        assert_eq!(id.forward(x.view()).unwrap(), x);
        let b = Linear::new(arr2(&[[1.0, 2.0], [3.0, 4.0]]), arr1(&[0.5, -0.5])).unwrap();
        assert_eq!(b.forward(Array2::zeros((1, 2)).view()).unwrap(), arr2(&[[0.5, -0.5]]));
    }

    #[test]
    fn cross_entropy_values() {
        let (loss, _) = softmax_cross_entropy(Array1::zeros(5).view(), 2).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
        let (loss, _) = softmax_cross_entropy(arr1(&[50.0, 0.0, 0.0]).view(), 0).unwrap();
        assert!(loss < 1e-15);
        assert!(softmax_cross_entropy(arr1(&[0.0]).view(), 1).is_err());
    }

    #[test]
    fn lr_schedule() {
        let cfg = SgdConfig::default();
        assert_eq!(cfg.lr_at(0), 0.01);
        assert_eq!(cfg.lr_at(9), 0.01);
        assert_eq!(cfg.lr_at(10), 0.001);
        assert_eq!(cfg.lr_at(20), 0.0001);
        assert_eq!(cfg.lr_at(34), 0.0001);
    }

    #[test]
    fn sgd_trajectory_by_hand() {
        // p0 = 1, g = 2 both steps, mu = 0.9, lr = 0.01:
        // v1 = 2, p1 = 0.98; v2 = 0.9*2 + 2 = 3.8, p2 = 0.98 - 0.038 = 0.942
        let mut sgd = Sgd::new(SgdConfig::default()).unwrap();
        let mut p = ArrayD::from_elem(vec![1], 1.0);
        let g = [ArrayD::from_elem(vec![1], 2.0)];
        sgd.step(vec![p.view_mut()], &g, 0).unwrap();
        assert!((p[[0]] - 0.98).abs() < 1e-15);
        sgd.step(vec![p.view_mut()], &g, 0).unwrap();
        assert!((p[[0]] - 0.942).abs() < 1e-15);

        let mut plain = Sgd::new(SgdConfig { momentum: 0.0, ..SgdConfig::default() }).unwrap();
        let mut q = ArrayD::from_elem(vec![1], 1.0);
        plain.step(vec![q.view_mut()], &g, 0).unwrap();
        plain.step(vec![q.view_mut()], &g, 0).unwrap();
        assert!((q[[0]] - 0.96).abs() < 1e-15);
    }

    #[test]
    fn grad_check_linear_map() {
        let w = [0.5, -1.5, 2.0];
        let f = |x: &[f64]| x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let rep = grad_check(f, &[1.0, 2.0, 3.0], &w, 1e-5, 1e-8).unwrap();
        assert!(rep.passed, "{rep:?}");
        let bad = grad_check(f, &[1.0, 2.0, 3.0], &[0.5, -1.5, 2.1], 1e-5, 1e-8).unwrap();
        assert!(!bad.passed);
        assert_eq!(bad.worst_index, 2);
    }

    #[test]
    fn grad_check_relu_away_from_zero() {
        let x = [-1.0, 0.7, 2.0];
        let f = |v: &[f64]| v.iter().map(|&a| a.max(0.0) * a.max(0.0)).sum::<f64>();
        let analytic: Vec<f64> = x.iter().map(|&a: &f64| 2.0 * a.max(0.0)).collect();
        assert!(grad_check(f, &x, &analytic, 1e-5, 1e-8).unwrap().passed);
    }
}
