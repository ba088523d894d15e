//! Inputs shared by the benchmarks.

use ndarray::Array3;
use rand::Rng;

/// `frames x points` uniform coordinates in a cube of side `side`, plus `channels` features.
pub fn random_sequence(frames: usize, points: usize, channels: usize, side: f64, seed: u64) -> (Array3<f64>, Array3<f64>) {
    let mut rng = pstnet::rng::rng(seed);
    let coords = Array3::from_shape_simple_fn((frames, points, 3), || rng.gen_range(0.0..side));
    let feats = Array3::from_shape_simple_fn((frames, points, channels), || rng.gen_range(-1.0..1.0));
    (coords, feats)
}
