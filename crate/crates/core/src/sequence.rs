use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::error::{Error, Result};

/// `L` frames of `N` points with `C` features per point (`C` may be zero).
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudSequence {
    coords: Array3<f64>,
    feats: Array3<f64>,
}

impl PointCloudSequence {
    pub fn new(coords: Array3<f64>, feats: Array3<f64>) -> Result<Self> {
        let (l, n, d) = coords.dim();
        if d != 3 {
            return Err(Error::invalid(format!("coordinates must be 3D, got {d}")));
        }
        if l == 0 || n == 0 {
            return Err(Error::invalid("sequence needs at least one frame and one point"));
        }
        if feats.dim().0 != l || feats.dim().1 != n {
            return Err(Error::invalid(format!(
                "feature shape {:?} does not match {l}x{n} points",
                feats.dim()
            )));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite coordinate"));
        }
        Ok(Self { coords, feats })
    }

    /// A featureless sequence.
    pub fn from_coords(coords: Array3<f64>) -> Result<Self> {
        let (l, n, _) = coords.dim();
        Self::new(coords, Array3::zeros((l, n, 0)))
    }

    /// Stack per-frame point sets; every frame must have the same point count.
    pub fn from_frames(frames: &[Array2<f64>]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::invalid("sequence needs at least one frame"))?;
        let n = first.nrows();
        let mut coords = Array3::zeros((frames.len(), n, 3));
        for (t, frame) in frames.iter().enumerate() {
            if frame.dim() != (n, 3) {
                return Err(Error::invalid(format!(
                    "frame {t} has shape {:?}, expected ({n}, 3)",
                    frame.dim()
                )));
            }
            coords.index_axis_mut(Axis(0), t).assign(frame);
        }
        Self::from_coords(coords)
    }

    pub fn frames(&self) -> usize {
        self.coords.dim().0
    }

    pub fn points(&self) -> usize {
        self.coords.dim().1
    }

    pub fn channels(&self) -> usize {
        self.feats.dim().2
    }

    pub fn coords(&self) -> ArrayView3<'_, f64> {
        self.coords.view()
    }

    pub fn feats(&self) -> ArrayView3<'_, f64> {
        self.feats.view()
    }

    pub fn frame_coords(&self, t: usize) -> ArrayView2<'_, f64> {
        self.coords.index_axis(Axis(0), t)
    }

    pub fn into_parts(self) -> (Array3<f64>, Array3<f64>) {
        (self.coords, self.feats)
    }

    /// Frames `start, start + stride, ...` (`len` of them).
    pub fn select_frames(&self, start: usize, len: usize, stride: usize) -> Result<Self> {
        let stop = start + (len.saturating_sub(1)) * stride;
        if len == 0 || stride == 0 || stop >= self.frames() {
            return Err(Error::invalid(format!(
                "frame window start={start} len={len} stride={stride} exceeds {} frames",
                self.frames()
            )));
        }
        let sl = s![start..=stop;stride, .., ..];
        Ok(Self {
            coords: self.coords.slice(sl).to_owned(),
            feats: self.feats.slice(sl).to_owned(),
        })
    }

    /// Add `offset` to every coordinate.
    pub fn translated(&self, offset: [f64; 3]) -> Self {
        let mut coords = self.coords.clone();
        for mut p in coords.lanes_mut(Axis(2)) {
            for d in 0..3 {
                p[d] += offset[d];
            }
        }
        Self { coords, feats: self.feats.clone() }
    }
}
