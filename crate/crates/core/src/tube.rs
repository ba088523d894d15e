//! Point tubes: the index structure a PST convolution runs over.
//!
//! A tube is rooted at an anchor point sampled (FPS) in an anchor frame. The
//! anchor's coordinates are copied unchanged to the other frames of its
//! temporal window, and each (anchor, frame) pair gets a radius neighborhood.

use ndarray::{ArrayView3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, NeighborList, Sampling};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorMode {
    /// Anchor frame sits in the middle of its window.
    #[default]
    Centered,
    /// Anchor frame is the last frame of its window.
    Trailing,
}

/// Hyperparameters of a point tube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeSpec {
    /// Temporal kernel size (odd).
    pub l: usize,
    /// Temporal stride.
    pub s_t: usize,
    /// Left and right temporal padding.
    pub p: [usize; 2],
    /// Spatial subsampling rate.
    pub s_s: usize,
    /// Spatial search radius.
    pub r: f64,
    /// Neighbors per slice; `None` keeps every in-radius point.
    pub k: Option<usize>,
    #[serde(default)]
    pub anchor_mode: AnchorMode,
}

impl TubeSpec {
    pub fn new(l: usize, s_t: usize, p: [usize; 2], s_s: usize, r: f64, k: Option<usize>) -> Self {
        Self { l, s_t, p, s_s, r, k, anchor_mode: AnchorMode::Centered }
    }

    pub fn with_anchor_mode(mut self, mode: AnchorMode) -> Self {
        self.anchor_mode = mode;
        self
    }

    pub fn half(&self) -> usize {
        self.l / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.l == 0 || self.l % 2 == 0 {
            return Err(Error::invalid(format!("temporal kernel size must be odd, got {}", self.l)));
        }
        if self.half() < self.p[0].max(self.p[1]) {
            return Err(Error::invalid(format!(
                "temporal padding {:?} exceeds floor(l/2) = {}",
                self.p,
                self.half()
            )));
        }
        if self.s_t == 0 || self.s_s == 0 {
            return Err(Error::invalid("strides must be at least 1"));
        }
        if !(self.r > 0.0) || !self.r.is_finite() {
            return Err(Error::invalid(format!("radius must be positive, got {}", self.r)));
        }
        if self.k == Some(0) {
            return Err(Error::invalid("neighbor count must be at least 1"));
        }
        Ok(())
    }

    /// `L' = floor((L + p1 + p2 - l) / s_t) + 1`.
    pub fn output_frames(&self, frames: usize) -> Result<usize> {
        self.validate()?;
        let padded = frames + self.p[0] + self.p[1];
        if frames == 0 || padded < self.l {
            return Err(Error::invalid(format!(
                "sequence of {frames} frames too short for l={} with padding {:?}",
                self.l, self.p
            )));
        }
        Ok((padded - self.l) / self.s_t + 1)
    }

    /// `N' = floor(N / s_s)`.
    pub fn output_points(&self, points: usize) -> Result<usize> {
        let n = points / self.s_s.max(1);
        if n == 0 {
            return Err(Error::invalid(format!(
                "{points} points cannot be subsampled by {}",
                self.s_s
            )));
        }
        Ok(n)
    }

    /// Frame offsets of the window relative to the anchor frame.
    pub fn offsets(&self) -> Vec<isize> {
        let l = self.l as isize;
        match self.anchor_mode {
            AnchorMode::Centered => {
                let h = (self.l / 2) as isize;
                (-h..=h).collect()
            }
            AnchorMode::Trailing => (-(l - 1)..=0).collect(),
        }
    }
}

/// Anchor frame indices (0-based) for a sequence of `frames` frames.
pub fn select_anchor_frames(frames: usize, spec: &TubeSpec) -> Result<Vec<usize>> {
    let out = spec.output_frames(frames)?;
    let lead = match spec.anchor_mode {
        AnchorMode::Centered => spec.half(),
        AnchorMode::Trailing => spec.l - 1,
    } as isize;
    (0..out)
        .map(|i| {
            let a = (i * spec.s_t) as isize + lead - spec.p[0] as isize;
            if a < 0 || a >= frames as isize {
                Err(Error::invalid(format!(
                    "anchor frame {a} outside 0..{frames} (padding {:?} incompatible with {:?} anchors)",
                    spec.p, spec.anchor_mode
                )))
            } else {
                Ok(a as usize)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub coords: [f64; 3],
    /// Index of the sampled point within its anchor frame.
    pub source: usize,
}

/// Neighborhoods of every anchor in one frame of the window.
#[derive(Debug, Clone, PartialEq)]
pub struct TubeSlice {
    /// Source frame, `None` when the offset falls into padding.
    pub frame: Option<usize>,
    /// One list per anchor; empty when the slice is padding.
    pub neighbors: Vec<NeighborList>,
}

impl TubeSlice {
    pub fn is_valid(&self) -> bool {
        self.frame.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointTube {
    pub spec: TubeSpec,
    pub input_frames: usize,
    pub input_points: usize,
    pub anchor_frames: Vec<usize>,
    /// `L' x N'` anchors.
    pub anchors: Vec<Vec<Anchor>>,
    /// `L' x l` slices.
    pub slices: Vec<Vec<TubeSlice>>,
}

impl PointTube {
    pub fn out_frames(&self) -> usize {
        self.anchor_frames.len()
    }

    pub fn out_points(&self) -> usize {
        self.anchors.first().map_or(0, Vec::len)
    }

    pub fn slice_valid(&self, i: usize, k: usize) -> bool {
        self.slices[i][k].is_valid()
    }

    pub fn clamped_fraction(&self) -> f64 {
        let (mut clamped, mut total) = (0usize, 0usize);
        for nl in self.slices.iter().flatten().flat_map(|s| &s.neighbors) {
            total += 1;
            clamped += nl.clamped as usize;
        }
        if total == 0 {
            0.0
        } else {
            clamped as f64 / total as f64
        }
    }

    /// Mean number of distinct points per valid neighborhood.
    pub fn mean_unique_neighbors(&self) -> f64 {
        let (mut sum, mut total) = (0usize, 0usize);
        for nl in self.slices.iter().flatten().flat_map(|s| &s.neighbors) {
            let mut idx = nl.indices.clone();
            idx.sort_unstable();
            idx.dedup();
            sum += idx.len();
            total += 1;
        }
        if total == 0 {
            0.0
        } else {
            sum as f64 / total as f64
        }
    }
}

/// Build the tube for a `L x N x 3` coordinate block.
pub fn build_tube(coords: ArrayView3<'_, f64>, spec: &TubeSpec, mode: Sampling) -> Result<PointTube> {
    spec.validate()?;
    let (frames, points, dim) = coords.dim();
    if dim != 3 {
        return Err(Error::invalid(format!("coordinates must be 3D, got {dim}")));
    }
    let anchor_frames = select_anchor_frames(frames, spec)?;
    let n_out = spec.output_points(points)?;
    let offsets = spec.offsets();

    let per_frame: Vec<(Vec<Anchor>, Vec<TubeSlice>)> = anchor_frames
        .par_iter()
        .enumerate()
        .map(|(i, &frame)| {
            let frame_pts = coords.index_axis(Axis(0), frame);
            let picks = geom::farthest_point_sample(frame_pts, n_out, mode.derive(&[i as u64]))?;
            let anchors: Vec<Anchor> = picks
                .iter()
                .map(|&src| Anchor { coords: geom::row(&frame_pts, src), source: src })
                .collect();
            let slices = offsets
                .iter()
                .enumerate()
                .map(|(k, &off)| {
                    let t = frame as isize + off;
                    if t < 0 || t >= frames as isize {
                        return Ok(TubeSlice { frame: None, neighbors: Vec::new() });
                    }
                    let t = t as usize;
                    let pts = coords.index_axis(Axis(0), t);
                    let neighbors = anchors
                        .iter()
                        .enumerate()
                        .map(|(n, a)| {
                            geom::radius_neighbors(
                                a.coords,
                                pts,
                                spec.r,
                                spec.k,
                                mode.derive(&[i as u64, k as u64, n as u64, 1]),
                            )
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok(TubeSlice { frame: Some(t), neighbors })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((anchors, slices))
        })
        .collect::<Result<Vec<_>>>()?;

    let (anchors, slices) = per_frame.into_iter().unzip();
    Ok(PointTube { spec: spec.clone(), input_frames: frames, input_points: points, anchor_frames, anchors, slices })
}
