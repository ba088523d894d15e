//! PST transposed convolution.
//!
//! Each encoded anchor feature `F'` at anchor frame `t` expands into `l` slice
//! features `T'_k F'` that land on frames `t + offset(k)`. Every original
//! point then gathers the slice features of the anchors around it, weighted by
//! inverse squared distance, and a sharing kernel `S'` maps the result to the
//! output width.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::geom::{row, sq_dist};
use crate::nn::init;
use crate::tube::{select_anchor_frames, TubeSpec};

/// Lower clamp on squared distance in the interpolation weights.
pub const INTERP_EPS: f64 = 1e-10;

/// Temporal transposed kernel `T'` (`l x C'_m x C'`) and sharing kernel
/// `S'` (`C'' x C'_m`).
#[derive(Debug, Clone, PartialEq)]
pub struct TransKernel {
    pub temporal: Array3<f64>,
    pub sharing: Array2<f64>,
}

impl TransKernel {
    pub fn new(temporal: Array3<f64>, sharing: Array2<f64>) -> Result<Self> {
        if temporal.dim().0 % 2 == 0 {
            return Err(Error::invalid("transposed temporal kernel size must be odd"));
        }
        if temporal.dim().1 != sharing.ncols() {
            return Err(Error::invalid(format!(
                "T' produces {} channels, S' consumes {}",
                temporal.dim().1,
                sharing.ncols()
            )));
        }
        Ok(Self { temporal, sharing })
    }

    pub fn size(&self) -> usize {
        self.temporal.dim().0
    }

    pub fn in_channels(&self) -> usize {
        self.temporal.dim().2
    }

    pub fn mid_channels(&self) -> usize {
        self.temporal.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.sharing.nrows()
    }
}

/// Slice features one anchor frame sends to one target frame.
#[derive(Debug, Clone)]
pub struct Contribution {
    /// Index into the encoded (`L'`) frames.
    pub anchor_frame: usize,
    /// Kernel tap.
    pub tap: usize,
    /// `N' x C'_m`.
    pub values: Array2<f64>,
}

/// Result of the temporal transposed convolution: contributions per target frame.
#[derive(Debug, Clone)]
pub struct TemporalExpansion {
    pub frames: Vec<Vec<Contribution>>,
}

fn expansion_plan(encoded_frames: usize, spec: &TubeSpec, target_frames: usize) -> Result<Vec<Vec<(usize, usize)>>> {
    let expected = spec.output_frames(target_frames)?;
    if expected != encoded_frames {
        return Err(Error::invalid(format!(
            "spec maps {target_frames} frames to {expected}, encoded sequence has {encoded_frames}"
        )));
    }
    let anchors = select_anchor_frames(target_frames, spec)?;
    let offsets = spec.offsets();
    let mut plan = vec![Vec::new(); target_frames];
    for (i, &a) in anchors.iter().enumerate() {
        for (k, &off) in offsets.iter().enumerate() {
            let t = a as isize + off;
            if t >= 0 && (t as usize) < target_frames {
                plan[t as usize].push((i, k));
            }
        }
    }
    Ok(plan)
}

pub fn temporal_trans_conv(
    feats: ArrayView3<'_, f64>,
    spec: &TubeSpec,
    kernel: &TransKernel,
    target_frames: usize,
) -> Result<TemporalExpansion> {
    if spec.l != kernel.size() {
        return Err(Error::invalid("kernel size differs from spec l"));
    }
    if feats.dim().2 != kernel.in_channels() {
        return Err(Error::invalid(format!(
            "T' expects {} channels, features have {}",
            kernel.in_channels(),
            feats.dim().2
        )));
    }
    let plan = expansion_plan(feats.dim().0, spec, target_frames)?;
    let frames = plan
        .into_iter()
        .map(|entries| {
            entries
                .into_iter()
                .map(|(i, k)| Contribution {
                    anchor_frame: i,
                    tap: k,
                    values: feats.index_axis(Axis(0), i).dot(&kernel.temporal.index_axis(Axis(0), k).t()),
                })
                .collect()
        })
        .collect();
    Ok(TemporalExpansion { frames })
}

/// Normalized interpolation weights: per original point, `(anchor, weight)`
/// pairs summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpWeights {
    pub entries: Vec<Vec<(usize, f64)>>,
    pub anchors: usize,
}

impl InterpWeights {
    /// `Σ w M'` for every original point (`N x C`).
    pub fn apply(&self, values: ArrayView2<'_, f64>) -> Array2<f64> {
        let c = values.ncols();
        let mut out = Array2::zeros((self.entries.len(), c));
        for (p, entry) in self.entries.iter().enumerate() {
            let mut o = out.row_mut(p);
            for &(a, w) in entry {
                o.scaled_add(w, &values.row(a));
            }
        }
        out
    }

    /// Adjoint of [`apply`](Self::apply).
    pub fn apply_transposed(&self, grad: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.anchors, grad.ncols()));
        for (p, entry) in self.entries.iter().enumerate() {
            for &(a, w) in entry {
                out.row_mut(a).scaled_add(w, &grad.row(p));
            }
        }
        out
    }
}

pub fn interp_weights(original: ArrayView2<'_, f64>, anchors: ArrayView2<'_, f64>, r: f64) -> Result<InterpWeights> {
    if anchors.nrows() == 0 {
        return Err(Error::invalid("interpolation needs at least one anchor"));
    }
    if original.ncols() != 3 || anchors.ncols() != 3 {
        return Err(Error::invalid("interpolation coordinates must be 3D"));
    }
    let r2 = r * r;
    let entries = (0..original.nrows())
        .map(|p| {
            let x = row(&original, p);
            let d: Vec<f64> = (0..anchors.nrows()).map(|a| sq_dist(x, row(&anchors, a))).collect();
            let mut e: Vec<(usize, f64)> = d
                .iter()
                .enumerate()
                .filter(|(_, &d2)| d2 <= r2)
                .map(|(a, &d2)| (a, 1.0 / d2.max(INTERP_EPS)))
                .collect();
            if e.is_empty() {
                let nearest = (0..d.len())
                    .min_by(|&a, &b| d[a].partial_cmp(&d[b]).unwrap().then(a.cmp(&b)))
                    .expect("anchors non-empty");
                return vec![(nearest, 1.0)];
            }
            let total: f64 = e.iter().map(|&(_, w)| w).sum();
            for (_, w) in &mut e {
                *w /= total;
            }
            e
        })
        .collect();
    Ok(InterpWeights { entries, anchors: anchors.nrows() })
}

/// Interpolate anchor features onto one frame of original points and apply `S'`.
pub fn spatial_interp(
    original: ArrayView2<'_, f64>,
    anchors: ArrayView2<'_, f64>,
    values: ArrayView2<'_, f64>,
    r: f64,
    sharing: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    if values.nrows() != anchors.nrows() || values.ncols() != sharing.ncols() {
        return Err(Error::invalid(format!(
            "{} anchors with values {:?} and S' {:?}",
            anchors.nrows(),
            values.dim(),
            sharing.dim()
        )));
    }
    let w = interp_weights(original, anchors, r)?;
    Ok(w.apply(values).dot(&sharing.t()))
}

#[derive(Debug, Clone)]
pub struct TransCache {
    encoded_feats: Array3<f64>,
    /// Per target frame: (anchor frame, tap, weights).
    weights: Vec<Vec<(usize, usize, InterpWeights)>>,
    /// Interpolated features before `S'` (`L x N x C'_m`).
    interp: Array3<f64>,
}

impl TransCache {
    pub fn weights(&self) -> impl Iterator<Item = &InterpWeights> {
        self.weights.iter().flatten().map(|(_, _, w)| w)
    }
}

#[derive(Debug, Clone)]
pub struct TransIO {
    pub out_feats: Array3<f64>,
    pub cache: Option<TransCache>,
}

#[derive(Debug, Clone)]
pub struct TransGrads {
    pub encoded_feats: Array3<f64>,
    pub temporal: Array3<f64>,
    pub sharing: Array2<f64>,
}

/// A PST transposed convolution layer. `spec` carries the temporal geometry
/// (`l`, `s_t`, `p`) and the interpolation radius `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct PstTrans {
    pub spec: TubeSpec,
    pub kernel: TransKernel,
}

impl PstTrans {
    pub fn new(spec: TubeSpec, kernel: TransKernel) -> Result<Self> {
        spec.validate()?;
        if spec.l != kernel.size() {
            return Err(Error::invalid(format!("kernel has {} taps, spec l = {}", kernel.size(), spec.l)));
        }
        Ok(Self { spec, kernel })
    }

    pub fn init<R: Rng>(spec: TubeSpec, c_in: usize, c_mid: usize, c_out: usize, scale: f64, rng: &mut R) -> Result<Self> {
        let temporal = init::uniform(rng, (spec.l, c_mid, c_in), c_in, scale);
        let sharing = init::uniform(rng, (c_out, c_mid), c_mid, scale);
        Self::new(spec, TransKernel::new(temporal, sharing)?)
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.out_channels()
    }

    /// Propagate `encoded` features (at `encoded_coords`) back onto `original_coords`.
    pub fn forward(
        &self,
        encoded_coords: ArrayView3<'_, f64>,
        encoded_feats: ArrayView3<'_, f64>,
        original_coords: ArrayView3<'_, f64>,
    ) -> Result<TransIO> {
        let (lo, no, _) = encoded_coords.dim();
        if encoded_feats.dim().0 != lo || encoded_feats.dim().1 != no {
            return Err(Error::invalid(format!(
                "encoded coordinates {:?} and features {:?} disagree",
                encoded_coords.dim(),
                encoded_feats.dim()
            )));
        }
        let (frames, points, _) = original_coords.dim();
        let expansion = temporal_trans_conv(encoded_feats, &self.spec, &self.kernel, frames)?;
        let cm = self.kernel.mid_channels();

        let mut interp = Array3::<f64>::zeros((frames, points, cm));
        let mut weights = Vec::with_capacity(frames);
        for (t, contributions) in expansion.frames.iter().enumerate() {
            let original = original_coords.index_axis(Axis(0), t);
            let mut acc = interp.index_axis_mut(Axis(0), t);
            let mut frame_weights = Vec::with_capacity(contributions.len());
            for c in contributions {
                let w = interp_weights(original, encoded_coords.index_axis(Axis(0), c.anchor_frame), self.spec.r)?;
                acc += &w.apply(c.values.view());
                frame_weights.push((c.anchor_frame, c.tap, w));
            }
            weights.push(frame_weights);
        }

        let flat = interp.to_shape((frames * points, cm)).expect("shape");
        let out_feats = crate::nn::standard(flat.dot(&self.kernel.sharing.t()))
            .into_shape_with_order((frames, points, self.out_channels()))
            .expect("shape");
        Ok(TransIO {
            out_feats,
            cache: Some(TransCache { encoded_feats: encoded_feats.to_owned(), weights, interp }),
        })
    }

    pub fn backward(&self, io: &TransIO, grad_out: ArrayView3<'_, f64>) -> Result<TransGrads> {
        let cache = io
            .cache
            .as_ref()
            .ok_or_else(|| Error::InvalidState("transposed convolution cache missing".into()))?;
        if grad_out.dim() != io.out_feats.dim() {
            return Err(Error::invalid(format!(
                "gradient shape {:?} differs from output {:?}",
                grad_out.dim(),
                io.out_feats.dim()
            )));
        }
        let (frames, points, cm) = cache.interp.dim();
        let g = grad_out.to_shape((frames * points, self.out_channels())).expect("shape");
        let interp = cache.interp.to_shape((frames * points, cm)).expect("shape");
        let sharing = g.t().dot(&interp);
        let grad_interp = crate::nn::standard(g.dot(&self.kernel.sharing)).into_shape_with_order((frames, points, cm)).expect("shape");

        let mut temporal = Array3::<f64>::zeros(self.kernel.temporal.dim());
        let mut encoded = Array3::<f64>::zeros(cache.encoded_feats.dim());
        for (t, frame_weights) in cache.weights.iter().enumerate() {
            let ga = grad_interp.index_axis(Axis(0), t);
            for (i, k, w) in frame_weights {
                let gv = w.apply_transposed(ga);
                let f = cache.encoded_feats.index_axis(Axis(0), *i);
                let mut tk = temporal.index_axis_mut(Axis(0), *k);
                tk += &gv.t().dot(&f);
                let mut ge = encoded.index_axis_mut(Axis(0), *i);
                ge += &gv.dot(&self.kernel.temporal.index_axis(Axis(0), *k));
            }
        }
        Ok(TransGrads { encoded_feats: encoded, temporal, sharing })
    }
}
