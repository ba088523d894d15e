//! PST convolution: a lightweight spatial convolution over every tube slice
//! followed by a temporal convolution across the slices of each tube.
//!
//! For a neighbor with displacement `δ` and feature `F` the spatial kernel
//! contributes `(θ_d δ) ⊙ (θ_s F)` to the intermediate feature `M` of its
//! slice. The temporal kernel then mixes the `l` slice features:
//! `F' = Σ_k T_k M_k + b`, skipping slices that fall into temporal padding.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::geom::{NeighborList, Sampling};
use crate::nn::init;
use crate::tube::{build_tube, PointTube, TubeSpec};

/// Displacement kernel `θ_d` (`C_m x 3`) and sharing kernel `θ_s` (`C_m x C`).
///
/// Either may be absent: without `θ_s` the slice feature is `Σ θ_d δ`, without
/// `θ_d` it is `Σ θ_s F`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialKernel {
    pub theta_d: Option<Array2<f64>>,
    pub theta_s: Option<Array2<f64>>,
}

impl SpatialKernel {
    pub fn full(theta_d: Array2<f64>, theta_s: Array2<f64>) -> Result<Self> {
        Self::checked(Some(theta_d), Some(theta_s))
    }

    pub fn displacement_only(theta_d: Array2<f64>) -> Result<Self> {
        Self::checked(Some(theta_d), None)
    }

    pub fn sharing_only(theta_s: Array2<f64>) -> Result<Self> {
        Self::checked(None, Some(theta_s))
    }

    fn checked(theta_d: Option<Array2<f64>>, theta_s: Option<Array2<f64>>) -> Result<Self> {
        match (&theta_d, &theta_s) {
            (None, None) => return Err(Error::invalid("spatial kernel needs θ_d or θ_s")),
            (Some(d), _) if d.ncols() != 3 => {
                return Err(Error::invalid(format!("θ_d must be C_m x 3, got {:?}", d.dim())))
            }
            (Some(d), Some(s)) if d.nrows() != s.nrows() => {
                return Err(Error::invalid(format!(
                    "θ_d has {} rows but θ_s has {}",
                    d.nrows(),
                    s.nrows()
                )))
            }
            _ => {}
        }
        Ok(Self { theta_d, theta_s })
    }

    pub fn mid_channels(&self) -> usize {
        self.theta_d
            .as_ref()
            .or(self.theta_s.as_ref())
            .map(|m| m.nrows())
            .expect("validated kernel")
    }

    /// Input width consumed, zero when features are ignored.
    pub fn in_channels(&self) -> usize {
        self.theta_s.as_ref().map_or(0, |s| s.ncols())
    }

    fn check_feats(&self, c: usize) -> Result<()> {
        match &self.theta_s {
            Some(s) if s.ncols() != c => Err(Error::invalid(format!(
                "θ_s expects {} input channels, features have {c}",
                s.ncols()
            ))),
            _ => Ok(()),
        }
    }
}

/// Temporal kernel `T` (`l x C' x C_m`) with optional bias.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalKernel {
    pub weights: Array3<f64>,
    pub bias: Option<Array1<f64>>,
}

impl TemporalKernel {
    pub fn new(weights: Array3<f64>, bias: Option<Array1<f64>>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != weights.dim().1 {
                return Err(Error::invalid("bias width differs from output channels"));
            }
        }
        Ok(Self { weights, bias })
    }

    pub fn size(&self) -> usize {
        self.weights.dim().0
    }

    pub fn out_channels(&self) -> usize {
        self.weights.dim().1
    }

    pub fn mid_channels(&self) -> usize {
        self.weights.dim().2
    }
}

/// Intermediate feature of one tube slice.
pub fn spatial_conv(
    neighbors: &NeighborList,
    neighbor_feats: ArrayView2<'_, f64>,
    kernel: &SpatialKernel,
) -> Result<Array1<f64>> {
    if kernel.theta_s.is_some() && neighbor_feats.nrows() != neighbors.len() {
        return Err(Error::invalid(format!(
            "{} neighbors but {} feature rows",
            neighbors.len(),
            neighbor_feats.nrows()
        )));
    }
    kernel.check_feats(neighbor_feats.ncols())?;
    let mut m = Array1::zeros(kernel.mid_channels());
    for (j, delta) in neighbors.displacements.iter().enumerate() {
        let delta = ArrayView1::from(&delta[..]);
        match (&kernel.theta_d, &kernel.theta_s) {
            (Some(d), Some(s)) => m += &(d.dot(&delta) * s.dot(&neighbor_feats.row(j))),
            (Some(d), None) => m += &d.dot(&delta),
            (None, Some(s)) => m += &s.dot(&neighbor_feats.row(j)),
            (None, None) => unreachable!(),
        }
    }
    Ok(m)
}

/// Output feature of one tube from its `l` slice features.
pub fn temporal_conv(
    slices: ArrayView2<'_, f64>,
    valid: &[bool],
    kernel: &TemporalKernel,
) -> Result<Array1<f64>> {
    let l = kernel.size();
    if slices.nrows() != l || valid.len() != l || slices.ncols() != kernel.mid_channels() {
        return Err(Error::invalid(format!(
            "temporal kernel {:?} applied to slices {:?} with {} flags",
            kernel.weights.dim(),
            slices.dim(),
            valid.len()
        )));
    }
    let mut out = kernel.bias.clone().unwrap_or_else(|| Array1::zeros(kernel.out_channels()));
    for k in (0..l).filter(|&k| valid[k]) {
        out += &kernel.weights.index_axis(Axis(0), k).dot(&slices.row(k));
    }
    Ok(out)
}

/// Values a PST convolution keeps for its backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    pub tube: PointTube,
    pub input_feats: Array3<f64>,
    /// `θ_s F` per input point (`L x N x C_m`).
    shared: Option<Array3<f64>>,
    /// Slice features `M` (`L' x l x N' x C_m`), zero on padded slices.
    pub mids: Array4<f64>,
}

/// Output of a PST convolution layer.
#[derive(Debug, Clone)]
pub struct LayerIO {
    pub out_coords: Array3<f64>,
    pub out_feats: Array3<f64>,
    pub cache: Option<ConvCache>,
}

impl LayerIO {
    /// Drop the backward cache.
    pub fn detach(mut self) -> Self {
        self.cache = None;
        self
    }
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    /// Absent when the layer consumes no input features.
    pub input_feats: Option<Array3<f64>>,
    pub theta_d: Option<Array2<f64>>,
    pub theta_s: Option<Array2<f64>>,
    pub temporal: Array3<f64>,
    pub bias: Option<Array1<f64>>,
}

/// A PST convolution layer: tube hyperparameters plus its kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct PstConv {
    pub spec: TubeSpec,
    pub spatial: SpatialKernel,
    pub temporal: TemporalKernel,
}

impl PstConv {
    pub fn new(spec: TubeSpec, spatial: SpatialKernel, temporal: TemporalKernel) -> Result<Self> {
        spec.validate()?;
        if temporal.size() != spec.l {
            return Err(Error::invalid(format!(
                "temporal kernel has {} taps, tube spec l = {}",
                temporal.size(),
                spec.l
            )));
        }
        if temporal.mid_channels() != spatial.mid_channels() {
            return Err(Error::invalid(format!(
                "temporal kernel expects C_m = {}, spatial kernel gives {}",
                temporal.mid_channels(),
                spatial.mid_channels()
            )));
        }
        Ok(Self { spec, spatial, temporal })
    }

    /// Randomly initialized layer. `c_in = 0` gives the displacement-only form.
    pub fn init<R: Rng>(
        spec: TubeSpec,
        c_in: usize,
        c_mid: usize,
        c_out: usize,
        bias: bool,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let theta_d = init::uniform(rng, (c_mid, 3), 3, scale);
        let spatial = if c_in == 0 {
            SpatialKernel::displacement_only(theta_d)?
        } else {
            SpatialKernel::full(theta_d, init::uniform(rng, (c_mid, c_in), c_in, scale))?
        };
        let weights = init::uniform(rng, (spec.l, c_out, c_mid), spec.l * c_mid, scale);
        let temporal = TemporalKernel::new(weights, bias.then(|| Array1::zeros(c_out)))?;
        Self::new(spec, spatial, temporal)
    }

    pub fn out_channels(&self) -> usize {
        self.temporal.out_channels()
    }

    pub fn forward(
        &self,
        coords: ArrayView3<'_, f64>,
        feats: ArrayView3<'_, f64>,
        mode: Sampling,
    ) -> Result<LayerIO> {
        let tube = build_tube(coords, &self.spec, mode)?;
        self.forward_with_tube(tube, feats)
    }

    /// Run over a prebuilt tube.
    pub fn forward_with_tube(&self, tube: PointTube, feats: ArrayView3<'_, f64>) -> Result<LayerIO> {
        let (frames, points, c) = feats.dim();
        if frames != tube.input_frames || points != tube.input_points {
            return Err(Error::invalid(format!(
                "features are {frames}x{points}, tube was built over {}x{}",
                tube.input_frames, tube.input_points
            )));
        }
        if tube.spec.l != self.spec.l {
            return Err(Error::invalid("tube built with a different temporal kernel size"));
        }
        self.spatial.check_feats(c)?;

        let cm = self.spatial.mid_channels();
        let shared = self.spatial.theta_s.as_ref().map(|s| {
            let flat = feats.to_shape((frames * points, c)).expect("contiguous reshape");
            crate::nn::standard(flat.dot(&s.t()))
                .into_shape_with_order((frames, points, cm))
                .expect("shape")
        });

        let (lo, no, l) = (tube.out_frames(), tube.out_points(), self.spec.l);
        let mut mids = Array4::<f64>::zeros((lo, l, no, cm));
        let mut dvec = vec![0.0; cm];
        for i in 0..lo {
            for k in 0..l {
                let slice = &tube.slices[i][k];
                let Some(t) = slice.frame else { continue };
                for (n, nl) in slice.neighbors.iter().enumerate() {
                    let mut m = mids.slice_mut(s![i, k, n, ..]);
                    let m = m.as_slice_mut().expect("contiguous");
                    for (j, &src) in nl.indices.iter().enumerate() {
                        let delta = nl.displacements[j];
                        if let Some(d) = &self.spatial.theta_d {
                            for (c_, dv) in dvec.iter_mut().enumerate() {
                                *dv = d[[c_, 0]] * delta[0] + d[[c_, 1]] * delta[1] + d[[c_, 2]] * delta[2];
                            }
                        }
                        match (&self.spatial.theta_d, &shared) {
                            (Some(_), Some(g)) => {
                                let g = g.slice(s![t, src, ..]);
                                let g = g.as_slice().expect("contiguous");
                                for c_ in 0..cm {
                                    m[c_] += dvec[c_] * g[c_];
                                }
                            }
                            (Some(_), None) => {
                                for c_ in 0..cm {
                                    m[c_] += dvec[c_];
                                }
                            }
                            (None, Some(g)) => {
                                let g = g.slice(s![t, src, ..]);
                                let g = g.as_slice().expect("contiguous");
                                for c_ in 0..cm {
                                    m[c_] += g[c_];
                                }
                            }
                            (None, None) => unreachable!(),
                        }
                    }
                }
            }
        }

        let co = self.out_channels();
        let mut out_feats = Array3::<f64>::zeros((lo, no, co));
        for i in 0..lo {
            let mut out = out_feats.index_axis_mut(Axis(0), i);
            for k in (0..l).filter(|&k| tube.slice_valid(i, k)) {
                let m = mids.slice(s![i, k, .., ..]);
                out += &m.dot(&self.temporal.weights.index_axis(Axis(0), k).t());
            }
            if let Some(b) = &self.temporal.bias {
                out += b;
            }
        }

        let mut out_coords = Array3::<f64>::zeros((lo, no, 3));
        for (i, anchors) in tube.anchors.iter().enumerate() {
            for (n, a) in anchors.iter().enumerate() {
                for d in 0..3 {
                    out_coords[[i, n, d]] = a.coords[d];
                }
            }
        }

        Ok(LayerIO {
            out_coords,
            out_feats,
            cache: Some(ConvCache { tube, input_feats: feats.to_owned(), shared, mids }),
        })
    }

    pub fn backward(&self, io: &LayerIO, grad_out: ArrayView3<'_, f64>) -> Result<ConvGrads> {
        let cache = io
            .cache
            .as_ref()
            .ok_or_else(|| Error::InvalidState("PST convolution cache missing".into()))?;
        let tube = &cache.tube;
        let (lo, l, no, cm) = cache.mids.dim();
        if grad_out.dim() != (lo, no, self.out_channels()) {
            return Err(Error::invalid(format!(
                "gradient shape {:?} differs from output {:?}",
                grad_out.dim(),
                (lo, no, self.out_channels())
            )));
        }

        let bias = self
            .temporal
            .bias
            .as_ref()
            .map(|_| grad_out.sum_axis(Axis(0)).sum_axis(Axis(0)));

        let mut temporal = Array3::<f64>::zeros(self.temporal.weights.dim());
        let mut grad_mids = Array4::<f64>::zeros((lo, l, no, cm));
        for i in 0..lo {
            let g = grad_out.index_axis(Axis(0), i);
            for k in (0..l).filter(|&k| tube.slice_valid(i, k)) {
                let m = cache.mids.slice(s![i, k, .., ..]);
                let mut tk = temporal.index_axis_mut(Axis(0), k);
                tk += &g.t().dot(&m);
                grad_mids
                    .slice_mut(s![i, k, .., ..])
                    .assign(&g.dot(&self.temporal.weights.index_axis(Axis(0), k)));
            }
        }

        let (frames, points, c) = cache.input_feats.dim();
        let mut theta_d = self.spatial.theta_d.as_ref().map(|d| Array2::<f64>::zeros(d.dim()));
        let mut grad_shared = cache.shared.as_ref().map(|_| Array3::<f64>::zeros((frames, points, cm)));
        let mut dvec = vec![0.0; cm];
        for i in 0..lo {
            for k in 0..l {
                let slice = &tube.slices[i][k];
                let Some(t) = slice.frame else { continue };
                for (n, nl) in slice.neighbors.iter().enumerate() {
                    let gm = grad_mids.slice(s![i, k, n, ..]);
                    let gm = gm.as_slice().expect("contiguous");
                    for (j, &src) in nl.indices.iter().enumerate() {
                        let delta = nl.displacements[j];
                        match (&self.spatial.theta_d, &cache.shared) {
                            (Some(d), Some(g)) => {
                                for (c_, dv) in dvec.iter_mut().enumerate() {
                                    *dv = d[[c_, 0]] * delta[0] + d[[c_, 1]] * delta[1] + d[[c_, 2]] * delta[2];
                                }
                                let g = g.slice(s![t, src, ..]);
                                let g = g.as_slice().expect("contiguous");
                                let gd = theta_d.as_mut().expect("θ_d grad");
                                let gs = grad_shared.as_mut().expect("shared grad");
                                let mut gs = gs.slice_mut(s![t, src, ..]);
                                let gs = gs.as_slice_mut().expect("contiguous");
                                for c_ in 0..cm {
                                    let w = gm[c_] * g[c_];
                                    gd[[c_, 0]] += w * delta[0];
                                    gd[[c_, 1]] += w * delta[1];
                                    gd[[c_, 2]] += w * delta[2];
                                    gs[c_] += gm[c_] * dvec[c_];
                                }
                            }
                            (Some(_), None) => {
                                let gd = theta_d.as_mut().expect("θ_d grad");
                                for c_ in 0..cm {
                                    gd[[c_, 0]] += gm[c_] * delta[0];
                                    gd[[c_, 1]] += gm[c_] * delta[1];
                                    gd[[c_, 2]] += gm[c_] * delta[2];
                                }
                            }
                            (None, Some(_)) => {
                                let gs = grad_shared.as_mut().expect("shared grad");
                                let mut gs = gs.slice_mut(s![t, src, ..]);
                                let gs = gs.as_slice_mut().expect("contiguous");
                                for c_ in 0..cm {
                                    gs[c_] += gm[c_];
                                }
                            }
                            (None, None) => unreachable!(),
                        }
                    }
                }
            }
        }

        let (theta_s, input_feats) = match (&self.spatial.theta_s, grad_shared) {
            (Some(s), Some(gs)) => {
                let gs = gs.into_shape_with_order((frames * points, cm)).expect("shape");
                let f = cache.input_feats.to_shape((frames * points, c)).expect("shape");
                let gtheta = gs.t().dot(&f);
                let gf = crate::nn::standard(gs.dot(s)).into_shape_with_order((frames, points, c)).expect("shape");
                (Some(gtheta), Some(gf))
            }
            // features are ignored by a displacement-only kernel
            _ => (None, (c > 0).then(|| Array3::zeros((frames, points, c)))),
        };

        Ok(ConvGrads { input_feats, theta_d, theta_s, temporal, bias })
    }
}
