//! PSTNet architectures assembled from a declarative [`NetConfig`].
//!
//! A config is an ordered list of layers executed front to back. Point-level
//! layers carry `(coords, feats)` per sample; `pool` turns them into one
//! global vector per sample. Skip connections concatenate an earlier
//! activation onto the output of a transposed convolution.

use std::sync::Arc;

use ndarray::{concatenate, s, Array1, Array2, Array3, ArrayD, ArrayViewD, ArrayViewMutD, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Sampling;
use crate::nn::{self, BatchNorm, BatchNormCache, Linear, PoolCache};
use crate::pstops::{LayerIO, PstConv};
use crate::psttrans::{PstTrans, TransIO};
use crate::rng;
use crate::sequence::PointCloudSequence;
use crate::tube::{select_anchor_frames, TubeSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Segmentation,
}

/// Which factors of the spatial kernel a PST convolution learns.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelForm {
    /// `θ_d` and `θ_s`; falls back to displacement-only when the input has no features.
    #[default]
    Full,
    Displacement,
    Sharing,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerConfig {
    PstConv {
        name: String,
        spec: TubeSpec,
        c_in: usize,
        c_mid: usize,
        c_out: usize,
        #[serde(default = "default_true")]
        bias: bool,
        #[serde(default)]
        kernel: KernelForm,
    },
    PstTrans {
        name: String,
        /// Index of the PST convolution this layer inverts.
        pair: usize,
        /// Temporal geometry and interpolation radius.
        spec: TubeSpec,
        c_in: usize,
        c_mid: usize,
        c_out: usize,
    },
    Bn {
        channels: usize,
    },
    Relu,
    Pool,
    Fc {
        c_in: usize,
        c_out: usize,
    },
    Conv1d {
        c_in: usize,
        c_out: usize,
    },
}

impl LayerConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerConfig::PstConv { .. } => "pstconv",
            LayerConfig::PstTrans { .. } => "psttrans",
            LayerConfig::Bn { .. } => "bn",
            LayerConfig::Relu => "relu",
            LayerConfig::Pool => "pool",
            LayerConfig::Fc { .. } => "fc",
            LayerConfig::Conv1d { .. } => "conv1d",
        }
    }
}

/// Concatenate the output of `source` (`None` = network input) onto the output of `dest`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skip {
    pub source: Option<usize>,
    pub dest: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub task: Task,
    pub input_channels: usize,
    /// Clip length the temporal paddings were chosen for.
    pub clip_len: usize,
    pub layers: Vec<LayerConfig>,
    #[serde(default)]
    pub skips: Vec<Skip>,
    pub num_classes: usize,
    pub init_scale: f64,
    pub radius_multiplier: f64,
}

/// Output shape of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Points { frames: usize, points: usize, channels: usize },
    Global { channels: usize },
}

impl Shape {
    pub fn channels(&self) -> usize {
        match *self {
            Shape::Points { channels, .. } | Shape::Global { channels } => channels,
        }
    }
}

/// Smallest symmetric-else-left-heavy temporal padding giving `ceil(L / s_t)` output frames.
pub fn same_padding(frames: usize, l: usize, s_t: usize) -> Result<[usize; 2]> {
    if frames == 0 || l % 2 == 0 || s_t == 0 {
        return Err(Error::invalid(format!("no padding for L={frames}, l={l}, s_t={s_t}")));
    }
    let half = l / 2;
    let want = frames.div_ceil(s_t);
    (0..=2 * half)
        .find(|&total| frames + total >= l && (frames + total - l) / s_t + 1 >= want)
        .map(|total| [total.div_ceil(2), total / 2])
        .ok_or_else(|| Error::invalid(format!("clip of {frames} frames too short for l={l}")))
}

impl NetConfig {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse(format!("net config: {e}")))
    }

    fn skip_width(&self, dest: usize, shapes: &[Shape], input: Shape) -> usize {
        self.skips
            .iter()
            .filter(|s| s.dest == dest)
            .map(|s| s.source.map_or(input, |i| shapes[i]).channels())
            .sum()
    }

    /// Per-layer output shapes for an input of `frames x points` with
    /// `input_channels` features, validating every layer and the class head.
    pub fn shapes(&self, frames: usize, points: usize) -> Result<Vec<Shape>> {
        let shapes = self.layer_shapes(frames, points)?;
        let cur = shapes.last().copied().unwrap_or(Shape::Points { frames, points, channels: self.input_channels });
        match (self.task, cur) {
            (Task::Classification, Shape::Global { channels }) if channels == self.num_classes => {}
            (Task::Segmentation, Shape::Points { frames: f, points: p, channels })
                if channels == self.num_classes && f == frames && p == points => {}
            _ => {
                return Err(Error::invalid(format!(
                    "{:?} network ends in {cur:?}, expected {} class scores",
                    self.task, self.num_classes
                )))
            }
        }
        Ok(shapes)
    }

    /// Like [`NetConfig::shapes`] but without requiring a complete network,
    /// so partial stacks can be inspected.
    pub fn layer_shapes(&self, frames: usize, points: usize) -> Result<Vec<Shape>> {
        let input = Shape::Points { frames, points, channels: self.input_channels };
        for skip in &self.skips {
            if !matches!(self.layers.get(skip.dest), Some(LayerConfig::PstTrans { .. })) {
                return Err(Error::invalid(format!("skip destination {} is not a psttrans layer", skip.dest)));
            }
            if skip.source.is_some_and(|s| s >= skip.dest) {
                return Err(Error::invalid(format!("skip {:?} does not point backwards", skip)));
            }
        }

        let mut shapes: Vec<Shape> = Vec::with_capacity(self.layers.len());
        // input shape seen by each layer
        let mut inputs: Vec<Shape> = Vec::with_capacity(self.layers.len());
        let mut cur = input;
        for (li, layer) in self.layers.iter().enumerate() {
            let bad = |msg: String| Error::invalid(format!("layer {li} ({}): {msg}", layer.kind()));
            inputs.push(cur);
            let next = match (layer, cur) {
                (LayerConfig::PstConv { spec, c_in, c_out, kernel, .. }, Shape::Points { frames, points, channels }) => {
                    if *c_in != channels {
                        return Err(bad(format!("expects {c_in} channels, input has {channels}")));
                    }
                    if *kernel == KernelForm::Sharing && channels == 0 {
                        return Err(bad("sharing-only kernel needs input features".into()));
                    }
                    let lo = spec.output_frames(frames).map_err(|e| bad(e.to_string()))?;
                    select_anchor_frames(frames, spec).map_err(|e| bad(e.to_string()))?;
                    let no = spec.output_points(points).map_err(|e| bad(e.to_string()))?;
                    Shape::Points { frames: lo, points: no, channels: *c_out }
                }
                (LayerConfig::PstTrans { pair, spec, c_in, c_out, .. }, Shape::Points { frames, points, channels }) => {
                    let Some(LayerConfig::PstConv { spec: enc, .. }) = self.layers.get(*pair).filter(|_| *pair < li) else {
                        return Err(bad(format!("pair {pair} is not an earlier pstconv layer")));
                    };
                    let (enc_in, enc_out) = (inputs[*pair], shapes[*pair]);
                    if enc_out != (Shape::Points { frames, points, channels: enc_out.channels() }) {
                        return Err(bad(format!("input {frames}x{points} does not match paired layer output {enc_out:?}")));
                    }
                    if *c_in != channels {
                        return Err(bad(format!("expects {c_in} channels, input has {channels}")));
                    }
                    let Shape::Points { frames: target_frames, points: target_points, .. } = enc_in else {
                        return Err(bad("paired layer input is not point-level".into()));
                    };
                    let own = select_anchor_frames(target_frames, spec).map_err(|e| bad(e.to_string()))?;
                    let paired = select_anchor_frames(target_frames, enc).map_err(|e| bad(e.to_string()))?;
                    if own != paired {
                        return Err(bad(format!("anchor frames {own:?} differ from paired layer {paired:?}")));
                    }
                    let width = c_out + self.skip_width(li, &shapes, input);
                    for skip in self.skips.iter().filter(|s| s.dest == li) {
                        let src = skip.source.map_or(input, |i| shapes[i]);
                        match src {
                            Shape::Points { frames: f, points: p, .. } if f == target_frames && p == target_points => {}
                            _ => return Err(bad(format!("skip source {:?} has shape {src:?}", skip.source))),
                        }
                    }
                    Shape::Points { frames: target_frames, points: target_points, channels: width }
                }
                (LayerConfig::Bn { channels }, s) => {
                    if *channels != s.channels() {
                        return Err(bad(format!("normalizes {channels} channels, input has {}", s.channels())));
                    }
                    s
                }
                (LayerConfig::Relu, s) => s,
                (LayerConfig::Pool, Shape::Points { channels, .. }) => Shape::Global { channels },
                (LayerConfig::Fc { c_in, c_out }, Shape::Global { channels }) => {
                    if *c_in != channels {
                        return Err(bad(format!("expects {c_in} channels, input has {channels}")));
                    }
                    Shape::Global { channels: *c_out }
                }
                (LayerConfig::Conv1d { c_in, c_out }, Shape::Points { frames, points, channels }) => {
                    if *c_in != channels {
                        return Err(bad(format!("expects {c_in} channels, input has {channels}")));
                    }
                    Shape::Points { frames, points, channels: *c_out }
                }
                (_, s) => return Err(bad(format!("cannot consume {s:?}"))),
            };
            shapes.push(next);
            cur = next;
        }
        Ok(shapes)
    }

    /// Smallest point count every subsampling stage accepts.
    pub fn min_points(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                LayerConfig::PstConv { spec, .. } => spec.s_s,
                _ => 1,
            })
            .product()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.init_scale > 0.0) {
            return Err(Error::invalid("init_scale must be positive"));
        }
        self.shapes(self.clip_len, self.min_points()).map(|_| ())
    }
}

/// Channel widths of the classification network: PSTConv1, 2a, 2b, 3a, 3b, 4.
pub const DEFAULT_CLS_WIDTHS: [usize; 6] = [64, 128, 128, 256, 256, 1024];
/// Encoder (PSTConv1-4) then decoder (PSTConvTrans4 .. PSTConvTrans1) widths.
pub const DEFAULT_SEG_WIDTHS: [usize; 8] = [64, 128, 256, 512, 256, 256, 128, 128];
pub const CLS_NEIGHBORS: usize = 9;
pub const SEG_NEIGHBORS: usize = 32;

fn bn_relu(layers: &mut Vec<LayerConfig>, channels: usize) {
    layers.push(LayerConfig::Bn { channels });
    layers.push(LayerConfig::Relu);
}

/// Six PST convolutions, pooling, and an FC head.
pub fn build_classification_net(
    num_classes: usize,
    base_radius: f64,
    widths: &[usize; 6],
    clip_len: usize,
) -> Result<NetConfig> {
    if !(base_radius > 0.0) {
        return Err(Error::invalid(format!("base radius must be positive, got {base_radius}")));
    }
    if num_classes == 0 {
        return Err(Error::invalid("need at least one class"));
    }
    let radius_multiplier = 2.0;
    // (name, l, s_t, s_s)
    let plan = [
        ("pstconv1", 1, 1, 2),
        ("pstconv2a", 3, 2, 2),
        ("pstconv2b", 3, 1, 1),
        ("pstconv3a", 3, 2, 2),
        ("pstconv3b", 3, 1, 1),
        ("pstconv4", 1, 1, 2),
    ];
    let mut layers = Vec::new();
    let (mut frames, mut c_in, mut r) = (clip_len, 0, base_radius);
    for (&(name, l, s_t, s_s), &width) in plan.iter().zip(widths) {
        let p = same_padding(frames, l, s_t)
            .map_err(|e| Error::invalid(format!("{name}: clip of {clip_len} frames too short ({e})")))?;
        let spec = TubeSpec::new(l, s_t, p, s_s, r, Some(CLS_NEIGHBORS));
        frames = spec.output_frames(frames)?;
        layers.push(LayerConfig::PstConv {
            name: name.into(),
            spec,
            c_in,
            c_mid: width,
            c_out: width,
            bias: true,
            kernel: KernelForm::Full,
        });
        bn_relu(&mut layers, width);
        if s_s > 1 {
            r *= radius_multiplier;
        }
        c_in = width;
    }
    layers.push(LayerConfig::Pool);
    layers.push(LayerConfig::Fc { c_in, c_out: num_classes });
    let config = NetConfig {
        task: Task::Classification,
        input_channels: 0,
        clip_len,
        layers,
        skips: Vec::new(),
        num_classes,
        init_scale: 1.0,
        radius_multiplier,
    };
    config.validate()?;
    Ok(config)
}

/// Four PST convolutions, four PST transposed convolutions with skips, and a per-point head.
pub fn build_segmentation_net(
    num_classes: usize,
    base_radius: f64,
    widths: &[usize; 8],
    clip_len: usize,
    input_channels: usize,
) -> Result<NetConfig> {
    if !(base_radius > 0.0) {
        return Err(Error::invalid(format!("base radius must be positive, got {base_radius}")));
    }
    let radius_multiplier = 2.0;
    let mut layers = Vec::new();
    let enc_plan = [("pstconv1", 1, 4), ("pstconv2", 1, 4), ("pstconv3", 3, 4), ("pstconv4", 1, 2)];
    let (mut c_in, mut r) = (input_channels, base_radius);
    let mut enc_index = Vec::new();
    let mut radii = Vec::new();
    for (&(name, l, s_s), &width) in enc_plan.iter().zip(&widths[..4]) {
        let p = same_padding(clip_len, l, 1)?;
        enc_index.push(layers.len());
        radii.push(r);
        layers.push(LayerConfig::PstConv {
            name: name.into(),
            spec: TubeSpec::new(l, 1, p, s_s, r, Some(SEG_NEIGHBORS)),
            c_in,
            c_mid: width,
            c_out: width,
            bias: true,
            kernel: KernelForm::Full,
        });
        bn_relu(&mut layers, width);
        r *= radius_multiplier;
        c_in = width;
    }

    // TransK inverts PSTConvK; executed Trans4 -> Trans1.
    let mut skips = Vec::new();
    let dec_plan = [("psttrans4", 3usize, 1), ("psttrans3", 2, 1), ("psttrans2", 1, 3), ("psttrans1", 0, 1)];
    for (&(name, level, l), &width) in dec_plan.iter().zip(&widths[4..]) {
        let p = same_padding(clip_len, l, 1)?;
        let dest = layers.len();
        layers.push(LayerConfig::PstTrans {
            name: name.into(),
            pair: enc_index[level],
            spec: TubeSpec::new(l, 1, p, 1, radii[level], None),
            c_in,
            c_mid: width,
            c_out: width,
        });
        // post-ReLU activation feeding the paired encoder layer
        let (source, skip_width) = if level == 0 {
            (None, input_channels)
        } else {
            (Some(enc_index[level - 1] + 2), widths[level - 1])
        };
        skips.push(Skip { source, dest });
        bn_relu(&mut layers, width + skip_width);
        c_in = width + skip_width;
    }
    layers.push(LayerConfig::Conv1d { c_in, c_out: num_classes });

    let config = NetConfig {
        task: Task::Segmentation,
        input_channels,
        clip_len,
        layers,
        skips,
        num_classes,
        init_scale: 1.0,
        radius_multiplier,
    };
    config.validate()?;
    Ok(config)
}

// ---------------------------------------------------------------------------
// Runtime

#[derive(Debug, Clone)]
enum Layer {
    PstConv(PstConv),
    PstTrans(PstTrans),
    Bn(BatchNorm),
    Relu,
    Pool,
    Fc(Linear),
    Conv1d(Linear),
}

#[derive(Debug, Clone)]
enum Act {
    Points { coords: Arc<Array3<f64>>, feats: Array3<f64> },
    Global(Array1<f64>),
}

impl Act {
    fn points(&self) -> Result<(&Arc<Array3<f64>>, &Array3<f64>)> {
        match self {
            Act::Points { coords, feats } => Ok((coords, feats)),
            Act::Global(_) => Err(Error::InvalidState("expected point-level activation".into())),
        }
    }

    fn feats_dyn(&self) -> ArrayViewD<'_, f64> {
        match self {
            Act::Points { feats, .. } => feats.view().into_dyn(),
            Act::Global(v) => v.view().into_dyn(),
        }
    }
}

#[derive(Debug, Clone)]
enum Cache {
    PstConv { io: Vec<LayerIO> },
    PstTrans { io: Vec<TransIO>, own: usize, skip_widths: Vec<usize> },
    Bn { cache: BatchNormCache, rows: Vec<usize> },
    Relu { inputs: Vec<ArrayD<f64>> },
    Pool { caches: Vec<PoolCache> },
    Linear { inputs: Array2<f64> },
    Conv1d { inputs: Vec<Array3<f64>> },
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Per sample: one row for classification, `L*N` rows (frame-major) for segmentation.
    pub logits: Vec<Array2<f64>>,
    caches: Vec<Cache>,
}

/// Supervision for one sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    Class(usize),
    /// Frame-major per-point labels.
    PerPoint(Vec<usize>),
}

/// Mean cross-entropy over every logit row in the batch.
pub fn batch_loss(logits: &[Array2<f64>], targets: &[Target]) -> Result<(f64, Vec<Array2<f64>>)> {
    if logits.len() != targets.len() {
        return Err(Error::invalid("one target per sample required"));
    }
    let rows: usize = logits.iter().map(|l| l.nrows()).sum();
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (l, target) in logits.iter().zip(targets) {
        let labels: &[usize] = match target {
            Target::Class(c) => std::slice::from_ref(c),
            Target::PerPoint(v) => v,
        };
        if labels.len() != l.nrows() {
            return Err(Error::invalid(format!("{} labels for {} logit rows", labels.len(), l.nrows())));
        }
        let mut g = Array2::zeros(l.dim());
        for (r, &label) in labels.iter().enumerate() {
            let (loss, grad) = nn::softmax_cross_entropy(l.row(r), label)?;
            total += loss;
            g.row_mut(r).assign(&(grad / rows as f64));
        }
        grads.push(g);
    }
    Ok((total / rows as f64, grads))
}

#[derive(Debug, Clone)]
pub struct Network {
    config: NetConfig,
    layers: Vec<Layer>,
}

fn layer_name(config: &LayerConfig, index: usize) -> String {
    match config {
        LayerConfig::PstConv { name, .. } | LayerConfig::PstTrans { name, .. } => name.clone(),
        other => format!("{}{index}", other.kind()),
    }
}

impl Network {
    /// Build a network with freshly initialized parameters.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::rng(seed);
        let scale = config.init_scale;
        let layers = config
            .layers
            .iter()
            .map(|lc| {
                Ok(match lc {
                    LayerConfig::PstConv { spec, c_in, c_mid, c_out, bias, kernel, .. } => {
                        let mut conv = PstConv::init(spec.clone(), *c_in, *c_mid, *c_out, *bias, scale, &mut rng)?;
                        match kernel {
                            KernelForm::Full => {}
                            KernelForm::Displacement => conv.spatial.theta_s = None,
                            KernelForm::Sharing => conv.spatial.theta_d = None,
                        }
                        Layer::PstConv(conv)
                    }
                    LayerConfig::PstTrans { spec, c_in, c_mid, c_out, .. } => {
                        Layer::PstTrans(PstTrans::init(spec.clone(), *c_in, *c_mid, *c_out, scale, &mut rng)?)
                    }
                    LayerConfig::Bn { channels } => Layer::Bn(BatchNorm::new(*channels)),
                    LayerConfig::Relu => Layer::Relu,
                    LayerConfig::Pool => Layer::Pool,
                    LayerConfig::Fc { c_in, c_out } => Layer::Fc(Linear::init(*c_in, *c_out, scale, &mut rng)),
                    LayerConfig::Conv1d { c_in, c_out } => Layer::Conv1d(Linear::init(*c_in, *c_out, scale, &mut rng)),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    /// Names of trainable tensors, in [`params`](Self::params) order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, (layer, lc)) in self.layers.iter().zip(&self.config.layers).enumerate() {
            let n = layer_name(lc, i);
            match layer {
                Layer::PstConv(c) => {
                    if c.spatial.theta_d.is_some() {
                        names.push(format!("{n}.theta_d"));
                    }
                    if c.spatial.theta_s.is_some() {
                        names.push(format!("{n}.theta_s"));
                    }
                    names.push(format!("{n}.temporal"));
                    if c.temporal.bias.is_some() {
                        names.push(format!("{n}.bias"));
                    }
                }
                Layer::PstTrans(_) => {
                    names.push(format!("{n}.temporal"));
                    names.push(format!("{n}.sharing"));
                }
                Layer::Bn(_) => {
                    names.push(format!("{n}.gamma"));
                    names.push(format!("{n}.beta"));
                }
                Layer::Fc(_) | Layer::Conv1d(_) => {
                    names.push(format!("{n}.weight"));
                    names.push(format!("{n}.bias"));
                }
                Layer::Relu | Layer::Pool => {}
            }
        }
        names
    }

    pub fn params(&self) -> Vec<ArrayViewD<'_, f64>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::PstConv(c) => {
                    if let Some(d) = &c.spatial.theta_d {
                        out.push(d.view().into_dyn());
                    }
                    if let Some(s) = &c.spatial.theta_s {
                        out.push(s.view().into_dyn());
                    }
                    out.push(c.temporal.weights.view().into_dyn());
                    if let Some(b) = &c.temporal.bias {
                        out.push(b.view().into_dyn());
                    }
                }
                Layer::PstTrans(t) => {
                    out.push(t.kernel.temporal.view().into_dyn());
                    out.push(t.kernel.sharing.view().into_dyn());
                }
                Layer::Bn(bn) => {
                    out.push(bn.gamma.view().into_dyn());
                    out.push(bn.beta.view().into_dyn());
                }
                Layer::Fc(lin) | Layer::Conv1d(lin) => {
                    out.push(lin.weight.view().into_dyn());
                    out.push(lin.bias.view().into_dyn());
                }
                Layer::Relu | Layer::Pool => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::PstConv(c) => {
                    if let Some(d) = &mut c.spatial.theta_d {
                        out.push(d.view_mut().into_dyn());
                    }
                    if let Some(s) = &mut c.spatial.theta_s {
                        out.push(s.view_mut().into_dyn());
                    }
                    out.push(c.temporal.weights.view_mut().into_dyn());
                    if let Some(b) = &mut c.temporal.bias {
                        out.push(b.view_mut().into_dyn());
                    }
                }
                Layer::PstTrans(t) => {
                    out.push(t.kernel.temporal.view_mut().into_dyn());
                    out.push(t.kernel.sharing.view_mut().into_dyn());
                }
                Layer::Bn(bn) => {
                    out.push(bn.gamma.view_mut().into_dyn());
                    out.push(bn.beta.view_mut().into_dyn());
                }
                Layer::Fc(lin) | Layer::Conv1d(lin) => {
                    out.push(lin.weight.view_mut().into_dyn());
                    out.push(lin.bias.view_mut().into_dyn());
                }
                Layer::Relu | Layer::Pool => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Non-trainable state (batch norm running statistics) with names.
    pub fn buffers(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        for (i, (layer, lc)) in self.layers.iter().zip(&self.config.layers).enumerate() {
            if let Layer::Bn(bn) = layer {
                let n = layer_name(lc, i);
                out.push((format!("{n}.running_mean"), bn.running_mean.view().into_dyn()));
                out.push((format!("{n}.running_var"), bn.running_var.view().into_dyn()));
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            if let Layer::Bn(bn) = layer {
                out.push(bn.running_mean.view_mut().into_dyn());
                out.push(bn.running_var.view_mut().into_dyn());
            }
        }
        out
    }

    /// Run a batch. In training mode batch norm uses (and updates) batch
    /// statistics; otherwise the running estimates.
    pub fn forward(&mut self, batch: &[PointCloudSequence], training: bool, mode: Sampling) -> Result<ForwardPass> {
        let first = batch.first().ok_or_else(|| Error::invalid("empty batch"))?;
        let (frames, points) = (first.frames(), first.points());
        for seq in batch {
            if seq.frames() != frames || seq.points() != points || seq.channels() != self.config.input_channels {
                return Err(Error::invalid(format!(
                    "batch mixes shapes or has {} channels (network expects {})",
                    seq.channels(),
                    self.config.input_channels
                )));
            }
        }
        self.config.shapes(frames, points)?;

        let inputs: Vec<Act> = batch
            .iter()
            .map(|s| Act::Points { coords: Arc::new(s.coords().to_owned()), feats: s.feats().to_owned() })
            .collect();
        // outputs[li] holds the activation after layer li
        let mut outputs: Vec<Vec<Act>> = Vec::with_capacity(self.layers.len());
        // point coordinates entering each pstconv layer
        let mut conv_inputs: Vec<Option<Vec<Arc<Array3<f64>>>>> = vec![None; self.layers.len()];
        let mut caches = Vec::with_capacity(self.layers.len());

        for li in 0..self.layers.len() {
            let cur: &[Act] = if li == 0 { &inputs } else { &outputs[li - 1] };
            let (next, cache) = match &mut self.layers[li] {
                Layer::PstConv(conv) => {
                    let conv = &*conv;
                    let results: Vec<LayerIO> = cur
                        .par_iter()
                        .enumerate()
                        .map(|(b, act)| {
                            let (coords, feats) = act.points()?;
                            conv.forward(coords.view(), feats.view(), mode.derive(&[li as u64, b as u64]))
                        })
                        .collect::<Result<_>>()?;
                    conv_inputs[li] = Some(cur.iter().map(|a| a.points().map(|(c, _)| c.clone())).collect::<Result<_>>()?);
                    let next = results
                        .iter()
                        .map(|io| Act::Points { coords: Arc::new(io.out_coords.clone()), feats: io.out_feats.clone() })
                        .collect();
                    (next, Cache::PstConv { io: results })
                }
                Layer::PstTrans(trans) => {
                    let trans = &*trans;
                    let LayerConfig::PstTrans { pair, .. } = &self.config.layers[li] else { unreachable!() };
                    let originals = conv_inputs[*pair]
                        .as_ref()
                        .ok_or_else(|| Error::InvalidState("paired layer has not run".into()))?;
                    let results: Vec<TransIO> = cur
                        .par_iter()
                        .zip(originals.par_iter())
                        .map(|(act, orig)| {
                            let (coords, feats) = act.points()?;
                            trans.forward(coords.view(), feats.view(), orig.view())
                        })
                        .collect::<Result<_>>()?;
                    let mut next = Vec::with_capacity(results.len());
                    for (b, io) in results.iter().enumerate() {
                        let mut parts = vec![io.out_feats.view()];
                        let srcs: Vec<&Act> = self
                            .config
                            .skips
                            .iter()
                            .filter(|s| s.dest == li)
                            .map(|s| s.source.map_or(&inputs[b], |i| &outputs[i][b]))
                            .collect();
                        for src in &srcs {
                            parts.push(src.points()?.1.view());
                        }
                        let feats = concatenate(Axis(2), &parts).map_err(|e| Error::InvalidState(e.to_string()))?;
                        next.push(Act::Points { coords: originals[b].clone(), feats });
                    }
                    let own = trans.out_channels();
                    let skip_widths = self
                        .config
                        .skips
                        .iter()
                        .filter(|s| s.dest == li)
                        .map(|s| s.source.map_or(&inputs[0], |i| &outputs[i][0]).points().map(|(_, f)| f.dim().2))
                        .collect::<Result<_>>()?;
                    (next, Cache::PstTrans { io: results, own, skip_widths })
                }
                Layer::Bn(bn) => {
                    let rows: Vec<Array2<f64>> = cur.iter().map(|a| flatten_rows(a)).collect();
                    let counts: Vec<usize> = rows.iter().map(|r| r.nrows()).collect();
                    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
                    let stacked = concatenate(Axis(0), &views).map_err(|e| Error::InvalidState(e.to_string()))?;
                    let (y, cache) = bn.forward(stacked.view(), training)?;
                    let mut next = Vec::with_capacity(cur.len());
                    let mut start = 0;
                    for (act, &n) in cur.iter().zip(&counts) {
                        next.push(unflatten_like(act, y.slice(s![start..start + n, ..]).to_owned()));
                        start += n;
                    }
                    (next, Cache::Bn { cache, rows: counts })
                }
                Layer::Relu => {
                    let next = cur
                        .iter()
                        .map(|a| match a {
                            Act::Points { coords, feats } => Act::Points { coords: coords.clone(), feats: nn::relu(feats) },
                            Act::Global(v) => Act::Global(nn::relu(v)),
                        })
                        .collect();
                    let inputs = cur.iter().map(|a| a.feats_dyn().to_owned()).collect();
                    (next, Cache::Relu { inputs })
                }
                Layer::Pool => {
                    let mut next = Vec::with_capacity(cur.len());
                    let mut pc = Vec::with_capacity(cur.len());
                    for act in cur {
                        let (v, c) = nn::pool_sequence(act.points()?.1.view())?;
                        next.push(Act::Global(v));
                        pc.push(c);
                    }
                    (next, Cache::Pool { caches: pc })
                }
                Layer::Fc(lin) => {
                    let rows: Vec<Array2<f64>> = cur.iter().map(flatten_rows).collect();
                    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
                    let x = concatenate(Axis(0), &views).map_err(|e| Error::InvalidState(e.to_string()))?;
                    let y = lin.forward(x.view())?;
                    let next = y.rows().into_iter().map(|r| Act::Global(r.to_owned())).collect();
                    (next, Cache::Linear { inputs: x })
                }
                Layer::Conv1d(lin) => {
                    let mut next = Vec::with_capacity(cur.len());
                    let mut ins = Vec::with_capacity(cur.len());
                    for act in cur {
                        let (coords, feats) = act.points()?;
                        let (f, n, _) = feats.dim();
                        let y = lin.forward(flatten_rows(act).view())?;
                        next.push(Act::Points {
                            coords: coords.clone(),
                            feats: nn::standard(y).into_shape_with_order((f, n, lin.out_channels())).expect("shape"),
                        });
                        ins.push(feats.clone());
                    }
                    (next, Cache::Conv1d { inputs: ins })
                }
            };
            outputs.push(next);
            caches.push(cache);
        }

        let logits = outputs
            .last()
            .map(|acts| acts.iter().map(flatten_rows).collect())
            .unwrap_or_default();
        Ok(ForwardPass { logits, caches })
    }

    /// Gradients of the loss for every trainable tensor, in [`params`](Self::params)
    /// order, given the loss gradient w.r.t. each sample's logits.
    pub fn backward(&self, pass: &ForwardPass, grad_logits: &[Array2<f64>]) -> Result<Vec<ArrayD<f64>>> {
        if pass.caches.len() != self.layers.len() {
            return Err(Error::InvalidState("forward pass does not belong to this network".into()));
        }
        let batch = pass.logits.len();
        if grad_logits.len() != batch {
            return Err(Error::invalid("one logit gradient per sample required"));
        }
        // gradient w.r.t. the output of the current layer, per sample
        let mut grad: Vec<ArrayD<f64>> = grad_logits
            .iter()
            .zip(&pass.logits)
            .map(|(g, l)| {
                if g.dim() != l.dim() {
                    return Err(Error::invalid("logit gradient shape mismatch"));
                }
                Ok(g.clone().into_dyn())
            })
            .collect::<Result<_>>()?;
        // point-level outputs are (L, N, C); the logits were flattened to rows
        if let Some(Cache::Conv1d { inputs }) = pass.caches.last() {
            for (g, x) in grad.iter_mut().zip(inputs) {
                let (f, n, _) = x.dim();
                let c = g.shape()[1];
                *g = g.clone().into_shape_with_order(vec![f, n, c]).expect("shape");
            }
        } else if let Some(last) = pass.caches.last() {
            if !matches!(last, Cache::Linear { .. }) {
                return Err(Error::InvalidState("network must end in fc or conv1d".into()));
            }
            for g in &mut grad {
                *g = g.clone().into_shape_with_order(vec![g.len()]).expect("shape");
            }
        }

        let mut skip_grads: Vec<Option<Vec<ArrayD<f64>>>> = vec![None; self.layers.len()];
        let mut layer_grads: Vec<Vec<ArrayD<f64>>> = vec![Vec::new(); self.layers.len()];

        for li in (0..self.layers.len()).rev() {
            if let Some(extra) = skip_grads[li].take() {
                for (g, e) in grad.iter_mut().zip(extra) {
                    *g += &e;
                }
            }
            let cache = &pass.caches[li];
            grad = match (&self.layers[li], cache) {
                (Layer::PstConv(conv), Cache::PstConv { io }) => {
                    let results = io
                        .par_iter()
                        .zip(grad.par_iter())
                        .map(|(io, g)| conv.backward(io, as3(g)?.view()))
                        .collect::<Result<Vec<_>>>()?;
                    let mut acc: Vec<ArrayD<f64>> = Vec::new();
                    let mut next = Vec::with_capacity(batch);
                    for (b, r) in results.into_iter().enumerate() {
                        let mut parts: Vec<ArrayD<f64>> = Vec::new();
                        if let Some(d) = r.theta_d {
                            parts.push(d.into_dyn());
                        }
                        if let Some(s) = r.theta_s {
                            parts.push(s.into_dyn());
                        }
                        parts.push(r.temporal.into_dyn());
                        if let Some(bias) = r.bias {
                            parts.push(bias.into_dyn());
                        }
                        accumulate(&mut acc, parts);
                        let (f, n, c) = io[b].cache.as_ref().expect("cache").input_feats.dim();
                        next.push(r.input_feats.unwrap_or_else(|| Array3::zeros((f, n, c))).into_dyn());
                    }
                    layer_grads[li] = acc;
                    next
                }
                (Layer::PstTrans(trans), Cache::PstTrans { io, own, skip_widths }) => {
                    let skips: Vec<&Skip> = self.config.skips.iter().filter(|s| s.dest == li).collect();
                    let mut own_grads = Vec::with_capacity(batch);
                    for (b, g) in grad.iter().enumerate() {
                        let g = as3(g)?;
                        own_grads.push(g.slice(s![.., .., ..*own]).to_owned());
                        let mut offset = *own;
                        for (skip, &width) in skips.iter().zip(skip_widths) {
                            let part = g.slice(s![.., .., offset..offset + width]).to_owned().into_dyn();
                            offset += width;
                            if let Some(i) = skip.source {
                                let slot = skip_grads[i].get_or_insert_with(|| {
                                    (0..batch).map(|_| ArrayD::zeros(part.raw_dim())).collect()
                                });
                                slot[b] += &part;
                            }
                        }
                    }
                    let results = io
                        .par_iter()
                        .zip(own_grads.par_iter())
                        .map(|(io, g)| trans.backward(io, g.view()))
                        .collect::<Result<Vec<_>>>()?;
                    let mut acc = Vec::new();
                    let mut next = Vec::with_capacity(batch);
                    for r in results {
                        accumulate(&mut acc, vec![r.temporal.into_dyn(), r.sharing.into_dyn()]);
                        next.push(r.encoded_feats.into_dyn());
                    }
                    layer_grads[li] = acc;
                    next
                }
                (Layer::Bn(bn), Cache::Bn { cache, rows }) => {
                    let flat: Vec<Array2<f64>> = grad.iter().map(dyn_rows).collect();
                    let views: Vec<_> = flat.iter().map(|r| r.view()).collect();
                    let stacked = concatenate(Axis(0), &views).map_err(|e| Error::InvalidState(e.to_string()))?;
                    let (dx, dgamma, dbeta) = bn.backward(cache, stacked.view());
                    layer_grads[li] = vec![dgamma.into_dyn(), dbeta.into_dyn()];
                    let mut next = Vec::with_capacity(batch);
                    let mut start = 0;
                    for (g, &n) in grad.iter().zip(rows) {
                        let part = dx.slice(s![start..start + n, ..]).to_owned();
                        next.push(nn::standard(part).into_shape_with_order(g.shape().to_vec()).expect("shape"));
                        start += n;
                    }
                    next
                }
                (Layer::Relu, Cache::Relu { inputs }) => {
                    grad.iter().zip(inputs).map(|(g, x)| nn::relu_backward(x, g)).collect()
                }
                (Layer::Pool, Cache::Pool { caches }) => grad
                    .iter()
                    .zip(caches)
                    .map(|(g, c)| {
                        let g = g.view().into_dimensionality::<ndarray::Ix1>().map_err(|e| Error::InvalidState(e.to_string()))?;
                        Ok(nn::pool_sequence_backward(c, g).into_dyn())
                    })
                    .collect::<Result<_>>()?,
                (Layer::Fc(lin), Cache::Linear { inputs }) => {
                    let views: Vec<_> = grad.iter().map(|g| g.view().into_shape_with_order((1, g.len())).expect("shape")).collect();
                    let g = concatenate(Axis(0), &views).map_err(|e| Error::InvalidState(e.to_string()))?;
                    let (dx, dw, db) = lin.backward(inputs.view(), g.view());
                    layer_grads[li] = vec![dw.into_dyn(), db.into_dyn()];
                    dx.rows().into_iter().map(|r| r.to_owned().into_dyn()).collect()
                }
                (Layer::Conv1d(lin), Cache::Conv1d { inputs }) => {
                    let mut acc = Vec::new();
                    let mut next = Vec::with_capacity(batch);
                    for (g, x) in grad.iter().zip(inputs) {
                        let (f, n, c) = x.dim();
                        let xr = x.to_shape((f * n, c)).expect("shape");
                        let gr = dyn_rows(g);
                        let (dx, dw, db) = lin.backward(xr.view(), gr.view());
                        accumulate(&mut acc, vec![dw.into_dyn(), db.into_dyn()]);
                        next.push(nn::standard(dx).into_shape_with_order((f, n, c)).expect("shape").into_dyn());
                    }
                    layer_grads[li] = acc;
                    next
                }
                _ => return Err(Error::InvalidState(format!("cache of layer {li} does not match layer kind"))),
            };
        }
        Ok(layer_grads.into_iter().flatten().collect())
    }

    /// Eval-mode logits with deterministic sampling.
    pub fn predict(&mut self, batch: &[PointCloudSequence]) -> Result<Vec<Array2<f64>>> {
        Ok(self.forward(batch, false, Sampling::Deterministic)?.logits)
    }

    /// Split a sequence into clips, average the clip-level class
    /// probabilities, and return `(argmax class, mean probabilities)`.
    pub fn evaluate_sequence(
        &mut self,
        sequence: &PointCloudSequence,
        clip_len: usize,
        frame_stride: usize,
    ) -> Result<(usize, Array1<f64>)> {
        if self.config.task != Task::Classification {
            return Err(Error::invalid("sequence-level evaluation needs a classification network"));
        }
        let clips = crate::data::split_clips(sequence, clip_len, frame_stride)?;
        let mut probs = Array1::zeros(self.config.num_classes);
        for clip in &clips {
            let logits = self.predict(std::slice::from_ref(clip))?;
            probs += &nn::softmax(logits[0].row(0));
        }
        probs /= clips.len() as f64;
        Ok((argmax(probs.view()), probs))
    }
}

pub fn argmax(v: ndarray::ArrayView1<'_, f64>) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

fn accumulate(acc: &mut Vec<ArrayD<f64>>, parts: Vec<ArrayD<f64>>) {
    if acc.is_empty() {
        *acc = parts;
    } else {
        for (a, p) in acc.iter_mut().zip(parts) {
            *a += &p;
        }
    }
}

fn as3(g: &ArrayD<f64>) -> Result<ndarray::ArrayView3<'_, f64>> {
    g.view()
        .into_dimensionality::<ndarray::Ix3>()
        .map_err(|e| Error::InvalidState(format!("expected point-level gradient: {e}")))
}

fn flatten_rows(act: &Act) -> Array2<f64> {
    match act {
        Act::Points { feats, .. } => {
            let (f, n, c) = feats.dim();
            feats.to_shape((f * n, c)).expect("shape").to_owned()
        }
        Act::Global(v) => v.to_shape((1, v.len())).expect("shape").to_owned(),
    }
}

fn dyn_rows(g: &ArrayD<f64>) -> Array2<f64> {
    let c = *g.shape().last().expect("rank >= 1");
    g.to_shape((g.len() / c.max(1), c)).expect("shape").to_owned()
}

fn unflatten_like(act: &Act, rows: Array2<f64>) -> Act {
    match act {
        Act::Points { coords, feats } => {
            let (f, n, c) = feats.dim();
            Act::Points { coords: coords.clone(), feats: nn::standard(rows).into_shape_with_order((f, n, c)).expect("shape") }
        }
        Act::Global(v) => Act::Global(rows.into_shape_with_order(v.len()).expect("shape")),
    }
}
