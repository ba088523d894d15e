//! Synthetic moving-digit point cloud sequences, the PCSQ1 record format,
//! IDX digit images, and clip splitting.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::sequence::PointCloudSequence;

pub const CANVAS: f64 = 64.0;
/// Side of the box a digit lives in.
pub const DIGIT_BOX: f64 = 28.0;
pub const SEQ_FRAMES: usize = 16;
pub const DIGIT_POINTS: usize = 128;

/// Grid positions `(a, b)`; `a` sets the horizontal offset, `b` the vertical one.
pub const LOCATIONS: [(u8, u8); 9] = [(1, 1), (1, 3), (1, 5), (3, 1), (3, 3), (3, 5), (5, 1), (5, 3), (5, 5)];
pub const VELOCITIES: [(f64, f64); 8] =
    [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0), (2.0, 2.0), (-2.0, 2.0), (-2.0, -2.0), (2.0, -2.0)];
pub const NUM_MOTIONS: usize = 144;

/// Largest top-left offset of the digit box; one unit is left for jitter.
const MAX_OFFSET: f64 = CANVAS - DIGIT_BOX - 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distortion {
    Horizontal,
    Vertical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MotionSpec {
    /// Index into [`LOCATIONS`].
    pub location: usize,
    /// Index into [`VELOCITIES`].
    pub velocity: usize,
    pub distortion: Distortion,
}

impl MotionSpec {
    pub fn new(location: usize, velocity: usize, distortion: Distortion) -> Result<Self> {
        if location >= LOCATIONS.len() || velocity >= VELOCITIES.len() {
            return Err(Error::invalid(format!("no motion with location {location}, velocity {velocity}")));
        }
        Ok(Self { location, velocity, distortion })
    }

    /// `location * 16 + velocity * 2 + distortion`.
    pub fn class_id(&self) -> usize {
        self.location * 16 + self.velocity * 2 + (self.distortion == Distortion::Vertical) as usize
    }

    pub fn from_class_id(id: usize) -> Result<Self> {
        if id >= NUM_MOTIONS {
            return Err(Error::invalid(format!("class id {id} out of range 0..{NUM_MOTIONS}")));
        }
        let distortion = if id % 2 == 0 { Distortion::Horizontal } else { Distortion::Vertical };
        Self::new(id / 16, (id % 16) / 2, distortion)
    }

    pub fn all() -> impl Iterator<Item = MotionSpec> {
        (0..NUM_MOTIONS).map(|id| Self::from_class_id(id).expect("in range"))
    }

    /// Top-left corner of the digit box before jitter.
    pub fn origin(&self) -> [f64; 2] {
        let (a, b) = LOCATIONS[self.location];
        let place = |g: u8| (g as f64 - 1.0) / 4.0 * MAX_OFFSET;
        [place(a), place(b)]
    }
}

/// Scale factor of the distortion at frame `t` (1-based).
pub fn distortion_scale(t: usize) -> f64 {
    (0.4 - 0.05 * t as f64).abs() + 0.6
}

fn bounce(pos: &mut f64, vel: &mut f64, hi: f64) {
    *pos += *vel;
    if *pos < 0.0 {
        *pos = -*pos;
        *vel = -*vel;
    } else if *pos > hi {
        *pos = 2.0 * hi - *pos;
        *vel = -*vel;
    }
}

fn check_digit(digit: ArrayView2<'_, f64>) -> Result<()> {
    if digit.ncols() != 2 || digit.nrows() == 0 {
        return Err(Error::invalid(format!("digit points must be N x 2, got {:?}", digit.dim())));
    }
    if digit.iter().any(|&v| !(0.0..=DIGIT_BOX).contains(&v)) {
        return Err(Error::invalid(format!("digit points must lie in [0, {DIGIT_BOX}]^2")));
    }
    Ok(())
}

/// Move a digit (points in its own `[0, 28]^2` box) through [`SEQ_FRAMES`]
/// frames. The seed only jitters the start position by up to one unit.
/// Returns the sequence (z = 0) and the motion's class id.
pub fn generate_moving_digit(
    digit: ArrayView2<'_, f64>,
    motion: MotionSpec,
    seed: u64,
) -> Result<(PointCloudSequence, usize)> {
    check_digit(digit)?;
    let mut rng = rng::rng(seed);
    let origin = motion.origin();
    let mut pos = [origin[0] + rng.gen::<f64>(), origin[1] + rng.gen::<f64>()];
    let (vx, vy) = VELOCITIES[motion.velocity];
    let mut vel = [vx, vy];
    let hi = CANVAS - DIGIT_BOX;

    let n = digit.nrows();
    let center = [digit.column(0).sum() / n as f64, digit.column(1).sum() / n as f64];
    let axis = match motion.distortion {
        Distortion::Horizontal => 0,
        Distortion::Vertical => 1,
    };
    let mut coords = Array3::zeros((SEQ_FRAMES, n, 3));
    for t in 0..SEQ_FRAMES {
        if t > 0 {
            for d in 0..2 {
                bounce(&mut pos[d], &mut vel[d], hi);
            }
        }
        let scale = distortion_scale(t + 1);
        for i in 0..n {
            for d in 0..2 {
                let mut v = digit[[i, d]];
                if d == axis {
                    v = scale * (v - center[d]) + center[d];
                }
                coords[[t, i, d]] = v + pos[d];
            }
        }
    }
    Ok((PointCloudSequence::from_coords(coords)?, motion.class_id()))
}

// ---------------------------------------------------------------------------
// Digit shapes

/// Seven-segment strokes as `(x0, y0, x1, y1)` in the digit box.
const SEGMENTS: [[f64; 4]; 7] = [
    [8.0, 23.0, 20.0, 23.0], // top
    [20.0, 23.0, 20.0, 14.0], // upper right
    [20.0, 14.0, 20.0, 5.0],  // lower right
    [8.0, 5.0, 20.0, 5.0],    // bottom
    [8.0, 14.0, 8.0, 5.0],    // lower left
    [8.0, 23.0, 8.0, 14.0],   // upper left
    [8.0, 14.0, 20.0, 14.0],  // middle
];

const DIGIT_SEGMENTS: [&[usize]; 10] = [
    &[0, 1, 2, 3, 4, 5],
    &[1, 2],
    &[0, 1, 6, 4, 3],
    &[0, 1, 6, 2, 3],
    &[5, 6, 1, 2],
    &[0, 5, 6, 2, 3],
    &[0, 5, 4, 3, 2, 6],
    &[0, 1, 2],
    &[0, 1, 2, 3, 4, 5, 6],
    &[6, 5, 0, 1, 2, 3],
];

/// A hand-drawn-looking seven-segment digit: [`DIGIT_POINTS`] points with a
/// seeded slant, scale and stroke jitter. Needs no external files.
pub fn builtin_digit(digit: usize, seed: u64) -> Result<Array2<f64>> {
    let segs = DIGIT_SEGMENTS
        .get(digit)
        .ok_or_else(|| Error::invalid(format!("built-in digits are 0..9, got {digit}")))?;
    let mut rng = rng::rng(rng::derive(seed, &[digit as u64]));
    let slant = rng.gen_range(-0.2..0.2);
    let sx = rng.gen_range(0.85..1.1);
    let sy = rng.gen_range(0.85..1.05);
    let lengths: Vec<f64> = segs
        .iter()
        .map(|&s| {
            let [x0, y0, x1, y1] = SEGMENTS[s];
            ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt()
        })
        .collect();
    let total: f64 = lengths.iter().sum();
    let mut out = Array2::zeros((DIGIT_POINTS, 2));
    for i in 0..DIGIT_POINTS {
        let mut u = rng.gen::<f64>() * total;
        let mut k = 0;
        while k + 1 < segs.len() && u > lengths[k] {
            u -= lengths[k];
            k += 1;
        }
        let [x0, y0, x1, y1] = SEGMENTS[segs[k]];
        let f = (u / lengths[k]).clamp(0.0, 1.0);
        let x = x0 + f * (x1 - x0) + rng.gen_range(-1.0..1.0);
        let y = y0 + f * (y1 - y0) + rng.gen_range(-1.0..1.0);
        let (cx, cy) = (DIGIT_BOX / 2.0, DIGIT_BOX / 2.0);
        let y = cy + sy * (y - cy);
        let x = cx + sx * (x - cx) + slant * (y - cy);
        out[[i, 0]] = x.clamp(0.0, DIGIT_BOX);
        out[[i, 1]] = y.clamp(0.0, DIGIT_BOX);
    }
    Ok(out)
}

/// Sample [`DIGIT_POINTS`] lit pixels (intensity > 0.5) of a grayscale image:
/// distinct pixels when enough are lit, otherwise every lit pixel plus
/// seeded repeats. Pixel `(row, col)` maps to `(col + 0.5, rows - row - 0.5)`.
pub fn digit_points_from_image<R: Rng>(pixels: ArrayView2<'_, u8>, rng: &mut R) -> Result<Array2<f64>> {
    let (rows, cols) = pixels.dim();
    if rows as f64 > DIGIT_BOX || cols as f64 > DIGIT_BOX {
        return Err(Error::invalid(format!("image {rows}x{cols} larger than the digit box")));
    }
    let lit: Vec<(usize, usize)> = pixels
        .indexed_iter()
        .filter(|&(_, &v)| v as f64 / 255.0 > 0.5)
        .map(|(idx, _)| idx)
        .collect();
    if lit.is_empty() {
        return Err(Error::invalid("image has no pixels above the 0.5 threshold"));
    }
    let chosen: Vec<(usize, usize)> = if lit.len() >= DIGIT_POINTS {
        lit.choose_multiple(rng, DIGIT_POINTS).copied().collect()
    } else {
        let mut v = lit.clone();
        while v.len() < DIGIT_POINTS {
            v.push(lit[rng.gen_range(0..lit.len())]);
        }
        v
    };
    let mut out = Array2::zeros((DIGIT_POINTS, 2));
    for (i, &(r, c)) in chosen.iter().enumerate() {
        out[[i, 0]] = c as f64 + 0.5;
        out[[i, 1]] = (rows - r) as f64 - 0.5;
    }
    Ok(out)
}

fn read_be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::parse("IDX header truncated"))
}

/// Parse an IDX3 unsigned-byte image container into `count x rows x cols` images.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Array2<u8>>> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != 0x0000_0803 {
        return Err(Error::parse(format!("not an IDX3 ubyte image file (magic {magic:#010x})")));
    }
    let count = read_be_u32(bytes, 4)? as usize;
    let rows = read_be_u32(bytes, 8)? as usize;
    let cols = read_be_u32(bytes, 12)? as usize;
    let expected = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .and_then(|v| v.checked_add(16))
        .ok_or_else(|| Error::parse("IDX dimensions overflow"))?;
    if bytes.len() != expected {
        return Err(Error::parse(format!("IDX body has {} bytes, header implies {expected}", bytes.len())));
    }
    Ok(bytes[16..]
        .chunks_exact(rows * cols.max(1))
        .take(count)
        .map(|c| Array2::from_shape_vec((rows, cols), c.to_vec()).expect("chunk size"))
        .collect())
}

/// Load up to `limit` digits from an IDX image file as 2D point sets.
pub fn load_digit_images(path: &Path, seed: u64, limit: Option<usize>) -> Result<Vec<Array2<f64>>> {
    let bytes = fs::read(path)?;
    let images = parse_idx_images(&bytes)?;
    let take = limit.unwrap_or(images.len()).min(images.len());
    images[..take]
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let mut rng = rng::rng(rng::derive(seed, &[i as u64]));
            digit_points_from_image(img.view(), &mut rng)
        })
        .collect()
}

/// Where digit shapes come from.
#[derive(Debug, Clone)]
pub enum DigitSource {
    Builtin,
    Images(Vec<Array2<f64>>),
}

impl DigitSource {
    /// Parse `builtin` or a path to an IDX image file.
    pub fn open(spec: &str, seed: u64) -> Result<Self> {
        if spec == "builtin" {
            return Ok(DigitSource::Builtin);
        }
        let digits = load_digit_images(Path::new(spec), seed, None).map_err(|e| match e {
            Error::Io(io) => Error::parse(format!("cannot read digit images {spec}: {io}")),
            other => other,
        })?;
        if digits.is_empty() {
            return Err(Error::parse(format!("{spec} contains no images")));
        }
        Ok(DigitSource::Images(digits))
    }

    /// A digit drawn with the given seed.
    pub fn pick(&self, seed: u64) -> Result<Array2<f64>> {
        let mut rng = rng::rng(seed);
        match self {
            DigitSource::Builtin => builtin_digit(rng.gen_range(0..10), rng.gen()),
            DigitSource::Images(v) => Ok(v[rng.gen_range(0..v.len())].clone()),
        }
    }
}

// ---------------------------------------------------------------------------
// Two-digit segmentation toy

pub const SEG_FRAMES: usize = 3;

/// Two digits in one canvas, one moving right (label 0) and one moving left
/// (label 1), kept in separate horizontal bands. Points are ordered digit A
/// first; per-point labels are frame-major.
pub fn generate_two_digit_segmentation(source: &DigitSource, seed: u64) -> Result<(PointCloudSequence, Vec<i32>)> {
    let mut rng = rng::rng(rng::derive(seed, &[0]));
    let a = source.pick(rng::derive(seed, &[1]))?;
    let b = source.pick(rng::derive(seed, &[2]))?;
    let top_is_right: bool = rng.gen();
    let n = a.nrows() + b.nrows();
    let mut coords = Array3::zeros((SEG_FRAMES, n, 3));
    let mut labels = Vec::with_capacity(SEG_FRAMES * n);
    let band = CANVAS - DIGIT_BOX;
    let mut tracks = Vec::new();
    for (d, digit) in [&a, &b].into_iter().enumerate() {
        let rightward = d == 0;
        let speed = rng.gen_range(1.5..3.0);
        let vx = if rightward { speed } else { -speed };
        let vy = rng.gen_range(-0.5..0.5);
        let travel = speed * (SEG_FRAMES - 1) as f64;
        let x0 = if rightward { rng.gen_range(0.0..band - travel) } else { rng.gen_range(travel..band) };
        let in_top = rightward == top_is_right;
        let y0 = if in_top { band - rng.gen_range(1.0..2.0) } else { rng.gen_range(1.0..2.0) };
        tracks.push((digit, [x0, y0], [vx, vy]));
    }
    for t in 0..SEG_FRAMES {
        let mut offset = 0;
        for (d, (digit, p0, v)) in tracks.iter().enumerate() {
            for i in 0..digit.nrows() {
                for k in 0..2 {
                    coords[[t, offset + i, k]] = digit[[i, k]] + p0[k] + v[k] * t as f64;
                }
                labels.push(d as i32);
            }
            offset += digit.nrows();
        }
    }
    Ok((PointCloudSequence::from_coords(coords)?, labels))
}

/// A digit of the 8-class velocity subset: centre location, horizontal
/// distortion, label = velocity index.
pub fn velocity_subset_sample(source: &DigitSource, velocity: usize, seed: u64) -> Result<PointCloudSequence> {
    let motion = MotionSpec::new(4, velocity, Distortion::Horizontal)?;
    let digit = source.pick(rng::derive(seed, &[0]))?;
    Ok(generate_moving_digit(digit.view(), motion, rng::derive(seed, &[1]))?.0)
}

// ---------------------------------------------------------------------------
// Clip splitting

/// Sliding windows of `clip_len` frames taken every `frame_stride` frames,
/// advancing one frame at a time.
pub fn split_clips(sequence: &PointCloudSequence, clip_len: usize, frame_stride: usize) -> Result<Vec<PointCloudSequence>> {
    if clip_len == 0 || frame_stride == 0 {
        return Err(Error::invalid("clip length and frame stride must be positive"));
    }
    let span = (clip_len - 1) * frame_stride + 1;
    if span > sequence.frames() {
        return Err(Error::invalid(format!(
            "sequence of {} frames shorter than a clip spanning {span}",
            sequence.frames()
        )));
    }
    (0..=sequence.frames() - span)
        .map(|start| sequence.select_frames(start, clip_len, frame_stride))
        .collect()
}

// ---------------------------------------------------------------------------
// PCSQ1 records

pub const PCSQ_MAGIC: &[u8; 5] = b"PCSQ1";
const FLAG_POINT_LABELS: u32 = 1;
const HEADER_LEN: usize = 5 + 4 * 5;

/// A sequence with its label as stored on disk (values are `f32`).
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    pub sequence: PointCloudSequence,
    pub label: i32,
    /// `L * N` labels, frame-major.
    pub point_labels: Option<Vec<i32>>,
}

impl SequenceRecord {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let seq = &self.sequence;
        let (l, n, c) = (seq.frames(), seq.points(), seq.channels());
        if let Some(p) = &self.point_labels {
            if p.len() != l * n {
                return Err(Error::invalid(format!("{} point labels for {l}x{n} points", p.len())));
            }
        }
        let dim = |v: usize| u32::try_from(v).map_err(|_| Error::invalid(format!("dimension {v} too large")));
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * l * n * (3 + c + 1));
        out.extend_from_slice(PCSQ_MAGIC);
        for v in [dim(l)?, dim(n)?, dim(c)?] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.label.to_le_bytes());
        let flags = if self.point_labels.is_some() { FLAG_POINT_LABELS } else { 0 };
        out.extend_from_slice(&flags.to_le_bytes());
        for &v in seq.coords().iter().chain(seq.feats().iter()) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &v in self.point_labels.iter().flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::parse(format!("PCSQ1 record truncated ({} bytes)", bytes.len())));
        }
        if &bytes[..5] != PCSQ_MAGIC {
            return Err(Error::parse("bad magic, not a PCSQ1 record"));
        }
        let word = |i: usize| <[u8; 4]>::try_from(&bytes[5 + 4 * i..9 + 4 * i]).expect("4 bytes");
        let l = u32::from_le_bytes(word(0)) as usize;
        let n = u32::from_le_bytes(word(1)) as usize;
        let c = u32::from_le_bytes(word(2)) as usize;
        let label = i32::from_le_bytes(word(3));
        let flags = u32::from_le_bytes(word(4));
        if flags & !FLAG_POINT_LABELS != 0 {
            return Err(Error::parse(format!("unknown PCSQ1 flags {flags:#x}")));
        }
        let has_labels = flags & FLAG_POINT_LABELS != 0;
        let points = l.checked_mul(n).ok_or_else(|| Error::parse("PCSQ1 dimensions overflow"))?;
        let words = points
            .checked_mul(3 + c + has_labels as usize)
            .ok_or_else(|| Error::parse("PCSQ1 dimensions overflow"))?;
        let expected = words.checked_mul(4).and_then(|b| b.checked_add(HEADER_LEN));
        if expected != Some(bytes.len()) {
            return Err(Error::parse(format!(
                "PCSQ1 record is {} bytes, header implies {}",
                bytes.len(),
                expected.map_or("overflow".to_string(), |e| e.to_string())
            )));
        }
        let mut body = bytes[HEADER_LEN..].chunks_exact(4).map(|b| <[u8; 4]>::try_from(b).expect("4 bytes"));
        let mut floats = |count: usize| -> Vec<f64> {
            body.by_ref().take(count).map(|b| f32::from_le_bytes(b) as f64).collect()
        };
        let coords = Array3::from_shape_vec((l, n, 3), floats(points * 3)).expect("sized");
        let feats = Array3::from_shape_vec((l, n, c), floats(points * c)).expect("sized");
        let point_labels = has_labels.then(|| body.map(i32::from_le_bytes).collect());
        let sequence = PointCloudSequence::new(coords, feats).map_err(|e| Error::parse(e.to_string()))?;
        Ok(Self { sequence, label, point_labels })
    }
}

pub fn write_sequence(path: &Path, record: &SequenceRecord) -> Result<()> {
    let bytes = record.encode()?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_sequence(path: &Path) -> Result<SequenceRecord> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    SequenceRecord::decode(&bytes)
}

// ---------------------------------------------------------------------------
// Dataset manifest

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub label: i32,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub task: String,
    pub num_classes: usize,
    pub seed: u64,
    pub digits: String,
    pub records: Vec<ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

impl DatasetManifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(MANIFEST_NAME), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_NAME))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(format!("dataset manifest: {e}")))
    }

    /// Records of one split, in manifest order.
    pub fn split<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a ManifestEntry> + 'a {
        self.records.iter().filter(move |r| r.split == name)
    }

    pub fn resolve(dir: &Path, entry: &ManifestEntry) -> PathBuf {
        dir.join(&entry.path)
    }
}

/// Deterministic shuffled order of `0..n`.
pub fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::rng(seed));
    idx
}
