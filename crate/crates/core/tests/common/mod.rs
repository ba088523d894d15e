//! Brute-force reference evaluators written straight from the definitions,
//! sharing no code with the library beyond plain data types.
#![allow(dead_code)]

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform3(rng: &mut ChaCha8Rng, shape: (usize, usize, usize), lo: f64, hi: f64) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || rng.gen_range(lo..hi))
}

pub fn uniform2(rng: &mut ChaCha8Rng, shape: (usize, usize), lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.gen_range(lo..hi))
}

fn d2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn pt(p: &ArrayView2<'_, f64>, i: usize) -> Vec<f64> {
    p.row(i).to_vec()
}

/// Farthest point sampling by recomputing every min-distance from scratch.
pub fn fps(points: ArrayView2<'_, f64>, n_out: usize) -> Vec<usize> {
    let n = points.nrows();
    let mut first = 0;
    for i in 1..n {
        let (a, b) = (pt(&points, i), pt(&points, first));
        if a.partial_cmp(&b) == Some(std::cmp::Ordering::Less) {
            first = i;
        }
    }
    let mut sel = vec![first];
    while sel.len() < n_out {
        let mut best = None;
        let mut best_d = -1.0;
        for i in 0..n {
            if sel.contains(&i) {
                continue;
            }
            let d = sel.iter().map(|&s| d2(&pt(&points, i), &pt(&points, s))).fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best = Some(i);
            }
        }
        sel.push(best.unwrap());
    }
    sel
}

/// Deterministic neighborhood: in-radius points nearest first (index tiebreak),
/// cycled to `k` entries; the nearest point when nothing is in range.
pub fn neighbors(anchor: &[f64], points: ArrayView2<'_, f64>, r: f64, k: Option<usize>) -> Vec<usize> {
    let n = points.nrows();
    let mut inr: Vec<(f64, usize)> =
        (0..n).map(|i| (d2(&pt(&points, i), anchor), i)).filter(|&(d, _)| d <= r * r).collect();
    inr.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if inr.is_empty() {
        let mut all: Vec<(f64, usize)> = (0..n).map(|i| (d2(&pt(&points, i), anchor), i)).collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        return vec![all[0].1; k.unwrap_or(1)];
    }
    let idx: Vec<usize> = inr.into_iter().map(|(_, i)| i).collect();
    match k {
        None => idx,
        Some(k) => (0..k).map(|j| idx[j % idx.len()]).collect(),
    }
}

pub struct ConvParams {
    pub l: usize,
    pub s_t: usize,
    pub p: [usize; 2],
    pub s_s: usize,
    pub r: f64,
    pub k: Option<usize>,
    pub theta_d: Option<Array2<f64>>,
    pub theta_s: Option<Array2<f64>>,
    /// `[l, C', C_m]`
    pub temporal: Array3<f64>,
    pub bias: Option<Array1<f64>>,
}

pub fn anchor_frames(frames: usize, l: usize, s_t: usize, p: [usize; 2]) -> Vec<usize> {
    let out = (frames + p[0] + p[1] - l) / s_t + 1;
    (0..out).map(|i| i * s_t + l / 2 - p[0]).collect()
}

/// Anchor coordinates `[L', N', 3]` and output features `[L', N', C']`.
///
/// The spatial kernel is materialized as the full `C_m x C` matrix
/// `f(δ)[m][c] = (θ_d δ)[m] θ_s[m][c]` for every neighbor.
pub fn pst_conv(coords: ArrayView3<'_, f64>, feats: ArrayView3<'_, f64>, p: &ConvParams) -> (Array3<f64>, Array3<f64>) {
    let (frames, n, c) = feats.dim();
    let h = p.l / 2;
    let anchors_t = anchor_frames(frames, p.l, p.s_t, p.p);
    let no = n / p.s_s;
    let co = p.temporal.dim().1;
    let cm = p.temporal.dim().2;
    let mut out_c = Array3::zeros((anchors_t.len(), no, 3));
    let mut out_f = Array3::zeros((anchors_t.len(), no, co));
    for (i, &a) in anchors_t.iter().enumerate() {
        let frame = coords.index_axis(ndarray::Axis(0), a);
        let sel = fps(frame, no);
        for (j, &s) in sel.iter().enumerate() {
            let anchor = pt(&frame, s);
            for d in 0..3 {
                out_c[[i, j, d]] = anchor[d];
            }
            let mut y = vec![0.0; co];
            for kk in 0..p.l {
                let t = a as isize + kk as isize - h as isize;
                if t < 0 || t >= frames as isize {
                    continue;
                }
                let t = t as usize;
                let fr = coords.index_axis(ndarray::Axis(0), t);
                let mut m = vec![0.0; cm];
                for q in neighbors(&anchor, fr, p.r, p.k) {
                    let delta: Vec<f64> = (0..3).map(|d| fr[[q, d]] - anchor[d]).collect();
                    let disp: Vec<f64> = match &p.theta_d {
                        Some(td) => (0..cm).map(|mm| (0..3).map(|d| td[[mm, d]] * delta[d]).sum()).collect(),
                        None => vec![1.0; cm],
                    };
                    match &p.theta_s {
                        Some(ts) if c > 0 => {
                            for mm in 0..cm {
                                for cc in 0..c {
                                    let w = disp[mm] * ts[[mm, cc]];
                                    m[mm] += w * feats[[t, q, cc]];
                                }
                            }
                        }
                        _ => {
                            for mm in 0..cm {
                                m[mm] += disp[mm];
                            }
                        }
                    }
                }
                for o in 0..co {
                    for mm in 0..cm {
                        y[o] += p.temporal[[kk, o, mm]] * m[mm];
                    }
                }
            }
            for o in 0..co {
                out_f[[i, j, o]] = y[o] + p.bias.as_ref().map_or(0.0, |b| b[o]);
            }
        }
    }
    (out_c, out_f)
}

/// Transposed convolution: temporal scatter of `T'_k F'_i` to frame `a_i + k - h`,
/// inverse-square-distance interpolation from frame `i`'s anchors, then `S'`.
pub fn pst_trans(
    enc_coords: ArrayView3<'_, f64>,
    enc_feats: ArrayView3<'_, f64>,
    original: ArrayView3<'_, f64>,
    l: usize,
    s_t: usize,
    p: [usize; 2],
    r: f64,
    temporal: &Array3<f64>,
    sharing: &Array2<f64>,
) -> Array3<f64> {
    let (frames, n, _) = original.dim();
    let h = l / 2;
    let cm = temporal.dim().1;
    let co = sharing.nrows();
    let anchors_t = anchor_frames(frames, l, s_t, p);
    let mut out = Array3::zeros((frames, n, co));
    for t in 0..frames {
        for x in 0..n {
            let xp: Vec<f64> = (0..3).map(|d| original[[t, x, d]]).collect();
            let mut acc = vec![0.0; cm];
            for (i, &a) in anchors_t.iter().enumerate() {
                for kk in 0..l {
                    if a as isize + kk as isize - h as isize != t as isize {
                        continue;
                    }
                    let na = enc_coords.dim().1;
                    let value = |j: usize| -> Vec<f64> {
                        (0..cm)
                            .map(|mm| (0..enc_feats.dim().2).map(|c| temporal[[kk, mm, c]] * enc_feats[[i, j, c]]).sum())
                            .collect()
                    };
                    let dist: Vec<f64> =
                        (0..na).map(|j| (0..3).map(|d| (enc_coords[[i, j, d]] - xp[d]).powi(2)).sum()).collect();
                    let inr: Vec<usize> = (0..na).filter(|&j| dist[j] <= r * r).collect();
                    if inr.is_empty() {
                        let mut best = 0;
                        for j in 1..na {
                            if dist[j] < dist[best] {
                                best = j;
                            }
                        }
                        let v = value(best);
                        for mm in 0..cm {
                            acc[mm] += v[mm];
                        }
                    } else {
                        let ws: Vec<f64> = inr.iter().map(|&j| 1.0 / dist[j].max(1e-10)).collect();
                        let total: f64 = ws.iter().sum();
                        for (&j, w) in inr.iter().zip(&ws) {
                            let v = value(j);
                            for mm in 0..cm {
                                acc[mm] += w / total * v[mm];
                            }
                        }
                    }
                }
            }
            for o in 0..co {
                out[[t, x, o]] = (0..cm).map(|mm| sharing[[o, mm]] * acc[mm]).sum();
            }
        }
    }
    out
}

/// `max |a - b| / max |b|` (zero when both are identically zero).
pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
