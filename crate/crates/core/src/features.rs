//! Corner features, binary descriptors and bearing correspondences.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{track_point, FlowParams, Plane, Pyramid};
use crate::geom::{dir_from_pixel, Direction3};
use crate::image::EquirectImage;

const PATCH_RADIUS: f64 = 15.0;
const ORIENT_RADIUS: isize = 7;
const PATTERN_SEED: u64 = 0x5eed_b41e;

/// Same scene point seen from two frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub dir_a: Direction3,
    pub dir_b: Direction3,
}

/// Bearing correspondences between two frames.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchSet {
    pub frame_a: String,
    pub frame_b: String,
    pub matches: Vec<Correspondence>,
}

impl MatchSet {
    pub fn new(matches: Vec<Correspondence>) -> Self {
        Self {
            frame_a: "a".into(),
            frame_b: "b".into(),
            matches,
        }
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    /// One correspondence per line: `ax ay az bx by bz`.
    pub fn to_text(&self) -> String {
        let mut s = format!("# frames {} {}\n", self.frame_a, self.frame_b);
        for m in &self.matches {
            let (a, b) = (m.dir_a.vector(), m.dir_b.vector());
            let _ = writeln!(
                s,
                "{:.12} {:.12} {:.12} {:.12} {:.12} {:.12}",
                a.x, a.y, a.z, b.x, b.y, b.z
            );
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut set = MatchSet::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix('#') {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() == 3 && parts[0] == "frames" {
                    set.frame_a = parts[1].to_owned();
                    set.frame_b = parts[2].to_owned();
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format("match list", format!("line {}: bad number", lineno + 1)))?;
            if vals.len() != 6 {
                return Err(Error::format(
                    "match list",
                    format!("line {}: expected 6 values, got {}", lineno + 1, vals.len()),
                ));
            }
            let a = Direction3::normalize(nalgebra::Vector3::new(vals[0], vals[1], vals[2]))?;
            let b = Direction3::normalize(nalgebra::Vector3::new(vals[3], vals[4], vals[5]))?;
            set.matches.push(Correspondence { dir_a: a, dir_b: b });
        }
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct FeatureParams {
    pub max_features: usize,
    pub levels: usize,
    pub harris_k: f64,
    /// Responses below this fraction of the level maximum are dropped.
    pub quality: f64,
    /// Detection cell size in level pixels; at most one corner per cell.
    pub cell: usize,
    pub ratio: f64,
    pub max_hamming: u32,
    /// Matches closer than this to either pole are discarded.
    pub pole_margin_deg: f64,
    /// Largest allowed move of the matched position during subpixel refinement.
    pub max_refine_px: f64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            max_features: 2000,
            levels: 3,
            harris_k: 0.04,
            quality: 0.01,
            cell: 8,
            ratio: 0.8,
            max_hamming: 80,
            pole_margin_deg: 5.0,
            max_refine_px: 2.0,
        }
    }
}

/// Detected corner in full-resolution pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub u: f64,
    pub v: f64,
    pub level: usize,
    pub angle: f64,
    pub response: f64,
}

pub type Descriptor = [u64; 4];

fn hamming(a: &Descriptor, b: &Descriptor) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

fn pattern() -> Vec<[f64; 4]> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(PATTERN_SEED);
    let normal = Normal::new(0.0, 2.0 * PATCH_RADIUS / 5.0).expect("finite sigma");
    let mut draw = || loop {
        let x: f64 = normal.sample(&mut rng);
        if x.abs() <= PATCH_RADIUS - 1.0 {
            return x;
        }
    };
    (0..256).map(|_| [draw(), draw(), draw(), draw()]).collect()
}

fn blur(p: &Plane) -> Plane {
    const K: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let mut tmp = vec![0.0f32; p.w * p.h];
    for y in 0..p.h {
        for x in 0..p.w {
            tmp[y * p.w + x] = K
                .iter()
                .enumerate()
                .map(|(k, wk)| wk * p.at(x as isize + k as isize - 2, y as isize))
                .sum();
        }
    }
    let t = Plane {
        w: p.w,
        h: p.h,
        data: tmp,
    };
    let mut out = vec![0.0f32; p.w * p.h];
    for y in 0..p.h {
        for x in 0..p.w {
            out[y * p.w + x] = K
                .iter()
                .enumerate()
                .map(|(k, wk)| wk * t.at(x as isize, y as isize + k as isize - 2))
                .sum();
        }
    }
    Plane {
        w: p.w,
        h: p.h,
        data: out,
    }
}

fn harris(p: &Plane, k: f64) -> Vec<f64> {
    let (gx, gy) = p.gradients();
    let n = p.w * p.h;
    let mut xx = vec![0.0f32; n];
    let mut xy = vec![0.0f32; n];
    let mut yy = vec![0.0f32; n];
    for i in 0..n {
        xx[i] = gx.data[i] * gx.data[i];
        xy[i] = gx.data[i] * gy.data[i];
        yy[i] = gy.data[i] * gy.data[i];
    }
    let sxx = blur(&Plane {
        w: p.w,
        h: p.h,
        data: xx,
    });
    let sxy = blur(&Plane {
        w: p.w,
        h: p.h,
        data: xy,
    });
    let syy = blur(&Plane {
        w: p.w,
        h: p.h,
        data: yy,
    });
    (0..n)
        .map(|i| {
            let (a, b, c) = (sxx.data[i] as f64, sxy.data[i] as f64, syy.data[i] as f64);
            a * c - b * b - k * (a + c) * (a + c)
        })
        .collect()
}

fn orientation(p: &Plane, x: usize, y: usize) -> f64 {
    let (mut m10, mut m01) = (0.0f64, 0.0f64);
    for dy in -ORIENT_RADIUS..=ORIENT_RADIUS {
        for dx in -ORIENT_RADIUS..=ORIENT_RADIUS {
            if dx * dx + dy * dy > ORIENT_RADIUS * ORIENT_RADIUS {
                continue;
            }
            let i = p.at(x as isize + dx, y as isize + dy) as f64;
            m10 += dx as f64 * i;
            m01 += dy as f64 * i;
        }
    }
    m01.atan2(m10)
}

fn describe(p: &Plane, x: f64, y: f64, angle: f64, pattern: &[[f64; 4]]) -> Descriptor {
    let (s, c) = angle.sin_cos();
    let mut d = [0u64; 4];
    for (i, q) in pattern.iter().enumerate() {
        let a = p.sample(x + c * q[0] - s * q[1], y + s * q[0] + c * q[1]);
        let b = p.sample(x + c * q[2] - s * q[3], y + s * q[2] + c * q[3]);
        if a < b {
            d[i / 64] |= 1 << (i % 64);
        }
    }
    d
}

/// Multi-scale Harris corners with oriented binary descriptors.
pub fn detect_features(img: &EquirectImage, params: &FeatureParams) -> (Vec<Keypoint>, Vec<Descriptor>) {
    let pattern = pattern();
    let mut planes = vec![Plane::from_image(img)];
    for _ in 1..params.levels.max(1) {
        let next = planes.last().expect("non-empty").downsample();
        if next.h < 2 * PATCH_RADIUS as usize + 4 {
            break;
        }
        planes.push(next);
    }
    let quota = params.max_features / planes.len();
    let pole = (90.0 - params.pole_margin_deg).to_radians();
    let per_level: Vec<(Vec<Keypoint>, Vec<Descriptor>)> = planes
        .par_iter()
        .enumerate()
        .map(|(level, plane)| {
            let resp = harris(plane, params.harris_k);
            let max = resp.iter().copied().fold(0.0, f64::max);
            if max <= 0.0 {
                return (Vec::new(), Vec::new());
            }
            let floor = max * params.quality;
            let scale = (1usize << level) as f64;
            let cell = params.cell.max(1);
            let (cw, ch) = (plane.w.div_ceil(cell), plane.h.div_ceil(cell));
            let mut best: Vec<Option<(f64, usize, usize)>> = vec![None; cw * ch];
            for y in 3..plane.h.saturating_sub(3) {
                let v_full = (y as f64 + 0.5) * scale - 0.5;
                let lat = std::f64::consts::FRAC_PI_2 - (v_full + 0.5) / img.height() as f64 * std::f64::consts::PI;
                if lat.abs() > pole {
                    continue;
                }
                for x in 0..plane.w {
                    let r = resp[y * plane.w + x];
                    if r < floor {
                        continue;
                    }
                    let mut is_max = true;
                    'nms: for dy in -2isize..=2 {
                        for dx in -2isize..=2 {
                            if dx == 0 && dy == 0 {
                                continue;
                            }
                            let xx = (x as isize + dx).rem_euclid(plane.w as isize) as usize;
                            let yy = (y as isize + dy) as usize;
                            if resp[yy * plane.w + xx] > r {
                                is_max = false;
                                break 'nms;
                            }
                        }
                    }
                    if !is_max {
                        continue;
                    }
                    let c = (y / cell) * cw + x / cell;
                    if best[c].is_none_or(|(b, _, _)| r > b) {
                        best[c] = Some((r, x, y));
                    }
                }
            }
            let mut picked: Vec<(f64, usize, usize)> = best.into_iter().flatten().collect();
            picked.sort_by(|a, b| b.0.total_cmp(&a.0));
            picked.truncate(quota);
            let smooth = blur(plane);
            picked
                .into_iter()
                .map(|(r, x, y)| {
                    let angle = orientation(&smooth, x, y);
                    let desc = describe(&smooth, x as f64, y as f64, angle, &pattern);
                    let kp = Keypoint {
                        u: (x as f64 + 0.5) * scale - 0.5,
                        v: (y as f64 + 0.5) * scale - 0.5,
                        level,
                        angle,
                        response: r,
                    };
                    (kp, desc)
                })
                .unzip()
        })
        .collect();
    let mut kps = Vec::new();
    let mut descs = Vec::new();
    for (k, d) in per_level {
        kps.extend(k);
        descs.extend(d);
    }
    (kps, descs)
}

fn nearest_two(q: &Descriptor, set: &[Descriptor]) -> (usize, u32, u32) {
    let (mut bi, mut b1, mut b2) = (usize::MAX, u32::MAX, u32::MAX);
    for (i, d) in set.iter().enumerate() {
        let h = hamming(q, d);
        if h < b1 {
            b2 = b1;
            b1 = h;
            bi = i;
        } else if h < b2 {
            b2 = h;
        }
    }
    (bi, b1, b2)
}

/// Mutual nearest neighbours passing the ratio test, as index pairs.
pub fn match_descriptors(a: &[Descriptor], b: &[Descriptor], params: &FeatureParams) -> Vec<(usize, usize)> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let ab: Vec<(usize, u32, u32)> = a.par_iter().map(|q| nearest_two(q, b)).collect();
    let ba: Vec<usize> = b.par_iter().map(|q| nearest_two(q, a).0).collect();
    ab.iter()
        .enumerate()
        .filter(|&(i, &(j, d1, d2))| {
            ba[j] == i && d1 <= params.max_hamming && (d2 == u32::MAX || (d1 as f64) < params.ratio * d2 as f64)
        })
        .map(|(i, &(j, _, _))| (i, j))
        .collect()
}

/// Detects, matches and refines correspondences between two frames.
pub fn detect_and_match(a: &EquirectImage, b: &EquirectImage, params: &FeatureParams) -> Result<MatchSet> {
    if a.dims() != b.dims() {
        return Err(Error::mismatch((a.width(), a.height()), (b.width(), b.height())));
    }
    let (ka, da) = detect_features(a, params);
    let (kb, db) = detect_features(b, params);
    let pairs = match_descriptors(&da, &db, params);
    let dims = a.dims();
    let w = dims.width as f64;
    let flow = FlowParams {
        levels: 2,
        ..FlowParams::default()
    };
    let pa = Pyramid::new(a, flow.levels);
    let pb = Pyramid::new(b, flow.levels);
    let pole = (90.0 - params.pole_margin_deg).to_radians();
    let matches: Vec<Correspondence> = pairs
        .par_iter()
        .filter_map(|&(i, j)| {
            let (p, q) = (ka[i], kb[j]);
            let mut du = q.u - p.u;
            if du > w / 2.0 {
                du -= w;
            } else if du < -w / 2.0 {
                du += w;
            }
            let guess = [du, q.v - p.v];
            let g = track_point(&pa, &pb, p.u, p.v, guess, &flow)?;
            if (g[0] - guess[0]).hypot(g[1] - guess[1]) > params.max_refine_px {
                return None;
            }
            let ub = (p.u + g[0]).rem_euclid(w);
            let vb = p.v + g[1];
            let dir_a = dir_from_pixel(p.u, p.v, dims);
            let dir_b = dir_from_pixel(ub, vb, dims);
            if dir_a.y().asin().abs() > pole || dir_b.y().clamp(-1.0, 1.0).asin().abs() > pole {
                return None;
            }
            Some(Correspondence { dir_a, dir_b })
        })
        .collect();
    log::debug!(
        "features: {} / {} keypoints, {} mutual matches, {} refined",
        ka.len(),
        kb.len(),
        pairs.len(),
        matches.len()
    );
    if matches.len() < 8 {
        return Err(Error::InsufficientFeatures {
            found: matches.len(),
            needed: 8,
        });
    }
    Ok(MatchSet::new(matches))
}
