//! Sparse pyramidal Lucas-Kanade flow on equirectangular frames.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geom::Dims;
use crate::image::EquirectImage;

/// Flow vectors sampled on a regular pixel grid.
///
/// Sample `(i, j)` sits at pixel `(offset + i * step, offset + j * step)`
/// with `offset = step / 2`. Vectors are in pixels from frame A to frame B.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    dims: Dims,
    step: usize,
    grid_w: usize,
    grid_h: usize,
    vectors: Vec<[f32; 2]>,
    valid: Vec<bool>,
}

impl FlowField {
    pub fn grid_size(dims: Dims, step: usize) -> (usize, usize) {
        let off = step / 2;
        let gw = (dims.width - off).div_ceil(step);
        let gh = (dims.height - off).div_ceil(step);
        (gw, gh)
    }

    /// Builds a field from row-major grid samples; `None` marks invalid.
    pub fn from_samples(dims: Dims, step: usize, samples: Vec<Option<[f32; 2]>>) -> Self {
        let (grid_w, grid_h) = Self::grid_size(dims, step);
        assert_eq!(samples.len(), grid_w * grid_h, "sample count");
        let limit = dims.width as f32 / 4.0;
        let mut vectors = Vec::with_capacity(samples.len());
        let mut valid = Vec::with_capacity(samples.len());
        for s in samples {
            match s {
                Some(v) if v[0].is_finite() && v[1].is_finite() && v[0].hypot(v[1]) < limit => {
                    vectors.push(v);
                    valid.push(true);
                }
                _ => {
                    vectors.push([0.0, 0.0]);
                    valid.push(false);
                }
            }
        }
        Self {
            dims,
            step,
            grid_w,
            grid_h,
            vectors,
            valid,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }
    pub fn step(&self) -> usize {
        self.step
    }
    pub fn grid_width(&self) -> usize {
        self.grid_w
    }
    pub fn grid_height(&self) -> usize {
        self.grid_h
    }

    /// Pixel position of grid sample `(i, j)`.
    pub fn position(&self, i: usize, j: usize) -> (f64, f64) {
        let off = (self.step / 2) as f64;
        (off + (i * self.step) as f64, off + (j * self.step) as f64)
    }

    pub fn get(&self, i: usize, j: usize) -> Option<[f32; 2]> {
        let k = j * self.grid_w + i;
        self.valid[k].then_some(self.vectors[k])
    }

    pub fn iter(&self) -> impl Iterator<Item = ([f32; 2], bool)> + '_ {
        self.vectors.iter().copied().zip(self.valid.iter().copied())
    }

    /// Valid samples as `(u, v, dx, dy)`.
    pub fn valid_samples(&self) -> impl Iterator<Item = (f64, f64, f64, f64)> + '_ {
        (0..self.grid_h).flat_map(move |j| {
            (0..self.grid_w).filter_map(move |i| {
                let v = self.get(i, j)?;
                let (u, w) = self.position(i, j);
                Some((u, w, v[0] as f64, v[1] as f64))
            })
        })
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Same field with every vector negated.
    pub fn negated(&self) -> Self {
        let mut out = self.clone();
        for v in &mut out.vectors {
            *v = [-v[0], -v[1]];
        }
        out
    }

    /// Interleaved `(dx, dy, valid)` rows for three-channel PFM export.
    pub fn to_rgb_triplets(&self) -> Vec<f32> {
        self.iter()
            .flat_map(|(v, ok)| if ok { [v[0], v[1], 1.0] } else { [0.0, 0.0, 0.0] })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowParams {
    pub levels: usize,
    pub window_radius: usize,
    pub iterations: usize,
    /// Minimum per-pixel eigenvalue of the gradient structure tensor.
    pub min_eigenvalue: f32,
    /// Mean absolute intensity residual above which a track is rejected.
    pub max_residual: f32,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            levels: 4,
            window_radius: 7,
            iterations: 30,
            min_eigenvalue: 1e-5,
            max_residual: 0.08,
        }
    }
}

/// Single-channel float plane with horizontal wrap and vertical clamp.
#[derive(Debug, Clone)]
pub(crate) struct Plane {
    pub w: usize,
    pub h: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn from_image(img: &EquirectImage) -> Self {
        let g = img.to_gray();
        Self {
            w: g.width(),
            h: g.height(),
            data: g.data().to_vec(),
        }
    }

    #[inline]
    pub fn at(&self, x: isize, y: isize) -> f32 {
        let xi = x.rem_euclid(self.w as isize) as usize;
        let yi = y.clamp(0, self.h as isize - 1) as usize;
        self.data[yi * self.w + xi]
    }

    #[inline]
    pub fn sample(&self, x: f64, y: f64) -> f32 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = (x - x0) as f32;
        let fy = (y - y0) as f32;
        let (xi, yi) = (x0 as isize, y0 as isize);
        let a = self.at(xi, yi);
        let b = self.at(xi + 1, yi);
        let c = self.at(xi, yi + 1);
        let d = self.at(xi + 1, yi + 1);
        (a * (1.0 - fx) + b * fx) * (1.0 - fy) + (c * (1.0 - fx) + d * fx) * fy
    }

    /// 5-tap binomial blur then 2x decimation.
    pub fn downsample(&self) -> Self {
        const K: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
        let mut tmp = vec![0.0f32; self.w * self.h];
        for y in 0..self.h {
            for x in 0..self.w {
                let mut s = 0.0;
                for (k, wk) in K.iter().enumerate() {
                    s += wk * self.at(x as isize + k as isize - 2, y as isize);
                }
                tmp[y * self.w + x] = s;
            }
        }
        let blurred = Plane {
            w: self.w,
            h: self.h,
            data: tmp,
        };
        let (w2, h2) = (self.w / 2, (self.h / 2).max(1));
        let mut data = vec![0.0f32; w2 * h2];
        for y in 0..h2 {
            for x in 0..w2 {
                let mut s = 0.0;
                for (k, wk) in K.iter().enumerate() {
                    s += wk * blurred.at(2 * x as isize, 2 * y as isize + k as isize - 2);
                }
                data[y * w2 + x] = s;
            }
        }
        Plane { w: w2, h: h2, data }
    }

    pub fn gradients(&self) -> (Plane, Plane) {
        let mut gx = vec![0.0f32; self.w * self.h];
        let mut gy = vec![0.0f32; self.w * self.h];
        for y in 0..self.h as isize {
            for x in 0..self.w as isize {
                let i = y as usize * self.w + x as usize;
                gx[i] = 0.5 * (self.at(x + 1, y) - self.at(x - 1, y));
                gy[i] = 0.5 * (self.at(x, y + 1) - self.at(x, y - 1));
            }
        }
        (
            Plane {
                w: self.w,
                h: self.h,
                data: gx,
            },
            Plane {
                w: self.w,
                h: self.h,
                data: gy,
            },
        )
    }
}

pub(crate) struct Pyramid {
    levels: Vec<(Plane, Plane, Plane)>,
}

impl Pyramid {
    pub fn new(img: &EquirectImage, levels: usize) -> Self {
        let mut out = Vec::with_capacity(levels);
        let mut p = Plane::from_image(img);
        for l in 0..levels.max(1) {
            if l > 0 {
                p = p.downsample();
            }
            let (gx, gy) = p.gradients();
            out.push((p.clone(), gx, gy));
            if p.w < 16 || p.h < 8 {
                break;
            }
        }
        Self { levels: out }
    }
}

/// Tracks the point `(u, v)` of frame A into frame B starting from `guess`.
pub(crate) fn track_point(
    pa: &Pyramid,
    pb: &Pyramid,
    u: f64,
    v: f64,
    guess: [f64; 2],
    params: &FlowParams,
) -> Option<[f64; 2]> {
    let r = params.window_radius as isize;
    let n = ((2 * r + 1) * (2 * r + 1)) as usize;
    let top = pa.levels.len().min(pb.levels.len()) - 1;
    let mut g = [guess[0] / (1 << top) as f64, guess[1] / (1 << top) as f64];
    let mut tmpl = vec![0.0f32; n];
    let mut gxs = vec![0.0f32; n];
    let mut gys = vec![0.0f32; n];
    for level in (0..=top).rev() {
        let scale = (1 << level) as f64;
        let (ia, gxa, gya) = &pa.levels[level];
        let ib = &pb.levels[level].0;
        let (cx, cy) = (u / scale, v / scale);
        let (mut a11, mut a12, mut a22) = (0.0f64, 0.0f64, 0.0f64);
        let mut k = 0;
        for dy in -r..=r {
            for dx in -r..=r {
                let (x, y) = (cx + dx as f64, cy + dy as f64);
                tmpl[k] = ia.sample(x, y);
                gxs[k] = gxa.sample(x, y);
                gys[k] = gya.sample(x, y);
                a11 += (gxs[k] * gxs[k]) as f64;
                a12 += (gxs[k] * gys[k]) as f64;
                a22 += (gys[k] * gys[k]) as f64;
                k += 1;
            }
        }
        let det = a11 * a22 - a12 * a12;
        let tr = a11 + a22;
        let min_eig = 0.5 * (tr - (tr * tr - 4.0 * det).max(0.0).sqrt()) / n as f64;
        if min_eig < params.min_eigenvalue as f64 || det.abs() < 1e-18 {
            return None;
        }
        let mut d = [0.0f64, 0.0f64];
        let mut converged = false;
        for _ in 0..params.iterations {
            let (mut b1, mut b2) = (0.0f64, 0.0f64);
            let mut k = 0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let x = cx + dx as f64 + g[0] + d[0];
                    let y = cy + dy as f64 + g[1] + d[1];
                    let diff = (tmpl[k] - ib.sample(x, y)) as f64;
                    b1 += diff * gxs[k] as f64;
                    b2 += diff * gys[k] as f64;
                    k += 1;
                }
            }
            let step_x = (a22 * b1 - a12 * b2) / det;
            let step_y = (a11 * b2 - a12 * b1) / det;
            d[0] += step_x;
            d[1] += step_y;
            if step_x.hypot(step_y) < 0.005 {
                converged = true;
                break;
            }
        }
        if level == 0 && !converged {
            return None;
        }
        g = [g[0] + d[0], g[1] + d[1]];
        if level > 0 {
            g = [2.0 * g[0], 2.0 * g[1]];
        }
    }
    // Photometric check at full resolution.
    let (ia, ib) = (&pa.levels[0].0, &pb.levels[0].0);
    let mut err = 0.0f64;
    for dy in -r..=r {
        for dx in -r..=r {
            let a = ia.sample(u + dx as f64, v + dy as f64);
            let b = ib.sample(u + dx as f64 + g[0], v + dy as f64 + g[1]);
            err += (a - b).abs() as f64;
        }
    }
    if err / n as f64 > params.max_residual as f64 {
        return None;
    }
    Some(g)
}

/// Flow from `a` to `b` on a grid with spacing `grid_step`.
pub fn compute_flow(a: &EquirectImage, b: &EquirectImage, grid_step: usize) -> FlowField {
    compute_flow_with(a, b, grid_step, &FlowParams::default())
}

pub fn compute_flow_with(a: &EquirectImage, b: &EquirectImage, grid_step: usize, params: &FlowParams) -> FlowField {
    assert_eq!(a.dims(), b.dims(), "flow frames must share dims");
    let step = grid_step.max(1);
    let dims = a.dims();
    let pa = Pyramid::new(a, params.levels);
    let pb = Pyramid::new(b, params.levels);
    let (gw, gh) = FlowField::grid_size(dims, step);
    let off = step / 2;
    let samples: Vec<Option<[f32; 2]>> = (0..gw * gh)
        .into_par_iter()
        .map(|k| {
            let u = (off + (k % gw) * step) as f64;
            let v = (off + (k / gw) * step) as f64;
            track_point(&pa, &pb, u, v, [0.0, 0.0], params).map(|g| [g[0] as f32, g[1] as f32])
        })
        .collect();
    let field = FlowField::from_samples(dims, step, samples);
    if field.valid_count() == 0 {
        log::warn!("optical flow produced no valid vectors");
    }
    field
}
