//! Ray-cast equirectangular renderer with ground-truth depth and flow.
//!
//! Scenes are built from planes, spheres and axis-aligned boxes shaded by a
//! deterministic solid texture (value-noise octaves plus an optional
//! checkerboard). Octaves finer than the pixel footprint are faded out, so a
//! single ray per pixel stays free of aliasing.

use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::flow::FlowField;
use crate::geom::{dir_from_pixel, pixel_from_vec, Dims, Rotation3};
use crate::image::EquirectImage;
use crate::stereo::DepthMap;

const HIT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Texture {
    /// Wavelength of the coarsest noise octave, meters.
    pub scale: f64,
    pub octaves: u32,
    pub seed: u64,
    /// Blend weight of a checkerboard with period `scale`.
    pub checker: f64,
    /// Peak-to-peak gray variation around the mean.
    pub contrast: f64,
    pub mean: f64,
    pub tint: [f64; 3],
}

impl Default for Texture {
    fn default() -> Self {
        Self {
            scale: 0.5,
            octaves: 4,
            seed: 1,
            checker: 0.0,
            contrast: 0.8,
            mean: 0.5,
            tint: [1.0, 1.0, 1.0],
        }
    }
}

impl Texture {
    pub fn noise(scale: f64, seed: u64) -> Self {
        Self {
            scale,
            seed,
            ..Self::default()
        }
    }

    /// Gray value at world point `p` for a pixel footprint of `footprint` meters.
    pub fn value(&self, p: &Vector3<f64>, footprint: f64) -> f64 {
        let mut sum = 0.0;
        let mut amp_total = 0.0;
        let mut amp = 1.0;
        let mut wavelength = self.scale;
        for octave in 0..self.octaves {
            let lod = lod_weight(wavelength, footprint);
            let n = if lod > 0.0 {
                value_noise(&(p / wavelength), self.seed.wrapping_add(octave as u64 * 7919))
            } else {
                0.5
            };
            sum += amp * (lod * n + (1.0 - lod) * 0.5);
            amp_total += amp;
            amp *= 0.5;
            wavelength *= 0.5;
        }
        let mut t = if amp_total > 0.0 { sum / amp_total } else { 0.5 };
        if self.checker > 0.0 {
            let cell = (p / self.scale).map(f64::floor);
            let parity = ((cell.x + cell.y + cell.z) as i64).rem_euclid(2) as f64;
            let lod = lod_weight(self.scale, footprint);
            let c = lod * parity + (1.0 - lod) * 0.5;
            t = (1.0 - self.checker) * t + self.checker * c;
        }
        // Octave sums concentrate near 0.5; stretch to use the contrast range.
        (self.mean + self.contrast * 1.6 * (t - 0.5)).clamp(0.0, 1.0)
    }
}

fn lod_weight(wavelength: f64, footprint: f64) -> f64 {
    if footprint <= 0.0 {
        return 1.0;
    }
    ((wavelength / footprint - 2.0) / 2.0).clamp(0.0, 1.0)
}

fn hash3(x: i64, y: i64, z: i64, seed: u64) -> f64 {
    let mut h = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    for k in [x, y, z] {
        h ^= (k as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = h.rotate_left(31).wrapping_mul(0x94D0_49BB_1331_11EB);
    }
    h ^= h >> 29;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 32;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

fn value_noise(p: &Vector3<f64>, seed: u64) -> f64 {
    let base = p.map(f64::floor);
    let f = p - base;
    let (ix, iy, iz) = (base.x as i64, base.y as i64, base.z as i64);
    let (fx, fy, fz) = (fade(f.x), fade(f.y), fade(f.z));
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let mut corners = [0.0; 8];
    for (k, c) in corners.iter_mut().enumerate() {
        let dx = (k & 1) as i64;
        let dy = ((k >> 1) & 1) as i64;
        let dz = ((k >> 2) & 1) as i64;
        *c = hash3(ix + dx, iy + dy, iz + dz, seed);
    }
    let x00 = lerp(corners[0], corners[1], fx);
    let x10 = lerp(corners[2], corners[3], fx);
    let x01 = lerp(corners[4], corners[5], fx);
    let x11 = lerp(corners[6], corners[7], fx);
    lerp(lerp(x00, x10, fy), lerp(x01, x11, fy), fz)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Primitive {
    Plane {
        point: [f64; 3],
        normal: [f64; 3],
        #[serde(default)]
        texture: Texture,
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
        #[serde(default)]
        texture: Texture,
    },
    #[serde(rename = "box")]
    AaBox {
        min: [f64; 3],
        max: [f64; 3],
        #[serde(default)]
        texture: Texture,
    },
}

struct Hit {
    t: f64,
    cos_incidence: f64,
}

impl Primitive {
    pub fn texture(&self) -> &Texture {
        match self {
            Primitive::Plane { texture, .. } | Primitive::Sphere { texture, .. } | Primitive::AaBox { texture, .. } => {
                texture
            }
        }
    }

    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        match self {
            Primitive::Plane { point, normal, .. } => {
                let n = Vector3::from(*normal).normalize();
                let denom = d.dot(&n);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = (Vector3::from(*point) - o).dot(&n) / denom;
                (t > HIT_EPS).then_some(Hit {
                    t,
                    cos_incidence: denom.abs(),
                })
            }
            Primitive::Sphere { center, radius, .. } => {
                let oc = o - Vector3::from(*center);
                let b = oc.dot(d);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = if -b - sq > HIT_EPS { -b - sq } else { -b + sq };
                if t <= HIT_EPS {
                    return None;
                }
                let n = (oc + d * t) / *radius;
                Some(Hit {
                    t,
                    cos_incidence: n.dot(d).abs(),
                })
            }
            Primitive::AaBox { min, max, .. } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut near_axis = 0;
                let mut far_axis = 0;
                for axis in 0..3 {
                    if d[axis].abs() < 1e-15 {
                        if o[axis] < min[axis] || o[axis] > max[axis] {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / d[axis];
                    let mut t0 = (min[axis] - o[axis]) * inv;
                    let mut t1 = (max[axis] - o[axis]) * inv;
                    if t0 > t1 {
                        std::mem::swap(&mut t0, &mut t1);
                    }
                    if t0 > t_near {
                        t_near = t0;
                        near_axis = axis;
                    }
                    if t1 < t_far {
                        t_far = t1;
                        far_axis = axis;
                    }
                }
                if t_near > t_far {
                    return None;
                }
                let (t, axis) = if t_near > HIT_EPS {
                    (t_near, near_axis)
                } else if t_far > HIT_EPS {
                    (t_far, far_axis)
                } else {
                    return None;
                };
                Some(Hit {
                    t,
                    cos_incidence: d[axis].abs(),
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    #[serde(default)]
    pub background: f64,
}

impl Scene {
    pub fn empty() -> Self {
        Self {
            primitives: Vec::new(),
            background: 0.0,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Nearest hit along a unit ray: distance and primitive index.
    pub fn trace(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, usize)> {
        self.trace_hit(o, d).map(|(h, i)| (h.t, i))
    }

    fn trace_hit(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(Hit, usize)> {
        let mut best: Option<(Hit, usize)> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some(h) = p.intersect(o, d) {
                if best.as_ref().is_none_or(|(b, _)| h.t < b.t) {
                    best = Some((h, i));
                }
            }
        }
        best
    }

    fn shade(&self, o: &Vector3<f64>, d: &Vector3<f64>, pixel_angle: f64) -> ([f32; 3], f64) {
        match self.trace_hit(o, d) {
            Some((hit, i)) => {
                let p = o + d * hit.t;
                let footprint = hit.t * pixel_angle / hit.cos_incidence.max(0.2);
                let tex = self.primitives[i].texture();
                let g = tex.value(&p, footprint);
                let rgb = [
                    (g * tex.tint[0]) as f32,
                    (g * tex.tint[1]) as f32,
                    (g * tex.tint[2]) as f32,
                ];
                (rgb, hit.t)
            }
            None => {
                let b = self.background as f32;
                ([b, b, b], f64::INFINITY)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub position: [f64; 3],
    /// Camera-to-world rotation: a camera bearing `d` points along `orientation * d`.
    pub orientation: Rotation3,
}

impl CameraPose {
    pub fn at(position: [f64; 3]) -> Self {
        Self {
            position,
            orientation: Rotation3::identity(),
        }
    }

    pub fn new(position: [f64; 3], orientation: Rotation3) -> Self {
        Self { position, orientation }
    }

    pub fn position(&self) -> Vector3<f64> {
        Vector3::from(self.position)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    /// Rays per pixel along each axis (1 or 2).
    pub supersample: usize,
    pub grayscale: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            supersample: 1,
            grayscale: false,
        }
    }
}

/// Renders the image and ground-truth depth (ray length) seen from `pose`.
pub fn render(scene: &Scene, pose: &CameraPose, dims: Dims) -> (EquirectImage, DepthMap) {
    render_with(scene, pose, dims, &RenderOptions::default())
}

pub fn render_with(scene: &Scene, pose: &CameraPose, dims: Dims, opts: &RenderOptions) -> (EquirectImage, DepthMap) {
    let o = pose.position();
    let ss = opts.supersample.max(1);
    let pixel_angle = dims.pixel_angle() / ss as f64;
    let channels = if opts.grayscale { 1 } else { 3 };
    let rows: Vec<(Vec<f32>, Vec<f32>)> = (0..dims.height)
        .into_par_iter()
        .map(|v| {
            let mut px = Vec::with_capacity(dims.width * channels);
            let mut depth = Vec::with_capacity(dims.width);
            for u in 0..dims.width {
                let mut acc = [0.0f32; 3];
                for sy in 0..ss {
                    for sx in 0..ss {
                        let du = (sx as f64 + 0.5) / ss as f64 - 0.5;
                        let dv = (sy as f64 + 0.5) / ss as f64 - 0.5;
                        let d = dir_from_pixel(u as f64 + du, v as f64 + dv, dims);
                        let (rgb, _) = scene.shade(&o, &pose.orientation.apply_vec(&d.vector()), pixel_angle);
                        for k in 0..3 {
                            acc[k] += rgb[k];
                        }
                    }
                }
                let n = (ss * ss) as f32;
                if channels == 1 {
                    px.push((0.299 * acc[0] + 0.587 * acc[1] + 0.114 * acc[2]) / n);
                } else {
                    px.extend(acc.iter().map(|a| a / n));
                }
                let d = dir_from_pixel(u as f64, v as f64, dims);
                let t = scene
                    .trace(&o, &pose.orientation.apply_vec(&d.vector()))
                    .map(|(t, _)| t as f32)
                    .unwrap_or(DepthMap::INVALID);
                depth.push(t);
            }
            (px, depth)
        })
        .collect();
    let mut data = Vec::with_capacity(dims.len() * channels);
    let mut depth = Vec::with_capacity(dims.len());
    for (p, d) in rows {
        data.extend(p);
        depth.extend(d);
    }
    let img = EquirectImage::new(dims.width, dims.height, channels, data).expect("render buffer");
    (img, DepthMap::from_values(dims, depth).expect("depth buffer"))
}

/// Ground-truth flow from frame A to frame B, one sample per pixel.
///
/// Pixels without a surface hit are invalid. Horizontal displacement is
/// wrapped into `(-width/2, width/2]`.
pub fn render_flow(scene: &Scene, pose_a: &CameraPose, pose_b: &CameraPose, dims: Dims) -> FlowField {
    let oa = pose_a.position();
    let ob = pose_b.position();
    let inv_b = pose_b.orientation.inverse();
    let w = dims.width as f64;
    let samples: Vec<Option<[f32; 2]>> = (0..dims.len())
        .into_par_iter()
        .map(|i| {
            let (u, v) = ((i % dims.width) as f64, (i / dims.width) as f64);
            let d = pose_a.orientation.apply_vec(&dir_from_pixel(u, v, dims).vector());
            let (t, _) = scene.trace(&oa, &d)?;
            let x = oa + d * t;
            let (ub, vb) = pixel_from_vec(&inv_b.apply_vec(&(x - ob)), dims);
            let mut dx = ub - u;
            dx -= (dx / w).round() * w;
            if dx <= -w / 2.0 {
                dx += w;
            }
            Some([dx as f32, (vb - v) as f32])
        })
        .collect();
    FlowField::from_samples(dims, 1, samples)
}

/// Reference scenes used by tests, examples and the CLI fixtures.
pub mod presets {
    use super::*;

    fn tex(scale: f64, seed: u64, tint: [f64; 3]) -> Texture {
        Texture {
            scale,
            seed,
            tint,
            ..Texture::default()
        }
    }

    /// Textured room a few meters across with some furniture-sized objects.
    pub fn room() -> Scene {
        Scene {
            primitives: vec![
                Primitive::AaBox {
                    min: [-4.0, -1.6, -5.0],
                    max: [5.0, 2.4, 4.5],
                    texture: tex(0.5, 11, [0.95, 0.9, 0.85]),
                },
                Primitive::Sphere {
                    center: [1.5, 0.0, 2.5],
                    radius: 0.6,
                    texture: tex(0.3, 12, [0.8, 0.9, 1.0]),
                },
                Primitive::AaBox {
                    min: [-2.5, -1.6, -1.0],
                    max: [-1.5, -0.4, 0.5],
                    texture: tex(0.3, 13, [1.0, 0.85, 0.8]),
                },
                Primitive::AaBox {
                    min: [2.0, -1.6, -3.5],
                    max: [3.2, 0.8, -2.6],
                    texture: tex(0.3, 14, [0.85, 1.0, 0.85]),
                },
            ],
            background: 0.0,
        }
    }

    /// Distant enclosure for rig calibration: parallax is negligible at any
    /// short baseline.
    pub fn far_field() -> Scene {
        Scene {
            primitives: vec![Primitive::AaBox {
                min: [-400.0, -300.0, -450.0],
                max: [420.0, 350.0, 380.0],
                texture: tex(60.0, 21, [1.0, 1.0, 1.0]),
            }],
            background: 0.0,
        }
    }

    /// Street canyon along +z, enclosed so every direction sees texture.
    pub fn street() -> Scene {
        let mut primitives = vec![Primitive::AaBox {
            min: [-6.0, -1.6, -60.0],
            max: [7.0, 8.0, 60.0],
            texture: tex(0.8, 31, [0.9, 0.9, 0.95]),
        }];
        for (k, z) in [-24.0, -12.0, 4.0, 15.0, 27.0].iter().enumerate() {
            primitives.push(Primitive::Sphere {
                center: [-4.0, 0.5, *z],
                radius: 0.9,
                texture: tex(0.4, 40 + k as u64, [0.7, 1.0, 0.7]),
            });
        }
        for (k, z) in [-18.0, 8.0, 20.0].iter().enumerate() {
            primitives.push(Primitive::AaBox {
                min: [3.5, -1.6, *z],
                max: [5.5, 0.0, *z + 4.0],
                texture: tex(0.4, 50 + k as u64, [1.0, 0.8, 0.7]),
            });
        }
        Scene {
            primitives,
            background: 0.0,
        }
    }
}
