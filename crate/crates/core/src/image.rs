//! Equirectangular image container, resampling and 8-bit file I/O.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{dir_from_pixel, pixel_from_vec, top_view_rotation, Dims, Rotation3};

/// Full-sphere image, row-major, interleaved channels, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EquirectImage {
    dims: Dims,
    channels: usize,
    data: Vec<f32>,
}

impl EquirectImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        let dims = Dims::new(width, height)?;
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidConfig(format!(
                "images must have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != dims.len() * channels {
            return Err(Error::InvalidConfig(format!(
                "pixel buffer has {} samples, expected {}",
                data.len(),
                dims.len() * channels
            )));
        }
        Ok(Self { dims, channels, data })
    }

    pub fn filled(dims: Dims, channels: usize, value: f32) -> Self {
        Self {
            dims,
            channels,
            data: vec![value; dims.len() * channels],
        }
    }

    /// Builds a single-channel image by evaluating `f(u, v)` at every pixel.
    pub fn from_fn_gray(dims: Dims, f: impl Fn(usize, usize) -> f32 + Sync) -> Self {
        let mut data = vec![0.0f32; dims.len()];
        data.par_chunks_mut(dims.width).enumerate().for_each(|(v, row)| {
            for (u, px) in row.iter_mut().enumerate() {
                *px = f(u, v);
            }
        });
        Self {
            dims,
            channels: 1,
            data,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }
    pub fn width(&self) -> usize {
        self.dims.width
    }
    pub fn height(&self) -> usize {
        self.dims.height
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, u: usize, v: usize, c: usize) -> f32 {
        self.data[(v * self.dims.width + u) * self.channels + c]
    }

    pub fn set(&mut self, u: usize, v: usize, c: usize, value: f32) {
        self.data[(v * self.dims.width + u) * self.channels + c] = value;
    }

    /// Luma (Rec. 601) for RGB, a copy for gray.
    pub fn to_gray(&self) -> EquirectImage {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect();
        Self {
            dims: self.dims,
            channels: 1,
            data,
        }
    }

    /// Bilinear sample at continuous pixel coordinates; wraps in `u`, clamps in `v`.
    pub fn sample(&self, u: f64, v: f64, out: &mut [f32]) {
        let w = self.dims.width as isize;
        let h = self.dims.height;
        let (u0, fu) = split(u);
        let (v0, fv) = split(v.clamp(0.0, (h - 1) as f64));
        let ua = u0.rem_euclid(w) as usize;
        let ub = (u0 + 1).rem_euclid(w) as usize;
        let va = v0 as usize;
        let vb = (va + 1).min(h - 1);
        let c = self.channels;
        let i00 = (va * self.dims.width + ua) * c;
        let i01 = (va * self.dims.width + ub) * c;
        let i10 = (vb * self.dims.width + ua) * c;
        let i11 = (vb * self.dims.width + ub) * c;
        let (fu, fv) = (fu as f32, fv as f32);
        for (k, o) in out.iter_mut().enumerate().take(c) {
            let top = self.data[i00 + k] * (1.0 - fu) + self.data[i01 + k] * fu;
            let bot = self.data[i10 + k] * (1.0 - fu) + self.data[i11 + k] * fu;
            *o = top * (1.0 - fv) + bot * fv;
        }
    }

    /// 2x2 box average; odd heights drop the last row.
    pub fn half_size(&self) -> EquirectImage {
        let dims = Dims::from_height((self.dims.height / 2).max(1));
        let c = self.channels;
        let mut data = vec![0.0f32; dims.len() * c];
        for v in 0..dims.height {
            for u in 0..dims.width {
                for k in 0..c {
                    let s = self.get(2 * u, 2 * v, k)
                        + self.get(2 * u + 1, 2 * v, k)
                        + self.get(2 * u, (2 * v + 1).min(self.dims.height - 1), k)
                        + self.get(2 * u + 1, (2 * v + 1).min(self.dims.height - 1), k);
                    data[(v * dims.width + u) * c + k] = 0.25 * s;
                }
            }
        }
        Self {
            dims,
            channels: c,
            data,
        }
    }

    pub fn sample_gray(&self, u: f64, v: f64) -> f32 {
        let mut px = [0.0f32; 3];
        self.sample(u, v, &mut px);
        if self.channels == 1 {
            px[0]
        } else {
            0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?;
        Self::from_dynamic(img)
    }

    pub fn from_dynamic(img: DynamicImage) -> Result<Self> {
        let gray = matches!(img, DynamicImage::ImageLuma8(_) | DynamicImage::ImageLuma16(_));
        if gray {
            let g = img.to_luma8();
            let data = g.as_raw().iter().map(|&x| x as f32 / 255.0).collect();
            Self::new(g.width() as usize, g.height() as usize, 1, data)
        } else {
            let rgb = img.to_rgb8();
            let data = rgb.as_raw().iter().map(|&x| x as f32 / 255.0).collect();
            Self::new(rgb.width() as usize, rgb.height() as usize, 3, data)
        }
    }

    pub fn to_dynamic(&self) -> DynamicImage {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let (w, h) = (self.dims.width as u32, self.dims.height as u32);
        if self.channels == 1 {
            DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, bytes).expect("gray buffer"))
        } else {
            DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, bytes).expect("rgb buffer"))
        }
    }

    /// Writes 8-bit PNG, PPM or PGM depending on the extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        let img = match (ext.as_deref(), self.channels) {
            // PGM holds gray only, PPM holds RGB only.
            (Some("pgm"), 3) => self.to_gray().to_dynamic(),
            (Some("ppm"), 1) => DynamicImage::ImageRgb8(self.to_dynamic().to_rgb8()),
            _ => self.to_dynamic(),
        };
        img.save(path)?;
        Ok(())
    }
}

fn split(x: f64) -> (isize, f64) {
    let f = x.floor();
    let mut frac = x - f;
    let mut base = f as isize;
    // Snap sub-ulp residues so exact pixel-center lookups return stored values.
    if frac < 1e-9 {
        frac = 0.0;
    } else if frac > 1.0 - 1e-9 {
        frac = 0.0;
        base += 1;
    }
    (base, frac)
}

/// Resamples `img` so that content seen along direction `d` appears along `r * d`.
///
/// Output pixel `(u, v)` is read from the input at `pixel_from_dir(r^-1 dir_from_pixel(u, v))`.
pub fn rotate_equirect(img: &EquirectImage, r: &Rotation3) -> EquirectImage {
    let dims = img.dims();
    let inv = r.inverse();
    let c = img.channels();
    let mut data = vec![0.0f32; dims.len() * c];
    data.par_chunks_mut(dims.width * c).enumerate().for_each(|(v, row)| {
        for u in 0..dims.width {
            let d = dir_from_pixel(u as f64, v as f64, dims);
            let (su, sv) = pixel_from_vec(&inv.apply_vec(&d.vector()), dims);
            img.sample(su, sv, &mut row[u * c..(u + 1) * c]);
        }
    });
    EquirectImage {
        dims,
        channels: c,
        data,
    }
}

/// Rotates the sphere so the forward axis lands on the north pole.
pub fn reproject_to_top_view(img: &EquirectImage) -> EquirectImage {
    rotate_equirect(img, &top_view_rotation())
}

/// Inverse of [`reproject_to_top_view`].
pub fn reproject_from_top_view(img: &EquirectImage) -> EquirectImage {
    rotate_equirect(img, &top_view_rotation().inverse())
}

/// Peak signal-to-noise ratio (peak 1.0) restricted to rows with `|latitude| < max_lat`.
pub fn psnr_band(a: &EquirectImage, b: &EquirectImage, max_lat: f64) -> f64 {
    assert_eq!(a.dims(), b.dims());
    assert_eq!(a.channels(), b.channels());
    let dims = a.dims();
    let c = a.channels();
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for v in 0..dims.height {
        if dims.row_latitude(v).abs() >= max_lat {
            continue;
        }
        let start = v * dims.width * c;
        let end = start + dims.width * c;
        for (x, y) in a.data[start..end].iter().zip(&b.data[start..end]) {
            let e = (*x - *y) as f64;
            sum += e * e;
        }
        count += dims.width * c;
    }
    let mse = sum / count.max(1) as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Solid-angle weighted mean intensity over rows with `|latitude| < max_lat`.
pub fn mean_intensity_band(img: &EquirectImage, max_lat: f64) -> f64 {
    let dims = img.dims();
    let c = img.channels();
    let mut sum = 0.0;
    let mut weight = 0.0;
    for v in 0..dims.height {
        let lat = dims.row_latitude(v);
        if lat.abs() >= max_lat {
            continue;
        }
        let w = lat.cos();
        let start = v * dims.width * c;
        let row: f64 = img.data[start..start + dims.width * c].iter().map(|&x| x as f64).sum();
        sum += w * row;
        weight += w * (dims.width * c) as f64;
    }
    sum / weight
}
