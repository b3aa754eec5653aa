//! Vertical-baseline spherical stereo.
//!
//! With the upper camera directly above the lower one, every scene point lies
//! on the same meridian in both views and only its latitude differs. The lower
//! image is the matching reference; disparities and depths live in its frame.

mod matcher;

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{dir_from_pixel, pixel_from_vec, rotation_from_euler, Dims, EulerAngles, Rotation3};
use crate::image::{rotate_equirect, EquirectImage};

pub use matcher::{block_match, epipolar_transpose, epipolar_untranspose, EpipolarGrid};

/// How apparent (equator-model) depth is corrected for the latitude of a pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatitudeModel {
    /// Exact triangulation for a vertical baseline:
    /// `D_real = D_apparent cos(phi) + d sin(phi)`.
    #[default]
    Exact,
    /// First-order inscribed-circle form `D_real = D_apparent / cos(phi)`.
    InverseCosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StereoConfig {
    /// Camera separation `d`, meters.
    pub baseline_m: f64,
    pub num_disparities: usize,
    /// Odd block side in pixels.
    pub block_size: usize,
    /// Minimum intensity variance of a reference block.
    pub min_valid_texture: f32,
    /// Required ratio of runner-up to best matching cost.
    pub uniqueness_ratio: f32,
    /// Depth cap for vanishing disparity, meters.
    pub max_depth_m: f64,
    pub latitude_model: LatitudeModel,
}

impl Default for StereoConfig {
    fn default() -> Self {
        Self {
            baseline_m: 0.2,
            num_disparities: 96,
            block_size: 15,
            min_valid_texture: 2e-4,
            uniqueness_ratio: 1.05,
            max_depth_m: 1e4,
            latitude_model: LatitudeModel::Exact,
        }
    }
}

impl StereoConfig {
    pub fn with_baseline(baseline_m: f64) -> Self {
        Self {
            baseline_m,
            ..Self::default()
        }
    }

    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.baseline_m > 0.0 && self.baseline_m.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "baseline must be positive, got {}",
                self.baseline_m
            )));
        }
        if self.num_disparities < 16 || !self.num_disparities.is_multiple_of(16) {
            return Err(Error::InvalidConfig(format!(
                "num_disparities must be a multiple of 16 and >= 16, got {}",
                self.num_disparities
            )));
        }
        if self.block_size < 5 || self.block_size.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "block_size must be odd and >= 5, got {}",
                self.block_size
            )));
        }
        if !(self.uniqueness_ratio >= 1.0) || !(self.min_valid_texture >= 0.0) {
            return Err(Error::InvalidConfig(
                "uniqueness_ratio must be >= 1 and min_valid_texture >= 0".into(),
            ));
        }
        if !(self.max_depth_m > 0.0) {
            return Err(Error::InvalidConfig("max_depth_m must be positive".into()));
        }
        Ok(())
    }
}

/// Per-pixel scalar on an equirect grid with a negative INVALID sentinel.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    dims: Dims,
    values: Vec<f32>,
}

impl ScalarMap {
    pub const INVALID: f32 = -1.0;

    fn new(dims: Dims, values: Vec<f32>) -> Result<Self> {
        if values.len() != dims.len() {
            return Err(Error::InvalidConfig(format!(
                "map has {} values, expected {}",
                values.len(),
                dims.len()
            )));
        }
        Ok(Self { dims, values })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// Raw values; INVALID entries are negative.
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, u: usize, v: usize) -> Option<f64> {
        let x = self.values[v * self.dims.width + u];
        (x >= 0.0 && x.is_finite()).then_some(x as f64)
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|&&x| x >= 0.0 && x.is_finite()).count()
    }

    /// Fraction of the full sphere's solid angle covered by valid pixels.
    pub fn solid_angle_coverage(&self) -> f64 {
        let mut covered = 0.0;
        let mut total = 0.0;
        for v in 0..self.dims.height {
            let w = self.dims.row_latitude(v).cos();
            let row = &self.values[v * self.dims.width..(v + 1) * self.dims.width];
            covered += w * row.iter().filter(|&&x| x >= 0.0 && x.is_finite()).count() as f64;
            total += w * self.dims.width as f64;
        }
        covered / total
    }

    fn map_valid(&self, f: impl Fn(usize, usize, f64) -> Option<f64> + Sync) -> Vec<f32> {
        let w = self.dims.width;
        let mut out = vec![Self::INVALID; self.values.len()];
        out.par_chunks_mut(w).enumerate().for_each(|(v, row)| {
            for (u, o) in row.iter_mut().enumerate() {
                if let Some(x) = self.get(u, v) {
                    if let Some(y) = f(u, v, x) {
                        if y.is_finite() && y >= 0.0 {
                            *o = y as f32;
                        }
                    }
                }
            }
        });
        out
    }

    /// Resamples under a sphere rotation (content along `d` moves to `r d`).
    ///
    /// Bilinear where all four neighbors are valid and agree within 5%,
    /// nearest neighbor otherwise, so depth edges are not blended.
    pub fn rotated(&self, r: &Rotation3) -> Self {
        let dims = self.dims;
        let inv = r.inverse();
        let w = dims.width as isize;
        let h = dims.height as isize;
        let mut out = vec![Self::INVALID; self.values.len()];
        out.par_chunks_mut(dims.width).enumerate().for_each(|(v, row)| {
            for (u, o) in row.iter_mut().enumerate() {
                let d = dir_from_pixel(u as f64, v as f64, dims);
                let (su, sv) = pixel_from_vec(&inv.apply_vec(&d.vector()), dims);
                let sv = sv.clamp(0.0, (h - 1) as f64);
                let (u0, v0) = (su.floor() as isize, sv.floor() as isize);
                let (fu, fv) = (su - u0 as f64, sv - v0 as f64);
                let fetch = |uu: isize, vv: isize| {
                    let i = (vv.clamp(0, h - 1) * w + uu.rem_euclid(w)) as usize;
                    self.values[i]
                };
                let q = [
                    fetch(u0, v0),
                    fetch(u0 + 1, v0),
                    fetch(u0, v0 + 1),
                    fetch(u0 + 1, v0 + 1),
                ];
                let all_valid = q.iter().all(|&x| x >= 0.0);
                let lo = q.iter().copied().fold(f32::INFINITY, f32::min);
                let hi = q.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                *o = if all_valid && hi <= lo * 1.05 {
                    let top = q[0] as f64 * (1.0 - fu) + q[1] as f64 * fu;
                    let bot = q[2] as f64 * (1.0 - fu) + q[3] as f64 * fu;
                    (top * (1.0 - fv) + bot * fv) as f32
                } else {
                    fetch(su.round() as isize, sv.round() as isize)
                };
            }
        });
        Self { dims, values: out }
    }
}

macro_rules! scalar_newtype {
    ($name:ident) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name(ScalarMap);

        impl $name {
            pub const INVALID: f32 = ScalarMap::INVALID;

            pub fn from_values(dims: Dims, values: Vec<f32>) -> Result<Self> {
                ScalarMap::new(dims, values).map(Self)
            }

            pub fn invalid(dims: Dims) -> Self {
                Self(ScalarMap {
                    dims,
                    values: vec![ScalarMap::INVALID; dims.len()],
                })
            }

            pub fn rotated(&self, r: &Rotation3) -> Self {
                Self(self.0.rotated(r))
            }

            pub fn into_inner(self) -> ScalarMap {
                self.0
            }
        }

        impl std::ops::Deref for $name {
            type Target = ScalarMap;
            fn deref(&self) -> &ScalarMap {
                &self.0
            }
        }
    };
}

scalar_newtype!(DisparityMap);
scalar_newtype!(DepthMap);

impl DepthMap {
    /// Multiplies every valid depth by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        Self(ScalarMap {
            dims: self.dims(),
            values: self.map_valid(|_, _, x| Some(x * k)),
        })
    }
}

/// Distance for an `n`-pixel meridian parallax: `d / tan(n pi / R_vertical)`.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn depth_from_disparity(n: f64, baseline_m: f64, r_vertical: f64) -> Option<f64> {
    if !(n > 0.0) {
        return None;
    }
    let angle = n * PI / r_vertical;
    if angle >= PI / 2.0 {
        return None;
    }
    Some(baseline_m / angle.tan())
}

/// Small-angle form `d R_vertical / (pi n)`.
pub fn depth_from_disparity_approx(n: f64, baseline_m: f64, r_vertical: f64) -> f64 {
    baseline_m * r_vertical / (PI * n)
}

/// Apparent depth per pixel; zero or INVALID disparity gives INVALID, and
/// depths are capped at `cfg.max_depth_m`.
pub fn disparity_to_depth(disp: &DisparityMap, cfg: &StereoConfig, r_vertical: usize) -> DepthMap {
    let r = r_vertical as f64;
    DepthMap(ScalarMap {
        dims: disp.dims(),
        values: disp.map_valid(|_, _, n| depth_from_disparity(n, cfg.baseline_m, r).map(|d| d.min(cfg.max_depth_m))),
    })
}

/// Latitude correction factor for the inverse-cosine model.
pub fn inverse_cosine_factor(phi: f64) -> f64 {
    1.0 / phi.cos()
}

/// Real depth from apparent depth at latitude `phi` for baseline `d`.
pub fn rectify_depth(apparent: f64, phi: f64, baseline_m: f64, model: LatitudeModel) -> f64 {
    match model {
        LatitudeModel::Exact => apparent * phi.cos() + baseline_m * phi.sin(),
        LatitudeModel::InverseCosine => apparent * inverse_cosine_factor(phi),
    }
}

/// Rows at or beyond this latitude are INVALID after rectification.
pub const RECTIFY_MAX_LATITUDE_DEG: f64 = 89.0;

/// Converts apparent depth to real depth using each row's latitude.
pub fn rectify_latitude(depth: &DepthMap, cfg: &StereoConfig) -> DepthMap {
    let dims = depth.dims();
    let limit = RECTIFY_MAX_LATITUDE_DEG.to_radians();
    DepthMap(ScalarMap {
        dims,
        values: depth.map_valid(|_, v, x| {
            let phi = dims.row_latitude(v);
            if phi.abs() >= limit {
                return None;
            }
            let d = rectify_depth(x, phi, cfg.baseline_m, cfg.latitude_model);
            (d > 0.0).then_some(d)
        }),
    })
}

/// Fraction of the sphere outside two polar blind caps of half-angle `psi`:
/// `1 - (1 - cos psi)`.
pub fn coverage_ratio(psi: f64) -> f64 {
    1.0 - blind_fraction(psi)
}

/// Solid-angle fraction of the two blind caps, `1 - cos psi`.
pub fn blind_fraction(psi: f64) -> f64 {
    1.0 - psi.cos()
}

/// Rotation that undoes an upper-camera orientation error `alignment`.
pub fn alignment_correction(alignment: &EulerAngles) -> Rotation3 {
    rotation_from_euler(alignment)
}

/// Disparity of the lower (reference) view against the aligned upper view.
pub fn binocular_disparity(
    upper: &EquirectImage,
    lower: &EquirectImage,
    cfg: &StereoConfig,
    alignment: &EulerAngles,
) -> Result<DisparityMap> {
    if upper.dims() != lower.dims() {
        return Err(Error::mismatch(
            (upper.width(), upper.height()),
            (lower.width(), lower.height()),
        ));
    }
    cfg.validate()?;
    let corrected;
    let upper = if alignment.is_zero() {
        upper
    } else {
        corrected = rotate_equirect(upper, &alignment_correction(alignment));
        &corrected
    };
    let reference = epipolar_transpose(lower);
    let target = epipolar_transpose(upper);
    block_match(&reference, &target, cfg)
}

/// Full binocular chain: align, transpose, match, triangulate, rectify.
///
/// `alignment` is the orientation of the upper camera relative to the lower
/// one as pitch/yaw/roll; the result is real depth in the lower camera frame.
pub fn binocular_depth(
    upper: &EquirectImage,
    lower: &EquirectImage,
    cfg: &StereoConfig,
    alignment: &EulerAngles,
) -> Result<DepthMap> {
    let disp = binocular_disparity(upper, lower, cfg, alignment)?;
    let apparent = disparity_to_depth(&disp, cfg, lower.height());
    Ok(rectify_latitude(&apparent, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reported_depths_for_twenty_centimeter_rig() {
        let d1 = depth_from_disparity(1.0, 0.2, 960.0).unwrap();
        let d05 = depth_from_disparity(0.5, 0.2, 960.0).unwrap();
        assert!((d1 - 61.1).abs() < 0.1, "{d1}");
        assert!((d05 - 122.2).abs() < 0.1, "{d05}");
        let d45 = depth_from_disparity(240.0, 0.2, 960.0).unwrap();
        assert!((d45 - 0.2).abs() < 1e-12);
    }

    #[test]
    fn zero_and_invalid_disparity_are_invalid() {
        let dims = Dims::from_height(4);
        let mut vals = vec![2.0f32; dims.len()];
        vals[0] = 0.0;
        vals[1] = DisparityMap::INVALID;
        let disp = DisparityMap::from_values(dims, vals).unwrap();
        let depth = disparity_to_depth(&disp, &StereoConfig::default(), 64);
        assert!(depth.get(0, 0).is_none());
        assert!(depth.get(1, 0).is_none());
        assert!(depth.get(2, 0).is_some());
    }

    #[test]
    fn depth_is_capped() {
        let dims = Dims::from_height(4);
        let disp = DisparityMap::from_values(dims, vec![1e-6; dims.len()]).unwrap();
        let depth = disparity_to_depth(&disp, &StereoConfig::default(), 960);
        assert_eq!(depth.get(0, 0), Some(1e4));
    }

    #[test]
    fn inverse_cosine_examples() {
        assert_eq!(rectify_depth(10.0, 0.0, 0.2, LatitudeModel::InverseCosine), 10.0);
        let f = inverse_cosine_factor(60f64.to_radians());
        assert!((f - 2.0).abs() < 1e-12);
    }

    #[test]
    fn exact_model_on_equator_is_identity() {
        assert_eq!(rectify_depth(10.0, 0.0, 0.2, LatitudeModel::Exact), 10.0);
    }

    #[test]
    fn exact_model_matches_triangulation() {
        // Lower camera at origin, upper at (0, d, 0); point at range r, latitude phi.
        let d = 0.3;
        for (r, phi) in [(2.0f64, 0.5f64), (7.0, -1.0), (40.0, 1.2), (1.0, -0.2)] {
            let p = (r * phi.cos(), r * phi.sin());
            let phi_u = (p.1 - d).atan2(p.0);
            let apparent = d / (phi - phi_u).tan();
            let got = rectify_depth(apparent, phi, d, LatitudeModel::Exact);
            assert!((got - r).abs() < 1e-9 * r, "{got} vs {r}");
        }
    }

    #[test]
    fn polar_rows_invalid_after_rectify() {
        let dims = Dims::from_height(180);
        let depth = DepthMap::from_values(dims, vec![5.0; dims.len()]).unwrap();
        let out = rectify_latitude(&depth, &StereoConfig::default());
        assert!(out.get(0, 0).is_none());
        assert!(out.get(0, 179).is_none());
        assert!(out.get(0, 90).is_some());
    }

    #[test]
    fn coverage_examples() {
        assert_eq!(coverage_ratio(0.0), 1.0);
        assert!((coverage_ratio(13f64.to_radians()) - 0.9744).abs() < 1e-4);
        assert!((coverage_ratio(5f64.to_radians()) - 0.99619).abs() < 1e-5);
    }

    #[test]
    fn config_validation() {
        assert!(StereoConfig::default().validate().is_ok());
        let bad = [
            StereoConfig {
                baseline_m: 0.0,
                ..Default::default()
            },
            StereoConfig {
                num_disparities: 40,
                ..Default::default()
            },
            StereoConfig {
                block_size: 4,
                ..Default::default()
            },
            StereoConfig {
                block_size: 3,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn rotated_identity_preserves_map() {
        let dims = Dims::from_height(16);
        let vals: Vec<f32> = (0..dims.len())
            .map(|i| if i % 7 == 0 { -1.0 } else { 1.0 + i as f32 })
            .collect();
        let m = DepthMap::from_values(dims, vals).unwrap();
        assert_eq!(m.rotated(&Rotation3::identity()), m);
    }

    proptest! {
        #[test]
        fn depth_strictly_decreasing(n in 0.01f64..239.0, dn in 0.001f64..1.0) {
            let a = depth_from_disparity(n, 0.2, 480.0).unwrap();
            let b = depth_from_disparity(n + dn, 0.2, 480.0).unwrap();
            prop_assert!(b < a);
        }

        #[test]
        fn small_angle_form_within_one_percent(n in 0.01f64..32.0) {
            let exact = depth_from_disparity(n, 0.2, 960.0).unwrap();
            let approx = depth_from_disparity_approx(n, 0.2, 960.0);
            prop_assert!((approx - exact).abs() / exact < 0.01);
        }

        #[test]
        fn coverage_plus_blind_is_one(psi in 0.0..std::f64::consts::FRAC_PI_2) {
            prop_assert_eq!(coverage_ratio(psi) + blind_fraction(psi), 1.0);
            prop_assert!(coverage_ratio(psi + 1e-3) < coverage_ratio(psi));
        }

        #[test]
        fn inverse_cosine_monotone_in_abs_latitude(a in 0.0f64..1.5, b in 0.0f64..1.5) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(inverse_cosine_factor(lo) <= inverse_cosine_factor(hi));
            prop_assert!(inverse_cosine_factor(-lo) <= inverse_cosine_factor(-hi));
        }

        #[test]
        fn exact_model_monotone_for_far_points(a in 0.0f64..1.5, b in 0.0f64..1.5, s in prop::bool::ANY) {
            // Decreasing in |phi| once the apparent depth dominates the baseline.
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let sign = if s { 1.0 } else { -1.0 };
            let apparent = 100.0;
            let f = |p: f64| rectify_depth(apparent, sign * p, 0.2, LatitudeModel::Exact);
            prop_assume!(hi - lo > 1e-6 && lo > 0.01);
            prop_assert!(f(hi) <= f(lo));
        }

        #[test]
        fn depth_linear_in_baseline(n in 0.1f64..90.0, phi in -1.5f64..1.5) {
            let cfg1 = StereoConfig::with_baseline(0.2);
            let a = rectify_depth(depth_from_disparity(n, 0.2, 512.0).unwrap(), phi, 0.2, cfg1.latitude_model);
            let b = rectify_depth(depth_from_disparity(n, 0.4, 512.0).unwrap(), phi, 0.4, cfg1.latitude_model);
            prop_assert!((b - 2.0 * a).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }
}
