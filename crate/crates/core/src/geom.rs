//! Spherical coordinate conventions and rotations.
//!
//! Camera frame: `y` up, `z` forward, `x` right. A unit bearing at longitude
//! `theta` and latitude `phi` is `(cos phi sin theta, sin phi, cos phi cos theta)`.
//!
//! Equirectangular pixel centers sit at half-integer offsets:
//! `theta = ((u + 0.5) / width) 2 pi - pi` and `phi = pi/2 - ((v + 0.5) / height) pi`.
//! Continuous pixel coordinates returned by [`pixel_from_dir`] use the same
//! convention, so integer `(u, v)` is a pixel center.

use std::f64::consts::{FRAC_PI_2, PI};
use std::ops::Mul;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const UNIT_TOL: f64 = 1e-6;

/// Width and height of an equirectangular grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub width: usize,
    pub height: usize,
}

impl Dims {
    /// Full-sphere dims require `width == 2 * height`.
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if height == 0 || width != 2 * height {
            return Err(Error::InvalidDims { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn from_height(height: usize) -> Self {
        Self {
            width: 2 * height,
            height,
        }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Latitude of the center of row `v`.
    pub fn row_latitude(&self, v: usize) -> f64 {
        FRAC_PI_2 - ((v as f64 + 0.5) / self.height as f64) * PI
    }

    /// Longitude of the center of column `u`.
    pub fn col_longitude(&self, u: usize) -> f64 {
        ((u as f64 + 0.5) / self.width as f64) * 2.0 * PI - PI
    }

    /// Radians per pixel along either axis.
    pub fn pixel_angle(&self) -> f64 {
        PI / self.height as f64
    }
}

/// Unit bearing vector in the camera frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Direction3(Vector3<f64>);

impl Direction3 {
    pub const FORWARD: Direction3 = Direction3(Vector3::new(0.0, 0.0, 1.0));
    pub const UP: Direction3 = Direction3(Vector3::new(0.0, 1.0, 0.0));
    pub const RIGHT: Direction3 = Direction3(Vector3::new(1.0, 0.0, 0.0));

    /// Normalizes `v`; fails on zero or non-finite input.
    pub fn normalize(v: Vector3<f64>) -> Result<Self> {
        let n = v.norm();
        if !n.is_finite() || n < 1e-300 {
            return Err(Error::NonUnitDirection(n));
        }
        Ok(Self(v / n))
    }

    /// Accepts `v` only if it is already unit length.
    pub fn from_unit(v: Vector3<f64>) -> Result<Self> {
        let n = v.norm();
        if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::NonUnitDirection(n));
        }
        Ok(Self(v / n))
    }

    pub(crate) fn new_unchecked(v: Vector3<f64>) -> Self {
        Self(v)
    }

    pub fn x(&self) -> f64 {
        self.0.x
    }
    pub fn y(&self) -> f64 {
        self.0.y
    }
    pub fn z(&self) -> f64 {
        self.0.z
    }

    pub fn vector(&self) -> Vector3<f64> {
        self.0
    }

    /// Great-circle angle to `other` in radians.
    pub fn angle_to(&self, other: &Direction3) -> f64 {
        // atan2 form stays accurate for tiny and near-antipodal angles.
        let c = self.0.cross(&other.0).norm();
        let d = self.0.dot(&other.0);
        c.atan2(d)
    }
}

impl std::ops::Neg for Direction3 {
    type Output = Direction3;
    fn neg(self) -> Direction3 {
        Direction3(-self.0)
    }
}

/// Pitch (about x), yaw (about y) and roll (about z), in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EulerAngles {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl EulerAngles {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self {
            alpha: wrap_angle(alpha),
            beta: wrap_angle(beta),
            gamma: wrap_angle(gamma),
        }
    }

    pub fn from_degrees(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self::new(alpha.to_radians(), beta.to_radians(), gamma.to_radians())
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn to_degrees(&self) -> [f64; 3] {
        [self.alpha.to_degrees(), self.beta.to_degrees(), self.gamma.to_degrees()]
    }

    pub fn is_zero(&self) -> bool {
        self.alpha == 0.0 && self.beta == 0.0 && self.gamma == 0.0
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    if !a.is_finite() {
        return a;
    }
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Proper rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation3(Matrix3<f64>);

impl Rotation3 {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Accepts `m` if it is orthonormal with determinant +1 (within 1e-6).
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let ortho = (m.transpose() * m - Matrix3::identity()).amax();
        let det = m.determinant();
        if !ortho.is_finite() || ortho > 1e-6 || (det - 1.0).abs() > 1e-6 {
            return Err(Error::NotARotation);
        }
        Ok(Self(m))
    }

    /// Closest rotation to `m` in the Frobenius sense.
    pub fn nearest(m: &Matrix3<f64>) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.expect("svd u");
        let v_t = svd.v_t.expect("svd v_t");
        let mut d = Matrix3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Self(u * d * v_t)
    }

    pub fn about_x(a: f64) -> Self {
        let (s, c) = a.sin_cos();
        Self(Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c))
    }

    pub fn about_y(b: f64) -> Self {
        let (s, c) = b.sin_cos();
        Self(Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c))
    }

    pub fn about_z(g: f64) -> Self {
        let (s, c) = g.sin_cos();
        Self(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    /// Rotation by `angle` about the unit `axis` (Rodrigues).
    pub fn from_axis_angle(axis: &Direction3, angle: f64) -> Self {
        let k = skew(&axis.vector());
        let (s, c) = angle.sin_cos();
        Self(Matrix3::identity() + k * s + k * k * (1.0 - c))
    }

    /// Rotation vector exponential; `w` is axis times angle.
    pub fn exp(w: &Vector3<f64>) -> Self {
        let angle = w.norm();
        if angle < 1e-12 {
            return Self::nearest(&(Matrix3::identity() + skew(w)));
        }
        Self::from_axis_angle(&Direction3::new_unchecked(w / angle), angle)
    }

    /// Smallest rotation taking `from` onto `to`.
    pub fn between(from: &Direction3, to: &Direction3) -> Self {
        let a = from.vector();
        let b = to.vector();
        let axis = a.cross(&b);
        let s = axis.norm();
        let c = a.dot(&b);
        if s < 1e-15 {
            if c > 0.0 {
                return Self::identity();
            }
            // Antipodal: any perpendicular axis works.
            let helper = if a.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
            let perp = a.cross(&helper).normalize();
            return Self::from_axis_angle(&Direction3::new_unchecked(perp), PI);
        }
        Self::from_axis_angle(&Direction3::new_unchecked(axis / s), s.atan2(c))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn apply(&self, d: &Direction3) -> Direction3 {
        Direction3(self.0 * d.0)
    }

    pub fn apply_vec(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        let tr = self.0.trace();
        let w = Vector3::new(
            self.0[(2, 1)] - self.0[(1, 2)],
            self.0[(0, 2)] - self.0[(2, 0)],
            self.0[(1, 0)] - self.0[(0, 1)],
        );
        (0.5 * w.norm()).atan2(0.5 * (tr - 1.0))
    }

    /// Geodesic distance to `other` in radians.
    pub fn angle_to(&self, other: &Rotation3) -> f64 {
        (self.inverse() * *other).angle()
    }

    /// Inverse of [`rotation_from_euler`] (`R = Rz(gamma) Ry(beta) Rx(alpha)`).
    pub fn to_euler(&self) -> EulerAngles {
        let m = &self.0;
        let beta = (-m[(2, 0)]).clamp(-1.0, 1.0).asin();
        let alpha = m[(2, 1)].atan2(m[(2, 2)]);
        let gamma = m[(1, 0)].atan2(m[(0, 0)]);
        EulerAngles::new(alpha, beta, gamma)
    }

    /// Largest deviation of `m^T m` from identity, plus `|det - 1|`.
    pub fn orthonormality_error(&self) -> f64 {
        let e = (self.0.transpose() * self.0 - Matrix3::identity()).amax();
        e.max((self.0.determinant() - 1.0).abs())
    }
}

impl Mul for Rotation3 {
    type Output = Rotation3;
    fn mul(self, rhs: Rotation3) -> Rotation3 {
        Rotation3(self.0 * rhs.0)
    }
}

pub(crate) fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Exact composite `Rz(gamma) Ry(beta) Rx(alpha)`: rotate about x, then y, then z.
pub fn rotation_from_euler(e: &EulerAngles) -> Rotation3 {
    Rotation3::about_z(e.gamma) * Rotation3::about_y(e.beta) * Rotation3::about_x(e.alpha)
}

/// First-order rotation `[[1,-g,b],[g,1,-a],[-b,a,1]]`, projected onto SO(3).
///
/// Independent of the order in which the three elementary rotations are applied.
pub fn small_angle_rotation(e: &EulerAngles) -> Rotation3 {
    let largest = e.alpha.abs().max(e.beta.abs()).max(e.gamma.abs());
    if largest > 0.1 {
        log::warn!("small-angle rotation used with {largest:.3} rad; error grows quadratically");
    }
    Rotation3::nearest(&small_angle_matrix(e))
}

/// The raw (non-orthogonal) first-order matrix.
pub fn small_angle_matrix(e: &EulerAngles) -> Matrix3<f64> {
    Matrix3::new(
        1.0, -e.gamma, e.beta, //
        e.gamma, 1.0, -e.alpha, //
        -e.beta, e.alpha, 1.0,
    )
}

pub fn dir_from_latlon(theta: f64, phi: f64) -> Direction3 {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    Direction3(Vector3::new(cp * st, sp, cp * ct))
}

/// Longitude in `[-pi, pi)` and latitude in `[-pi/2, pi/2]`; `theta = 0` at the poles.
pub fn latlon_from_dir(d: &Direction3) -> Result<(f64, f64)> {
    let v = d.vector();
    let n = v.norm();
    if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::NonUnitDirection(n));
    }
    Ok(latlon_unchecked(&v))
}

pub(crate) fn latlon_unchecked(v: &Vector3<f64>) -> (f64, f64) {
    let horiz = v.x.hypot(v.z);
    let phi = v.y.atan2(horiz);
    let mut theta = if horiz < 1e-15 { 0.0 } else { v.x.atan2(v.z) };
    if theta >= PI {
        theta -= 2.0 * PI;
    }
    (theta, phi)
}

/// Continuous pixel coordinates of `d`; integer values are pixel centers.
pub fn pixel_from_dir(d: &Direction3, dims: Dims) -> (f64, f64) {
    pixel_from_vec(&d.vector(), dims)
}

pub(crate) fn pixel_from_vec(v: &Vector3<f64>, dims: Dims) -> (f64, f64) {
    let (theta, phi) = latlon_unchecked(v);
    pixel_from_latlon(theta, phi, dims)
}

pub fn pixel_from_latlon(theta: f64, phi: f64, dims: Dims) -> (f64, f64) {
    let u = (theta + PI) / (2.0 * PI) * dims.width as f64 - 0.5;
    let v = (FRAC_PI_2 - phi) / PI * dims.height as f64 - 0.5;
    (u, v)
}

pub fn latlon_from_pixel(u: f64, v: f64, dims: Dims) -> (f64, f64) {
    let theta = (u + 0.5) / dims.width as f64 * 2.0 * PI - PI;
    let phi = FRAC_PI_2 - (v + 0.5) / dims.height as f64 * PI;
    (theta, phi)
}

pub fn dir_from_pixel(u: f64, v: f64, dims: Dims) -> Direction3 {
    let (theta, phi) = latlon_from_pixel(u, v, dims);
    dir_from_latlon(theta, phi)
}

/// Fixed rotation that sends the forward axis (+z) to the north pole (+y).
///
/// This is `Rx(-pi/2)` in the right-handed convention above.
pub fn top_view_rotation() -> Rotation3 {
    Rotation3::about_x(-FRAC_PI_2)
}
