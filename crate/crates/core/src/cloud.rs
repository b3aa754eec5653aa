//! Point clouds from depth maps, constant-speed accumulation and ICP.
//!
//! Exported coordinates use `(r sin(theta) cos(phi), r sin(phi), -r cos(theta) cos(phi))`,
//! so the camera's forward axis is `-z` in the cloud.

use std::collections::HashMap;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Direction3, Rotation3};
use crate::image::EquirectImage;
use crate::stereo::DepthMap;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    /// RGB in `[0, 1]`, one per point when present.
    pub colors: Option<Vec<[f32; 3]>>,
    /// Index of the capture each point came from.
    pub capture_index: Vec<u32>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn from_points(points: Vec<Vector3<f64>>) -> Self {
        let n = points.len();
        Self {
            points,
            colors: None,
            capture_index: vec![0; n],
        }
    }

    pub fn transformed(&self, t: &RigidTransform) -> Self {
        Self {
            points: self.points.iter().map(|p| t.apply(p)).collect(),
            colors: self.colors.clone(),
            capture_index: self.capture_index.clone(),
        }
    }
}

/// Maps viewing-convention coordinates (`+z` forward) to export coordinates.
pub fn to_export_frame(v: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(v.x, v.y, -v.z)
}

/// Export-frame point for longitude `theta`, latitude `phi` and range `r`.
pub fn export_point(theta: f64, phi: f64, r: f64) -> Vector3<f64> {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    Vector3::new(r * st * cp, r * sp, -r * ct * cp)
}

/// Converts valid depths on a `stride` grid with range `<= max_range`.
pub fn depth_to_points(
    depth: &DepthMap,
    color: Option<&EquirectImage>,
    stride: usize,
    max_range: f64,
) -> Result<PointCloud> {
    let dims = depth.dims();
    if let Some(c) = color {
        if c.dims() != dims {
            return Err(Error::mismatch((dims.width, dims.height), (c.width(), c.height())));
        }
    }
    let stride = stride.max(1);
    type Row = (Vec<Vector3<f64>>, Vec<[f32; 3]>);
    let rows: Vec<Row> = (0..dims.height)
        .step_by(stride)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&v| {
            let phi = dims.row_latitude(v);
            let mut pts = Vec::new();
            let mut cols = Vec::new();
            for u in (0..dims.width).step_by(stride) {
                let Some(r) = depth.get(u, v) else { continue };
                if r > max_range {
                    continue;
                }
                pts.push(export_point(dims.col_longitude(u), phi, r));
                if let Some(c) = color {
                    let rgb = if c.channels() == 3 {
                        [c.get(u, v, 0), c.get(u, v, 1), c.get(u, v, 2)]
                    } else {
                        let g = c.get(u, v, 0);
                        [g, g, g]
                    };
                    cols.push(rgb.map(|x| x.clamp(0.0, 1.0)));
                }
            }
            (pts, cols)
        })
        .collect();
    let mut points = Vec::new();
    let mut colors = Vec::new();
    for (p, c) in rows {
        points.extend(p);
        colors.extend(c);
    }
    let n = points.len();
    Ok(PointCloud {
        points,
        colors: color.map(|_| colors),
        capture_index: vec![0; n],
    })
}

/// Places capture `k` at `k * speed * interval` along `motion_axis` and merges.
///
/// `motion_axis` uses the viewing convention (`+z` forward); offsets are
/// applied in export coordinates.
pub fn accumulate(
    clouds: &[PointCloud],
    speed_mps: f64,
    capture_interval_s: f64,
    motion_axis: &Direction3,
) -> PointCloud {
    let axis = to_export_frame(&motion_axis.vector());
    let with_color = !clouds.is_empty() && clouds.iter().all(|c| c.colors.is_some());
    let mut out = PointCloud::default();
    let mut colors = Vec::new();
    for (k, c) in clouds.iter().enumerate() {
        let offset = axis * (k as f64 * speed_mps * capture_interval_s);
        out.points.extend(c.points.iter().map(|p| p + offset));
        out.capture_index.extend(std::iter::repeat_n(k as u32, c.len()));
        if with_color {
            colors.extend_from_slice(c.colors.as_ref().expect("checked"));
        }
    }
    if with_color {
        out.colors = Some(colors);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Rotation3,
    pub translation: [f64; 3],
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Rotation3::identity(),
            translation: [0.0; 3],
        }
    }

    pub fn new(rotation: Rotation3, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation: translation.into(),
        }
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.apply_vec(p) + self.translation()
    }

    /// `self` after `other`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform::new(
            self.rotation * other.rotation,
            self.rotation.apply_vec(&other.translation()) + self.translation(),
        )
    }

    pub fn inverse(&self) -> RigidTransform {
        let r = self.rotation.inverse();
        RigidTransform::new(r, -r.apply_vec(&self.translation()))
    }
}

/// Closed-form rigid fit `dst ~ R src + t` (SVD Procrustes).
pub fn procrustes(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> RigidTransform {
    assert_eq!(src.len(), dst.len());
    let n = src.len().max(1) as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (d - cd) * (s - cs).transpose();
    }
    let r = Rotation3::nearest(&h);
    RigidTransform::new(r, cd - r.apply_vec(&cs))
}

/// Uniform voxel grid for nearest-neighbour queries.
pub struct SpatialGrid<'a> {
    points: &'a [Vector3<f64>],
    cell: f64,
    cells: HashMap<[i64; 3], Vec<u32>>,
}

impl<'a> SpatialGrid<'a> {
    /// Rings searched before falling back to a linear scan.
    const MAX_RING: i64 = 6;

    pub fn new(points: &'a [Vector3<f64>], cell: f64) -> Self {
        let mut cells: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key_of(p, cell)).or_default().push(i as u32);
        }
        Self { points, cell, cells }
    }

    fn key_of(p: &Vector3<f64>, cell: f64) -> [i64; 3] {
        [
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        ]
    }

    /// Index and squared distance of the nearest stored point.
    pub fn nearest(&self, q: &Vector3<f64>) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let k = Self::key_of(q, self.cell);
        let mut best: Option<(usize, f64)> = None;
        for ring in 0..=Self::MAX_RING {
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        if let Some(ids) = self.cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                            for &i in ids {
                                let d = (self.points[i as usize] - q).norm_squared();
                                if best.is_none_or(|(_, b)| d < b) {
                                    best = Some((i as usize, d));
                                }
                            }
                        }
                    }
                }
            }
            // Cells outside the searched rings are at least `ring * cell` away.
            if let Some((_, b)) = best {
                let reach = ring as f64 * self.cell;
                if b <= reach * reach {
                    return best;
                }
            }
        }
        self.points
            .iter()
            .enumerate()
            .map(|(i, p)| (i, (p - q).norm_squared()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct IcpParams {
    pub max_iter: usize,
    /// Stop when the RMS improves by less than this (meters).
    pub tol: f64,
    /// Final RMS above this marks the result as not converged (meters).
    pub max_rms: f64,
    /// Grid cell size; zero picks one from the target extent.
    pub cell: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-9,
            max_rms: 0.5,
            cell: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IcpResult {
    /// Maps source points onto the target.
    pub transform: RigidTransform,
    pub converged: bool,
    /// Matched-pair RMS before each solve, then the final RMS.
    pub rms_history: Vec<f64>,
}

fn auto_cell(points: &[Vector3<f64>]) -> f64 {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let ext = hi - lo;
    let vol = ext.iter().map(|e| e.max(1e-3)).product::<f64>();
    (vol / points.len().max(1) as f64 * 8.0).cbrt().max(1e-3)
}

/// Point-to-point ICP of `source` onto `target`.
pub fn icp_register(source: &PointCloud, target: &PointCloud, params: &IcpParams) -> Result<IcpResult> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::InvalidConfig("ICP needs two non-empty clouds".into()));
    }
    let cell = if params.cell > 0.0 {
        params.cell
    } else {
        auto_cell(&target.points)
    };
    let grid = SpatialGrid::new(&target.points, cell);
    let mut total = RigidTransform::identity();
    let mut history = Vec::new();
    let mut converged = false;
    let match_all = |t: &RigidTransform| -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>, f64) {
        let pairs: Vec<(Vector3<f64>, Vector3<f64>, f64)> = source
            .points
            .par_iter()
            .map(|p| {
                let q = t.apply(p);
                let (i, d) = grid.nearest(&q).expect("non-empty target");
                (q, target.points[i], d)
            })
            .collect();
        let rms = (pairs.iter().map(|x| x.2).sum::<f64>() / pairs.len() as f64).sqrt();
        let (src, dst) = pairs.into_iter().map(|(q, t, _)| (q, t)).unzip();
        (src, dst, rms)
    };
    for _ in 0..params.max_iter {
        let (src, dst, rms) = match_all(&total);
        if let Some(&prev) = history.last() {
            if prev - rms < params.tol {
                history.push(rms);
                converged = true;
                break;
            }
        }
        history.push(rms);
        let step = procrustes(&src, &dst);
        total = step.compose(&total);
    }
    if !converged {
        let (_, _, rms) = match_all(&total);
        history.push(rms);
    }
    let final_rms = *history.last().expect("non-empty");
    Ok(IcpResult {
        transform: total,
        converged: converged && final_rms <= params.max_rms,
        rms_history: history,
    })
}

/// Least-squares plane `(unit normal, offset)` and RMS point distance.
pub fn fit_plane(points: &[Vector3<f64>]) -> Option<(Vector3<f64>, f64, f64)> {
    if points.len() < 3 {
        return None;
    }
    let n = points.len() as f64;
    let c = points.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let k = eig.eigenvalues.imin();
    let normal: Vector3<f64> = eig.eigenvectors.column(k).into();
    let offset = normal.dot(&c);
    let rms = (points.iter().map(|p| (normal.dot(p) - offset).powi(2)).sum::<f64>() / n).sqrt();
    Some((normal, offset, rms))
}
