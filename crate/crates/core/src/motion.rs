//! Moving-direction estimation from top-view flow and the monocular pipeline.
//!
//! In the top view the forward axis sits at the north pole, so flow of a
//! forward translation points straight down the image. A tilt of the motion
//! direction adds a horizontal component whose sign differs between opposite
//! windows on the top-view equator; the ratio of medians measures the tilt.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{compute_flow, FlowField};
use crate::geom::{
    dir_from_pixel, latlon_from_pixel, pixel_from_dir, top_view_rotation, wrap_angle, Dims, Direction3, EulerAngles,
    Rotation3,
};
use crate::image::{rotate_equirect, EquirectImage};
use crate::stabilize::{stabilize_pair, StabilizeParams};
use crate::stereo::{binocular_depth, DepthMap, StereoConfig};

/// Window on the top-view sphere, angles in degrees.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AngularWindow {
    pub theta_center: f64,
    pub theta_half: f64,
    pub phi_half: f64,
}

impl AngularWindow {
    pub fn new(theta_center: f64, theta_half: f64, phi_half: f64) -> Self {
        Self {
            theta_center,
            theta_half,
            phi_half,
        }
    }

    /// `theta`, `phi` in radians.
    pub fn contains(&self, theta: f64, phi: f64) -> bool {
        wrap_angle(theta - self.theta_center.to_radians()).abs() <= self.theta_half.to_radians()
            && phi.abs() <= self.phi_half.to_radians()
    }

    fn overlaps(&self, other: &AngularWindow) -> bool {
        let gap = wrap_angle((self.theta_center - other.theta_center).to_radians()).abs();
        gap < (self.theta_half + other.theta_half).to_radians()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct WindowSpec {
    pub left: AngularWindow,
    pub right: AngularWindow,
    pub front: AngularWindow,
    pub back: AngularWindow,
    /// Scale `v_x` by `cos(phi)` and `v_y` by `1 / cos(phi)` before taking medians.
    pub latitude_compensation: bool,
    pub min_vectors: usize,
    /// Denominator medians below this magnitude (pixels) are indeterminate.
    pub min_denominator_px: f64,
    /// Re-estimates on flow vectors rotated so the current estimate is on
    /// axis; zero keeps the single-shot ratio estimate.
    pub refine_passes: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            left: AngularWindow::new(-90.0, 20.0, 30.0),
            right: AngularWindow::new(90.0, 20.0, 30.0),
            front: AngularWindow::new(0.0, 20.0, 30.0),
            back: AngularWindow::new(180.0, 20.0, 30.0),
            latitude_compensation: true,
            min_vectors: 10,
            min_denominator_px: 0.05,
            refine_passes: 3,
        }
    }
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.left, self.right, self.front, self.back];
        for w in &ws {
            if !(w.theta_half > 0.0 && w.phi_half > 0.0 && w.phi_half < 90.0) {
                return Err(Error::InvalidConfig(format!("bad window extents {w:?}")));
            }
        }
        for i in 0..4 {
            for j in i + 1..4 {
                if ws[i].overlaps(&ws[j]) {
                    return Err(Error::InvalidConfig(format!("windows {i} and {j} overlap")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MotionEstimate {
    /// Unit direction of travel in the (stabilized) frame-A orientation.
    pub direction: Direction3,
    /// Angle of the travel direction below the horizontal plane (radians).
    pub downward_offset: f64,
    /// Angle of the travel direction to the left of the vertical forward plane (radians).
    pub leftward_offset: f64,
    pub ratio_side: f64,
    pub ratio_front: f64,
}

impl MotionEstimate {
    pub fn from_direction(direction: Direction3) -> Self {
        let v = direction.vector();
        Self {
            direction,
            downward_offset: (-v.y).clamp(-1.0, 1.0).asin(),
            leftward_offset: (-v.x).clamp(-1.0, 1.0).asin(),
            ratio_side: v.y / v.z,
            ratio_front: -v.x / v.z,
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Flow vector `(u, v, dx, dy)` in top-view pixels.
type Sample = (f64, f64, f64, f64);

/// Median ratio over a window pair; the second window's `v_x` is negated.
fn pair_ratio(
    samples: &[Sample],
    dims: Dims,
    w: &WindowSpec,
    first: &AngularWindow,
    second: &AngularWindow,
    name: &str,
) -> Result<(f64, f64)> {
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    let (mut n1, mut n2) = (0usize, 0usize);
    for &(u, v, dx, dy) in samples {
        let (theta, phi) = latlon_from_pixel(u, v, dims);
        let sign = if first.contains(theta, phi) {
            n1 += 1;
            1.0
        } else if second.contains(theta, phi) {
            n2 += 1;
            -1.0
        } else {
            continue;
        };
        let (cx, cy) = if w.latitude_compensation {
            (phi.cos(), 1.0 / phi.cos())
        } else {
            (1.0, 1.0)
        };
        xs.push(sign * dx * cx);
        ys.push(dy * cy);
    }
    if n1 < w.min_vectors || n2 < w.min_vectors {
        return Err(Error::IndeterminateDirection(format!(
            "{name} windows have {n1} and {n2} valid vectors, need {}",
            w.min_vectors
        )));
    }
    let num = median(xs);
    let den = median(ys);
    if den.abs() < w.min_denominator_px || !den.is_finite() {
        return Err(Error::IndeterminateDirection(format!(
            "{name} windows show no parallax (median v_y {den:.4} px)"
        )));
    }
    Ok((num / den, den))
}

fn ratio_estimate(samples: &[Sample], dims: Dims, w: &WindowSpec) -> Result<MotionEstimate> {
    let (side, den_side) = pair_ratio(samples, dims, w, &w.left, &w.right, "side")?;
    let (front, den_front) = pair_ratio(samples, dims, w, &w.front, &w.back, "front/back")?;
    if den_side.signum() != den_front.signum() {
        return Err(Error::IndeterminateDirection(
            "side and front/back windows disagree on the direction of travel".into(),
        ));
    }
    // Top-view motion is proportional to (-front, 1, -side); undo the top-view rotation.
    let v = nalgebra::Vector3::new(-front, side, 1.0) * den_side.signum();
    let mut est = MotionEstimate::from_direction(Direction3::normalize(v)?);
    est.ratio_side = side;
    est.ratio_front = front;
    Ok(est)
}

/// Moves both ends of every vector by the top-view rotation `q`.
fn rotate_samples(samples: &[Sample], dims: Dims, q: &Rotation3) -> Vec<Sample> {
    let w = dims.width as f64;
    samples
        .iter()
        .map(|&(u, v, dx, dy)| {
            let (u0, v0) = pixel_from_dir(&q.apply(&dir_from_pixel(u, v, dims)), dims);
            let (u1, v1) = pixel_from_dir(&q.apply(&dir_from_pixel(u + dx, v + dy, dims)), dims);
            let mut du = u1 - u0;
            du -= (du / w).round() * w;
            (u0, v0, du, v1 - v0)
        })
        .collect()
}

/// Estimates the travel direction from flow between two top-view frames.
///
/// The median ratios are exact only for travel along the axis, so the
/// estimate is refined by re-expressing the flow vectors in a frame where the
/// previous estimate is on axis.
pub fn estimate_moving_direction(flow: &FlowField, w: &WindowSpec) -> Result<MotionEstimate> {
    w.validate()?;
    let dims = flow.dims();
    let samples: Vec<Sample> = flow.valid_samples().collect();
    let first = ratio_estimate(&samples, dims, w)?;
    let mut direction = first.direction;
    let top = top_view_rotation();
    for _ in 0..w.refine_passes {
        let align = Rotation3::between(&direction, &Direction3::FORWARD);
        let moved = rotate_samples(&samples, dims, &(top * align * top.inverse()));
        let local = ratio_estimate(&moved, dims, w)?;
        direction = align.inverse().apply(&local.direction);
    }
    Ok(MotionEstimate::from_direction(direction))
}

/// Minimal rotation taking the travel direction onto +z.
pub fn motion_alignment(m: &MotionEstimate) -> Rotation3 {
    Rotation3::between(&m.direction, &Direction3::FORWARD)
}

/// Resamples both frames so the travel direction lies on +z.
pub fn align_motion_axis(a: &EquirectImage, b: &EquirectImage, m: &MotionEstimate) -> (EquirectImage, EquirectImage) {
    let q = motion_alignment(m);
    (rotate_equirect(a, &q), rotate_equirect(b, &q))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct MonocularConfig {
    pub stereo: StereoConfig,
    pub windows: WindowSpec,
    pub stabilize: StabilizeParams,
    pub flow_step: FlowStep,
    /// Re-estimation passes on frames already aligned with the previous estimate.
    pub direction_passes: DirectionPasses,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(transparent)]
pub struct DirectionPasses(pub usize);

impl Default for DirectionPasses {
    fn default() -> Self {
        DirectionPasses(2)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(transparent)]
pub struct FlowStep(pub usize);

impl Default for FlowStep {
    fn default() -> Self {
        FlowStep(8)
    }
}

#[derive(Debug, Clone)]
pub struct MonocularResult {
    /// Depth from frame A's camera, in frame A's orientation.
    pub depth: DepthMap,
    pub motion: MotionEstimate,
    /// Frame-A to frame-B rotation removed by stabilization.
    pub rotation: Rotation3,
    pub rotation_only_fallback: bool,
    pub matches: usize,
    pub flow_vectors: usize,
}

/// Two adjacent frames of a moving camera to depth in frame A's view.
pub fn monocular_depth(a: &EquirectImage, b: &EquirectImage, cfg: &MonocularConfig) -> Result<MonocularResult> {
    if a.dims() != b.dims() {
        return Err(Error::mismatch((a.width(), a.height()), (b.width(), b.height())));
    }
    cfg.stereo.validate()?;
    cfg.windows.validate()?;
    let stab = stabilize_pair(a, b, &cfg.stabilize)?;
    let undo = stab.rotation.inverse();
    let top = top_view_rotation();
    let mut align = Rotation3::identity();
    let mut motion = MotionEstimate::from_direction(Direction3::FORWARD);
    let mut flow_vectors = 0;
    for pass in 0..cfg.direction_passes.0.max(1) {
        let view = top * align;
        let flow = compute_flow(
            &rotate_equirect(a, &view),
            &rotate_equirect(b, &(view * undo)),
            cfg.flow_step.0.max(1),
        );
        let local = estimate_moving_direction(&flow, &cfg.windows)?;
        flow_vectors = flow.valid_count();
        motion = MotionEstimate::from_direction(align.inverse().apply(&local.direction));
        log::info!(
            "motion pass {pass}: down {:.3} deg, left {:.3} deg from {flow_vectors} vectors",
            motion.downward_offset.to_degrees(),
            motion.leftward_offset.to_degrees(),
        );
        align = motion_alignment(&motion);
    }
    let m = top * align;
    let lower = rotate_equirect(a, &m);
    let upper = rotate_equirect(b, &(m * undo));
    let depth_top = binocular_depth(&upper, &lower, &cfg.stereo, &EulerAngles::zero())?;
    Ok(MonocularResult {
        depth: depth_top.rotated(&m.inverse()),
        motion,
        rotation: stab.rotation,
        rotation_only_fallback: stab.pose.is_rotation_only(),
        matches: stab.matches.len(),
        flow_vectors,
    })
}
