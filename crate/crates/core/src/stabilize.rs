//! Rotation removal between frames and binocular rig misalignment.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{detect_and_match, Correspondence, FeatureParams, MatchSet};
use crate::geom::{latlon_unchecked, wrap_angle, Direction3, EulerAngles, Rotation3};
use crate::image::{rotate_equirect, EquirectImage};
use crate::pose::{estimate_relative_pose, PoseEstimate, PoseParams};

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct StabilizeParams {
    pub features: FeatureParams,
    pub pose: PoseParams,
}

#[derive(Debug, Clone)]
pub struct Stabilized {
    /// Frame B resampled into frame A's orientation.
    pub b: EquirectImage,
    /// Estimated rotation taking frame-A bearings to frame-B bearings.
    pub rotation: Rotation3,
    /// Direction of travel from A to B in the common orientation.
    pub translation: Option<Direction3>,
    pub pose: PoseEstimate,
    pub matches: MatchSet,
}

/// Estimates the relative rotation and resamples `b` to undo it.
pub fn stabilize_pair(a: &EquirectImage, b: &EquirectImage, params: &StabilizeParams) -> Result<Stabilized> {
    let matches = detect_and_match(a, b, &params.features)?;
    let pose = estimate_relative_pose(&matches, &params.pose)?;
    let rotation = pose.rotation;
    let translation = pose.baseline_in_a();
    log::info!(
        "stabilize: {} matches, rotation {:.3} deg, {}",
        matches.len(),
        rotation.angle().to_degrees(),
        if translation.is_some() {
            "translation found"
        } else {
            "rotation only"
        }
    );
    Ok(Stabilized {
        b: rotate_equirect(b, &rotation.inverse()),
        rotation,
        translation,
        pose,
        matches,
    })
}

/// `offset + cos_amp cos(theta) + sin_amp sin(theta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinusoidFit {
    pub offset: f64,
    pub cos_amp: f64,
    pub sin_amp: f64,
    pub inliers: usize,
}

impl SinusoidFit {
    pub fn amplitude(&self) -> f64 {
        self.cos_amp.hypot(self.sin_amp)
    }

    pub fn eval(&self, theta: f64) -> f64 {
        self.offset + self.cos_amp * theta.cos() + self.sin_amp * theta.sin()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn weighted_fit(samples: &[(f64, f64)], keep: &[bool]) -> Option<[f64; 3]> {
    let mut ata = Matrix3::<f64>::zeros();
    let mut atb = Vector3::<f64>::zeros();
    for (&(t, y), _) in samples.iter().zip(keep).filter(|(_, &k)| k) {
        let row = Vector3::new(1.0, t.cos(), t.sin());
        ata += row * row.transpose();
        atb += row * y;
    }
    let x = ata.try_inverse()? * atb;
    Some([x[0], x[1], x[2]])
}

/// Robust sinusoid fit: least squares with repeated rejection of residuals
/// beyond three robust standard deviations (median absolute deviation).
pub fn fit_sinusoid(samples: &[(f64, f64)]) -> Option<SinusoidFit> {
    if samples.len() < 3 {
        return None;
    }
    let mut keep = vec![true; samples.len()];
    let mut x = weighted_fit(samples, &keep)?;
    for _ in 0..10 {
        let res: Vec<f64> = samples
            .iter()
            .map(|&(t, y)| y - (x[0] + x[1] * t.cos() + x[2] * t.sin()))
            .collect();
        let mad = median(res.iter().map(|r| r.abs()).collect());
        let cut = (3.0 * 1.4826 * mad).max(1e-12);
        let next: Vec<bool> = res.iter().map(|r| r.abs() <= cut).collect();
        if next == keep || next.iter().filter(|&&k| k).count() < 3 {
            break;
        }
        keep = next;
        x = weighted_fit(samples, &keep)?;
    }
    Some(SinusoidFit {
        offset: x[0],
        cos_amp: x[1],
        sin_amp: x[2],
        inliers: keep.iter().filter(|&&k| k).count(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CalibrationParams {
    pub features: FeatureParams,
    /// Only matches within this latitude of the horizon enter the fit.
    pub horizon_deg: f64,
    pub min_matches: usize,
    pub iterations: usize,
}

impl Default for CalibrationParams {
    fn default() -> Self {
        Self {
            features: FeatureParams::default(),
            horizon_deg: 20.0,
            min_matches: 20,
            iterations: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Misalignment {
    /// Upper-camera orientation relative to the lower camera.
    pub angles: EulerAngles,
    /// Vertical sinusoid of the uncorrected matches (radians).
    pub initial_fit: SinusoidFit,
    /// Same fit after applying the estimated correction.
    pub residual_fit: SinusoidFit,
    pub matches_used: usize,
}

fn horizon_residuals(ms: &[Correspondence], corr: &Rotation3, horizon: f64) -> (Vec<(f64, f64)>, Vec<f64>) {
    let mut vertical = Vec::new();
    let mut horizontal = Vec::new();
    for m in ms {
        let (tl, pl) = latlon_unchecked(&m.dir_a.vector());
        if pl.abs() > horizon {
            continue;
        }
        let (tu, pu) = latlon_unchecked(&corr.apply_vec(&m.dir_b.vector()));
        vertical.push((tl, pu - pl));
        horizontal.push(wrap_angle(tu - tl));
    }
    (vertical, horizontal)
}

/// Fits the small-angle misalignment model to horizon matches.
///
/// For an upper camera rotated by `(alpha, beta, gamma)` relative to the
/// lower one, a distant point at lower-camera longitude `theta` appears in the
/// upper image shifted by `alpha cos(theta) - gamma sin(theta)` in latitude
/// and by `-beta` in longitude. The fit is repeated on corrected bearings and
/// the increments are composed.
pub fn estimate_rig_misalignment_from_matches(ms: &MatchSet, params: &CalibrationParams) -> Result<Misalignment> {
    let horizon = params.horizon_deg.to_radians();
    let mut corr = Rotation3::identity();
    let mut initial = None;
    let mut used = 0;
    for _ in 0..params.iterations.max(1) {
        let (vertical, horizontal) = horizon_residuals(&ms.matches, &corr, horizon);
        used = vertical.len();
        if used < params.min_matches.max(3) {
            return Err(Error::InsufficientHorizonMatches { found: used });
        }
        let fit = fit_sinusoid(&vertical).ok_or(Error::InsufficientHorizonMatches { found: used })?;
        initial.get_or_insert(fit);
        let beta = -median(horizontal);
        let w = Vector3::new(fit.cos_amp, beta, -fit.sin_amp);
        corr = Rotation3::exp(&w) * corr;
    }
    let (vertical, _) = horizon_residuals(&ms.matches, &corr, horizon);
    let residual = fit_sinusoid(&vertical).ok_or(Error::InsufficientHorizonMatches { found: vertical.len() })?;
    Ok(Misalignment {
        angles: corr.to_euler(),
        initial_fit: initial.expect("at least one iteration"),
        residual_fit: residual,
        matches_used: used,
    })
}

/// Matches a distant-scene binocular pair and fits the misalignment model.
pub fn estimate_rig_misalignment(
    upper: &EquirectImage,
    lower: &EquirectImage,
    params: &CalibrationParams,
) -> Result<Misalignment> {
    let ms = detect_and_match(lower, upper, &params.features)?;
    estimate_rig_misalignment_from_matches(&ms, params)
}
