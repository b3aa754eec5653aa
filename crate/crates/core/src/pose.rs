//! Relative pose from bearing correspondences.
//!
//! Bearings satisfy `dir_b ~ R dir_a + t` for points in front of both
//! cameras, so `dir_b^T E dir_a = 0` with `E = [t]x R`.

use nalgebra::{Matrix3, SMatrix, SymmetricEigen, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Correspondence, MatchSet};
use crate::geom::{skew, Direction3, Rotation3};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PoseParams {
    pub threshold_deg: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Translation model must beat rotation-only support by this factor.
    pub fallback_ratio: f64,
}

impl Default for PoseParams {
    fn default() -> Self {
        Self {
            threshold_deg: 0.2,
            iterations: 2000,
            seed: 0,
            fallback_ratio: 1.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    /// Maps frame-A bearings to frame-B bearings.
    pub rotation: Rotation3,
    /// Unit translation in frame B; `None` when the rotation-only model won.
    pub translation: Option<Direction3>,
    pub inliers: Vec<bool>,
    pub translation_support: usize,
    pub rotation_support: usize,
}

impl PoseEstimate {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&x| x).count()
    }

    pub fn is_rotation_only(&self) -> bool {
        self.translation.is_none()
    }

    /// Direction from camera A to camera B expressed in frame A.
    pub fn baseline_in_a(&self) -> Option<Direction3> {
        self.translation.map(|t| -self.rotation.inverse().apply(&t))
    }

    pub fn essential(&self) -> Option<Matrix3<f64>> {
        self.translation.map(|t| skew(&t.vector()) * self.rotation.matrix())
    }

    /// `R` as three rows, then `t` (zeros when absent), then the inlier flags.
    pub fn to_text(&self) -> String {
        let m = self.rotation.matrix();
        let mut s = String::new();
        for i in 0..3 {
            s.push_str(&format!("{:.12} {:.12} {:.12}\n", m[(i, 0)], m[(i, 1)], m[(i, 2)]));
        }
        let t = self.translation.map(|t| t.vector()).unwrap_or_else(Vector3::zeros);
        s.push_str(&format!("{:.12} {:.12} {:.12}\n", t.x, t.y, t.z));
        let flags: String = self.inliers.iter().map(|&b| if b { '1' } else { '0' }).collect();
        s.push_str(&flags);
        s.push('\n');
        s
    }
}

/// Least-squares `E` (unit Frobenius norm) from at least eight correspondences.
pub fn eight_point(ms: &[Correspondence]) -> Option<Matrix3<f64>> {
    if ms.len() < 8 {
        return None;
    }
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for m in ms {
        let (a, b) = (m.dir_a.vector(), m.dir_b.vector());
        let mut row = SMatrix::<f64, 9, 1>::zeros();
        for i in 0..3 {
            for j in 0..3 {
                row[3 * i + j] = b[i] * a[j];
            }
        }
        ata += row * row.transpose();
    }
    let eig = SymmetricEigen::new(ata);
    let k = eig.eigenvalues.imin();
    let e = eig.eigenvectors.column(k);
    let raw = Matrix3::from_fn(|i, j| e[3 * i + j]);
    let svd = raw.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let e = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0)) * vt;
    e.iter().all(|x| x.is_finite()).then_some(e / std::f64::consts::SQRT_2)
}

/// Sine of the larger of the two bearing-to-epipolar-plane angles.
fn epipolar_error(e: &Matrix3<f64>, m: &Correspondence) -> f64 {
    let (a, b) = (m.dir_a.vector(), m.dir_b.vector());
    let ea = e * a;
    let etb = e.transpose() * b;
    let num = b.dot(&ea).abs();
    let (na, nb) = (ea.norm(), etb.norm());
    if na < 1e-12 || nb < 1e-12 {
        return f64::INFINITY;
    }
    (num / na).max(num / nb)
}

/// Depths `(lambda_a, lambda_b)` with `lambda_b b = lambda_a R a + t`.
pub fn triangulate(r: &Matrix3<f64>, t: &Vector3<f64>, m: &Correspondence) -> Option<(f64, f64)> {
    let ra = r * m.dir_a.vector();
    let b = m.dir_b.vector();
    // Normal equations of [ra, -b] [la, lb]^T = -t.
    let (p, q, s) = (ra.dot(&ra), -ra.dot(&b), b.dot(&b));
    let (c1, c2) = (-ra.dot(t), b.dot(t));
    let det = p * s - q * q;
    if det.abs() < 1e-12 {
        return None;
    }
    Some(((s * c1 - q * c2) / det, (p * c2 - q * c1) / det))
}

/// The four `(R, t)` factorizations of an essential matrix.
pub fn decompose_essential(e: &Matrix3<f64>) -> Vec<(Matrix3<f64>, Vector3<f64>)> {
    let svd = e.svd(true, true);
    let (mut u, mut vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(v)) => (u, v),
        _ => return Vec::new(),
    };
    if u.determinant() < 0.0 {
        u = -u;
    }
    if vt.determinant() < 0.0 {
        vt = -vt;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let t: Vector3<f64> = u.column(2).into();
    let r1 = u * w * vt;
    let r2 = u * w.transpose() * vt;
    vec![(r1, t), (r1, -t), (r2, t), (r2, -t)]
}

/// Least-squares rotation with `b ~ R a` (Kabsch on bearings).
pub fn kabsch_bearings<'a>(pairs: impl Iterator<Item = (&'a Vector3<f64>, &'a Vector3<f64>)>) -> Rotation3 {
    let mut h = Matrix3::zeros();
    for (a, b) in pairs {
        h += b * a.transpose();
    }
    Rotation3::nearest(&h)
}

fn rotation_from_two(m1: &Correspondence, m2: &Correspondence) -> Rotation3 {
    let (a1, b1) = (m1.dir_a.vector(), m1.dir_b.vector());
    let (a2, b2) = (m2.dir_a.vector(), m2.dir_b.vector());
    let (a3, b3) = (a1.cross(&a2), b1.cross(&b2));
    kabsch_bearings([(&a1, &b1), (&a2, &b2), (&a3, &b3)].into_iter())
}

fn count(mask: &[bool]) -> usize {
    mask.iter().filter(|&&x| x).count()
}

fn draw_samples(n: usize, k: usize, iters: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<Vec<usize>> {
    (0..iters).map(|_| sample(rng, n, k).into_vec()).collect()
}

fn rotation_ransac(
    ms: &[Correspondence],
    thr: f64,
    iters: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> (Rotation3, Vec<bool>) {
    let cos_thr = thr.cos();
    let mask_for = |r: &Rotation3| -> Vec<bool> {
        ms.iter()
            .map(|m| r.apply_vec(&m.dir_a.vector()).dot(&m.dir_b.vector()) >= cos_thr)
            .collect()
    };
    let samples = draw_samples(ms.len(), 2, iters, rng);
    let best = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let r = rotation_from_two(&ms[s[0]], &ms[s[1]]);
            (count(&mask_for(&r)), usize::MAX - i)
        })
        .max()
        .map(|(_, i)| usize::MAX - i)
        .unwrap_or(0);
    let s = &samples[best];
    let mut r = rotation_from_two(&ms[s[0]], &ms[s[1]]);
    let mut mask = mask_for(&r);
    for _ in 0..3 {
        if count(&mask) < 2 {
            break;
        }
        let vs: Vec<(Vector3<f64>, Vector3<f64>)> = ms
            .iter()
            .zip(&mask)
            .filter(|(_, &k)| k)
            .map(|(m, _)| (m.dir_a.vector(), m.dir_b.vector()))
            .collect();
        r = kabsch_bearings(vs.iter().map(|(a, b)| (a, b)));
        mask = mask_for(&r);
    }
    (r, mask)
}

fn essential_mask(e: &Matrix3<f64>, ms: &[Correspondence], sin_thr: f64) -> Vec<bool> {
    ms.iter().map(|m| epipolar_error(e, m) < sin_thr).collect()
}

fn select_factorization(
    e: &Matrix3<f64>,
    ms: &[Correspondence],
    mask: &[bool],
) -> Option<(Matrix3<f64>, Vector3<f64>, usize)> {
    decompose_essential(e)
        .into_iter()
        .map(|(r, t)| {
            let front = ms
                .iter()
                .zip(mask)
                .filter(|(_, &k)| k)
                .filter(|(m, _)| matches!(triangulate(&r, &t, m), Some((la, lb)) if la > 0.0 && lb > 0.0))
                .count();
            (r, t, front)
        })
        .max_by_key(|x| x.2)
}

/// Angular distance-like epipolar residual, signed and symmetric in `a`, `b`.
fn symmetric_residual(e: &Matrix3<f64>, m: &Correspondence) -> f64 {
    let (a, b) = (m.dir_a.vector(), m.dir_b.vector());
    let den = ((e * a).norm_squared() + (e.transpose() * b).norm_squared()).sqrt();
    if den < 1e-12 {
        0.0
    } else {
        std::f64::consts::SQRT_2 * b.dot(&(e * a)) / den
    }
}

fn tangent_basis(t: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if t.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let u = t.cross(&helper).normalize();
    (u, t.cross(&u))
}

/// Levenberg-Marquardt on the five pose degrees of freedom, minimizing the
/// Cauchy-weighted symmetric epipolar residual over the inliers.
fn refine_pose(r: &Matrix3<f64>, t: &Vector3<f64>, inl: &[Correspondence], scale: f64) -> (Matrix3<f64>, Vector3<f64>) {
    let mut r = Rotation3::nearest(r);
    let mut t = t.normalize();
    let apply = |r: &Rotation3, t: &Vector3<f64>, d: &[f64; 5]| -> (Rotation3, Vector3<f64>) {
        let (u, v) = tangent_basis(t);
        let r2 = Rotation3::exp(&Vector3::new(d[0], d[1], d[2])) * *r;
        (r2, (t + u * d[3] + v * d[4]).normalize())
    };
    let residuals = |r: &Rotation3, t: &Vector3<f64>| -> Vec<f64> {
        let e = skew(t) * r.matrix();
        inl.iter().map(|m| symmetric_residual(&e, m)).collect()
    };
    let cost = |res: &[f64]| -> f64 { res.iter().map(|x| (1.0 + (x / scale).powi(2)).ln()).sum() };
    let mut res = residuals(&r, &t);
    let mut c = cost(&res);
    let mut lambda = 1e-3;
    const H: f64 = 1e-7;
    for _ in 0..30 {
        let cols: Vec<Vec<f64>> = (0..5)
            .map(|k| {
                let mut d = [0.0; 5];
                d[k] = H;
                let (r2, t2) = apply(&r, &t, &d);
                residuals(&r2, &t2).iter().zip(&res).map(|(a, b)| (a - b) / H).collect()
            })
            .collect();
        let mut jtj = SMatrix::<f64, 5, 5>::zeros();
        let mut jtr = SMatrix::<f64, 5, 1>::zeros();
        for (i, ri) in res.iter().enumerate() {
            let w = 1.0 / (1.0 + (ri / scale).powi(2));
            for p in 0..5 {
                jtr[p] += w * cols[p][i] * ri;
                for q in 0..5 {
                    jtj[(p, q)] += w * cols[p][i] * cols[q][i];
                }
            }
        }
        let mut improved = false;
        while lambda < 1e6 {
            let mut damped = jtj;
            for p in 0..5 {
                damped[(p, p)] *= 1.0 + lambda;
            }
            let Some(step) = damped.cholesky().map(|ch| ch.solve(&(-jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let d = [step[0], step[1], step[2], step[3], step[4]];
            let (r2, t2) = apply(&r, &t, &d);
            let res2 = residuals(&r2, &t2);
            let c2 = cost(&res2);
            if c2 < c {
                let small = step.norm() < 1e-10;
                (r, t, res, c) = (r2, t2, res2, c2);
                lambda = (lambda * 0.3).max(1e-9);
                improved = !small;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (*r.matrix(), t)
}

/// RANSAC essential-matrix fit with a rotation-only fallback.
pub fn estimate_relative_pose(m: &MatchSet, params: &PoseParams) -> Result<PoseEstimate> {
    let ms = &m.matches;
    if ms.len() < 8 {
        return Err(Error::InsufficientFeatures {
            found: ms.len(),
            needed: 8,
        });
    }
    if params.threshold_deg <= 0.0 || params.iterations == 0 {
        return Err(Error::InvalidConfig(
            "pose threshold and iterations must be positive".into(),
        ));
    }
    let thr = params.threshold_deg.to_radians();
    let sin_thr = thr.sin();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(params.seed);

    let samples = draw_samples(ms.len(), 8, params.iterations, &mut rng);
    let best = samples
        .par_iter()
        .enumerate()
        .filter_map(|(i, s)| {
            let sub: Vec<Correspondence> = s.iter().map(|&k| ms[k]).collect();
            let e = eight_point(&sub)?;
            Some((count(&essential_mask(&e, ms, sin_thr)), usize::MAX - i))
        })
        .max()
        .map(|(_, i)| usize::MAX - i);

    let mut translated = None;
    if let Some(best) = best {
        let sub: Vec<Correspondence> = samples[best].iter().map(|&k| ms[k]).collect();
        if let Some(mut e) = eight_point(&sub) {
            let mut mask = essential_mask(&e, ms, sin_thr);
            for _ in 0..4 {
                let inl: Vec<Correspondence> = ms.iter().zip(&mask).filter(|(_, &k)| k).map(|(c, _)| *c).collect();
                match eight_point(&inl) {
                    Some(next) => {
                        let next_mask = essential_mask(&next, ms, sin_thr);
                        if count(&next_mask) < count(&mask) {
                            break;
                        }
                        e = next;
                        mask = next_mask;
                    }
                    None => break,
                }
            }
            if let Some((r, t, _)) = select_factorization(&e, ms, &mask) {
                let inl: Vec<Correspondence> = ms.iter().zip(&mask).filter(|(_, &k)| k).map(|(c, _)| *c).collect();
                let (r, t) = refine_pose(&r, &t, &inl, 0.5 * sin_thr);
                translated = Some((r, t, essential_mask(&(skew(&t) * r), ms, sin_thr)));
            }
        }
    }

    let (rot, rot_mask) = rotation_ransac(ms, thr, params.iterations.min(500), &mut rng);
    let rotation_support = count(&rot_mask);
    let translation_support = translated.as_ref().map_or(0, |(_, _, k)| count(k));
    match translated {
        Some((r, t, mask)) if translation_support as f64 >= params.fallback_ratio * rotation_support as f64 => {
            Ok(PoseEstimate {
                rotation: Rotation3::nearest(&r),
                translation: Some(Direction3::normalize(t)?),
                inliers: mask,
                translation_support,
                rotation_support,
            })
        }
        _ => {
            log::info!(
                "rotation-only fallback: translation support {translation_support}, rotation support {rotation_support}"
            );
            Ok(PoseEstimate {
                rotation: rot,
                translation: None,
                inliers: rot_mask,
                translation_support,
                rotation_support,
            })
        }
    }
}
