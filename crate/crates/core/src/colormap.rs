//! Turbo-style false color for inverse depth.

use crate::image::EquirectImage;
use crate::stereo::ScalarMap;

/// Polynomial approximation of the Turbo ramp, `t` in `[0, 1]`.
pub fn turbo(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    let r =
        0.13572138 + t * (4.61539260 + t * (-42.66032258 + t * (132.13108234 + t * (-152.94239396 + t * 59.28637943))));
    let g = 0.09140261 + t * (2.19418839 + t * (4.84296658 + t * (-14.18503333 + t * (4.27729857 + t * 2.82956604))));
    let b =
        0.10667330 + t * (12.64194608 + t * (-60.58204836 + t * (110.36276771 + t * (-89.90310912 + t * 27.34824973))));
    [r.clamp(0.0, 1.0), g.clamp(0.0, 1.0), b.clamp(0.0, 1.0)]
}

/// Colors `1 / depth` scaled by its 98th percentile; INVALID pixels are black.
pub fn colorize_inverse_depth(depth: &ScalarMap) -> EquirectImage {
    let dims = depth.dims();
    let mut inv: Vec<f64> = depth
        .values()
        .iter()
        .filter(|&&x| x > 0.0 && x.is_finite())
        .map(|&x| 1.0 / x as f64)
        .collect();
    let top = if inv.is_empty() {
        1.0
    } else {
        let k = ((inv.len() - 1) as f64 * 0.98) as usize;
        let (_, v, _) = inv.select_nth_unstable_by(k, |a, b| a.total_cmp(b));
        v.max(1e-12)
    };
    let mut img = EquirectImage::filled(dims, 3, 0.0);
    for v in 0..dims.height {
        for u in 0..dims.width {
            if let Some(d) = depth.get(u, v) {
                if d > 0.0 {
                    let c = turbo((1.0 / d) / top);
                    for (k, x) in c.iter().enumerate() {
                        img.set(u, v, k, *x as f32);
                    }
                }
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_endpoints() {
        let mid = turbo(0.5);
        let hi = turbo(1.0);
        assert!(mid[1] > mid[0] && mid[1] > mid[2]);
        assert!(hi[0] > hi[2]);
        assert!(turbo(-1.0) == turbo(0.0));
    }
}
