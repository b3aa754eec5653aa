//! Epipolar transposition and SAD block matching along meridians.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::Dims;
use crate::image::EquirectImage;

use super::{DisparityMap, StereoConfig};

/// Equirectangular image rotated 90 degrees clockwise.
///
/// Row `r` holds meridian `u = r`; column `c` holds image row `v = height - 1 - c`,
/// so columns run from the south pole to the north pole. For a vertical rig
/// this turns every meridian into a horizontal epipolar line, and a point seen
/// by the lower camera at column `c` appears in the upper camera at `c - n`
/// with `n >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpipolarGrid {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl EpipolarGrid {
    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    /// Equirect dims this grid came from.
    pub fn source_dims(&self) -> Dims {
        Dims {
            width: self.rows,
            height: self.cols,
        }
    }

    fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Transposes a (gray-converted) equirect image so meridians become rows.
pub fn epipolar_transpose(img: &EquirectImage) -> EpipolarGrid {
    let g = img.to_gray();
    let (w, h) = (g.width(), g.height());
    let src = g.data();
    let mut data = vec![0.0f32; w * h];
    for (r, row) in data.chunks_mut(h).enumerate() {
        for (c, px) in row.iter_mut().enumerate() {
            *px = src[(h - 1 - c) * w + r];
        }
    }
    EpipolarGrid { rows: w, cols: h, data }
}

/// Inverse of [`epipolar_transpose`] (single-channel result).
pub fn epipolar_untranspose(grid: &EpipolarGrid) -> EquirectImage {
    let h = grid.cols;
    let dims = Dims::from_height(h);
    EquirectImage::from_fn_gray(dims, |u, v| grid.data[u * h + (h - 1 - v)])
}

/// Rows processed per parallel task; sliding vertical sums restart per chunk.
const CHUNK_ROWS: usize = 16;

/// SAD block matching of `reference` (lower view) against `target` (upper view).
///
/// For each reference pixel the cost `sum |ref(r, c) - tgt(r, c - n)|` over a
/// square block is evaluated for `n` in `[0, num_disparities)`. Block rows
/// wrap across the 0/2pi meridian seam. The winner is refined with a
/// three-point parabola; a cost at `n = -1` is evaluated only to allow
/// refinement of zero-disparity winners. Pixels whose reference block
/// variance is below `min_valid_texture`, or whose runner-up cost (beyond
/// one step from the winner) is not at least `uniqueness_ratio` times the
/// best, are INVALID. The result is laid out in the reference equirect frame.
pub fn block_match(reference: &EpipolarGrid, target: &EpipolarGrid, cfg: &StereoConfig) -> Result<DisparityMap> {
    if reference.rows != target.rows || reference.cols != target.cols {
        return Err(Error::mismatch(
            (reference.rows, reference.cols),
            (target.rows, target.cols),
        ));
    }
    cfg.validate()?;
    let rows = reference.rows;
    let cols = reference.cols;
    let radius = cfg.block_size / 2;
    let ndisp = cfg.num_disparities;
    // Slot k holds disparity k - 1.
    let nslots = ndisp + 1;
    let area = (cfg.block_size * cfg.block_size) as f32;

    let chunks: Vec<Vec<f32>> = (0..rows.div_ceil(CHUNK_ROWS))
        .into_par_iter()
        .map(|chunk| {
            let r0 = chunk * CHUNK_ROWS;
            let r1 = (r0 + CHUNK_ROWS).min(rows);
            let mut out = Vec::with_capacity((r1 - r0) * cols);
            // Vertical (across-meridian) sums per slot and column.
            let mut colsum = vec![0.0f32; nslots * cols];
            let mut refsum = vec![0.0f32; cols];
            let mut refsq = vec![0.0f32; cols];
            let wrap = |r: isize| r.rem_euclid(rows as isize) as usize;
            let add_row = |colsum: &mut [f32], refsum: &mut [f32], refsq: &mut [f32], r: usize, sign: f32| {
                let a = reference.row(r);
                let b = target.row(r);
                for slot in 0..nslots {
                    let n = slot as isize - 1;
                    let cs = &mut colsum[slot * cols..(slot + 1) * cols];
                    for c in 0..cols {
                        let tc = (c as isize - n).clamp(0, cols as isize - 1) as usize;
                        cs[c] += sign * (a[c] - b[tc]).abs();
                    }
                }
                for c in 0..cols {
                    refsum[c] += sign * a[c];
                    refsq[c] += sign * a[c] * a[c];
                }
            };
            for dr in -(radius as isize)..=radius as isize {
                add_row(&mut colsum, &mut refsum, &mut refsq, wrap(r0 as isize + dr), 1.0);
            }
            let mut cost = vec![0.0f32; nslots];
            for r in r0..r1 {
                if r > r0 {
                    add_row(
                        &mut colsum,
                        &mut refsum,
                        &mut refsq,
                        wrap(r as isize - radius as isize - 1),
                        -1.0,
                    );
                    add_row(
                        &mut colsum,
                        &mut refsum,
                        &mut refsq,
                        wrap(r as isize + radius as isize),
                        1.0,
                    );
                }
                // Horizontal box sums via prefix sums with clamped borders.
                let boxed = |v: &[f32], c: usize| -> f32 {
                    let mut s = 0.0;
                    for dc in -(radius as isize)..=radius as isize {
                        s += v[(c as isize + dc).clamp(0, cols as isize - 1) as usize];
                    }
                    s
                };
                let mut prefix = vec![0.0f32; nslots * (cols + 1)];
                for slot in 0..nslots {
                    let cs = &colsum[slot * cols..(slot + 1) * cols];
                    let p = &mut prefix[slot * (cols + 1)..(slot + 1) * (cols + 1)];
                    for c in 0..cols {
                        p[c + 1] = p[c] + cs[c];
                    }
                }
                for c in 0..cols {
                    let mean = boxed(&refsum, c) / area;
                    let var = boxed(&refsq, c) / area - mean * mean;
                    if var < cfg.min_valid_texture {
                        out.push(DisparityMap::INVALID);
                        continue;
                    }
                    let lo = c.saturating_sub(radius);
                    let hi = (c + radius).min(cols - 1);
                    let clamped_lo = radius.saturating_sub(c) as f32;
                    let clamped_hi = (c + radius).saturating_sub(cols - 1) as f32;
                    for slot in 0..nslots {
                        let n = slot as isize - 1;
                        if (c as isize) - n < 0 || (c as isize) - n >= cols as isize {
                            cost[slot] = f32::INFINITY;
                            continue;
                        }
                        let cs = &colsum[slot * cols..(slot + 1) * cols];
                        let p = &prefix[slot * (cols + 1)..(slot + 1) * (cols + 1)];
                        cost[slot] = p[hi + 1] - p[lo] + clamped_lo * cs[0] + clamped_hi * cs[cols - 1];
                    }
                    out.push(pick_disparity(&cost, cfg.uniqueness_ratio));
                }
            }
            out
        })
        .collect();

    let flat: Vec<f32> = chunks.into_iter().flatten().collect();
    // Back to the equirect frame: grid (r, c) -> pixel (u = r, v = cols - 1 - c).
    let dims = reference.source_dims();
    let mut values = vec![DisparityMap::INVALID; dims.len()];
    for r in 0..rows {
        for c in 0..cols {
            values[(cols - 1 - c) * rows + r] = flat[r * cols + c];
        }
    }
    DisparityMap::from_values(dims, values)
}

/// Winner-take-all with uniqueness check and parabolic refinement.
/// `cost[k]` is the cost of disparity `k - 1`.
fn pick_disparity(cost: &[f32], uniqueness: f32) -> f32 {
    let mut best = usize::MAX;
    for (k, &c) in cost.iter().enumerate().skip(1) {
        if c.is_finite() && (best == usize::MAX || c < cost[best]) {
            best = k;
        }
    }
    if best == usize::MAX {
        return DisparityMap::INVALID;
    }
    let best_cost = cost[best];
    let second = cost
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(k, c)| k.abs_diff(best) > 1 && c.is_finite())
        .map(|(_, &c)| c)
        .fold(f32::INFINITY, f32::min);
    if second.is_finite() && second < best_cost * uniqueness {
        return DisparityMap::INVALID;
    }
    let mut d = (best as f32) - 1.0;
    if best >= 1 && best + 1 < cost.len() {
        let (cm, cp) = (cost[best - 1], cost[best + 1]);
        if cm.is_finite() && cp.is_finite() {
            let denom = cm - 2.0 * best_cost + cp;
            if denom > 0.0 {
                d += (0.5 * (cm - cp) / denom).clamp(-0.5, 0.5);
            }
        }
    }
    let max = (cost.len() - 1) as f32;
    if d < 0.0 {
        0.0
    } else {
        d.min(max - 1e-3)
    }
}
