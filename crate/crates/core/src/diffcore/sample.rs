//! Feature-map sampling primitives: bilinear interpolation at continuous
//! pixel coordinates and per-channel max over the view axis.
//!
//! Coordinates carry no gradient; they come from fixed projection of fixed
//! points. Bilinear taps outside the raster contribute zero, so coordinates
//! fully outside the map return a zero vector.

use super::tensor::Tensor;
use crate::scalar::Scalar;

/// The four (index, weight) taps of a bilinear lookup, in-raster only.
pub(crate) fn bilinear_taps(h: usize, w: usize, x: f64, y: f64) -> [(usize, f64); 4] {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let mut taps = [(0usize, 0.0f64); 4];
    let mut i = 0;
    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
            let ix = x0 as i64 + dx;
            let iy = y0 as i64 + dy;
            let weight = wx * wy;
            if ix >= 0 && (ix as usize) < w && iy >= 0 && (iy as usize) < h && weight != 0.0 {
                taps[i] = (iy as usize * w + ix as usize, weight);
                i += 1;
            }
        }
    }
    // Unused slots keep weight 0.
    taps
}

/// Sample a [c, h, w] feature map at continuous pixel coordinate (x, y).
pub fn bilinear_sample<T: Scalar>(feat: &Tensor<T>, x: f64, y: f64) -> Vec<T> {
    let (c, h, w) = (feat.shape[0], feat.shape[1], feat.shape[2]);
    let taps = bilinear_taps(h, w, x, y);
    let mut out = vec![T::zero(); c];
    for ci in 0..c {
        let plane = &feat.data[ci * h * w..(ci + 1) * h * w];
        let mut acc = T::zero();
        for &(idx, weight) in &taps {
            if weight != 0.0 {
                acc = acc + plane[idx] * T::from_f64c(weight);
            }
        }
        out[ci] = acc;
    }
    out
}

/// Scatter the output gradient back into the feature-map gradient buffer.
pub fn bilinear_backward<T: Scalar>(gfeat: &mut Tensor<T>, x: f64, y: f64, gout: &[T]) {
    let (c, h, w) = (gfeat.shape[0], gfeat.shape[1], gfeat.shape[2]);
    debug_assert_eq!(gout.len(), c);
    let taps = bilinear_taps(h, w, x, y);
    for ci in 0..c {
        let plane = &mut gfeat.data[ci * h * w..(ci + 1) * h * w];
        for &(idx, weight) in &taps {
            if weight != 0.0 {
                plane[idx] = plane[idx] + gout[ci] * T::from_f64c(weight);
            }
        }
    }
}

/// Per-channel max over a [k, c] stack restricted to `valid` rows.
/// Ties route to the lowest view index. Returns the pooled vector and the
/// winning row per channel (needed by backward).
pub fn max_over_views<T: Scalar>(stack: &[Vec<T>], valid: &[bool]) -> Option<(Vec<T>, Vec<usize>)> {
    let k = stack.len();
    debug_assert_eq!(valid.len(), k);
    let first = (0..k).find(|&i| valid[i])?;
    let c = stack[first].len();
    let mut out = stack[first].clone();
    let mut arg = vec![first; c];
    for row in first + 1..k {
        if !valid[row] {
            continue;
        }
        for ci in 0..c {
            if stack[row][ci] > out[ci] {
                out[ci] = stack[row][ci];
                arg[ci] = row;
            }
        }
    }
    Some((out, arg))
}
