//! Reconstruction quality metrics: PSNR and per-axial-slice 2D SSIM.

use crate::error::{Error, Result};
use crate::volume::VoxelVolume;

/// PSNR values are capped here (reached when MSE = 0).
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

/// Peak signal-to-noise ratio in dB: 10 log10(range^2 / MSE).
pub fn psnr(a: &VoxelVolume, b: &VoxelVolume, data_range: f64) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "psnr: {:?} vs {:?}",
            a.dims, b.dims
        )));
    }
    if data_range <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "data_range must be > 0, got {data_range}"
        )));
    }
    let n = a.data.len() as f64;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP_DB))
}

/// 11x11 Gaussian window (sigma 1.5), weights normalized to sum 1.
fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW as f64 - 1.0) / 2.0;
    let mut sum = 0.0;
    for j in 0..SSIM_WINDOW {
        for i in 0..SSIM_WINDOW {
            let dx = i as f64 - c;
            let dy = j as f64 - c;
            let g = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[j * SSIM_WINDOW + i] = g;
            sum += g;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean SSIM over all axial slices.
///
/// Each slice is scored with the standard windowed SSIM (valid-mode window
/// placement, C1 = (0.01 r)^2, C2 = (0.03 r)^2), averaged over window
/// positions; slice means are averaged in z order.
pub fn ssim(a: &VoxelVolume, b: &VoxelVolume, data_range: f64) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "ssim: {:?} vs {:?}",
            a.dims, b.dims
        )));
    }
    let (nx, ny, nz) = a.dims;
    if nx < SSIM_WINDOW || ny < SSIM_WINDOW {
        return Err(Error::InvalidParameter(format!(
            "ssim: axial slices must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {nx}x{ny}"
        )));
    }
    let window = gaussian_window();
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);

    let mut total = 0.0;
    for z in 0..nz {
        let slice_a = &a.data[z * nx * ny..(z + 1) * nx * ny];
        let slice_b = &b.data[z * nx * ny..(z + 1) * nx * ny];
        total += ssim_slice(slice_a, slice_b, nx, ny, &window, c1, c2);
    }
    Ok(total / nz as f64)
}

fn ssim_slice(
    a: &[f32],
    b: &[f32],
    nx: usize,
    ny: usize,
    window: &[f64],
    c1: f64,
    c2: f64,
) -> f64 {
    let out_x = nx - SSIM_WINDOW + 1;
    let out_y = ny - SSIM_WINDOW + 1;
    let mut sum = 0.0;
    for oy in 0..out_y {
        for ox in 0..out_x {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for wy in 0..SSIM_WINDOW {
                let row = (oy + wy) * nx + ox;
                for wx in 0..SSIM_WINDOW {
                    let w = window[wy * SSIM_WINDOW + wx];
                    let va = a[row + wx] as f64;
                    let vb = b[row + wx] as f64;
                    mu_a += w * va;
                    mu_b += w * vb;
                    aa += w * va * va;
                    bb += w * vb * vb;
                    ab += w * va * vb;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            sum += num / den;
        }
    }
    sum / (out_x * out_y) as f64
}
