//! Classical reconstruction baselines: SART and a simplified FDK-style
//! filtered backprojection. Both exist for directional comparison only.

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::geometry::ScanGeometry;
use crate::math::Vec3;
use crate::projector::ProjectionStack;
use crate::volume::{sample_trilinear, trilinear_taps, VoxelVolume};

/// SART hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SartConfig {
    pub iterations: usize,
    /// Relaxation factor, in (0, 2).
    pub relaxation: f64,
    /// Samples per ray (matches the DRR integration rule).
    pub n_r: usize,
}

impl Default for SartConfig {
    fn default() -> Self {
        Self {
            iterations: 30,
            relaxation: 0.5,
            n_r: 256,
        }
    }
}

impl SartConfig {
    fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::InvalidParameter("sart iterations must be >= 1".into()));
        }
        if !(self.relaxation > 0.0 && self.relaxation < 2.0) {
            return Err(Error::InvalidParameter(format!(
                "sart relaxation must be in (0, 2), got {}",
                self.relaxation
            )));
        }
        if self.n_r < 1 {
            return Err(Error::InvalidParameter("sart n_r must be >= 1".into()));
        }
        Ok(())
    }
}

/// Volume-norm guard: SART diverged if any voxel magnitude passes this.
const SART_DIVERGENCE_BOUND: f64 = 1e3;

/// Forward-project one view of `vol` with the same sampled-ray rule the DRR
/// generator uses, also returning the per-pixel "intersection length"
/// (step length times the number of in-volume sample points).
fn sart_forward_view(
    vol: &VoxelVolume,
    geom: &ScanGeometry,
    view: usize,
    n_r: usize,
) -> (Vec<f64>, Vec<f64>) {
    let (n_u, n_v) = geom.det_shape;
    let mut proj = vec![0.0f64; n_u * n_v];
    let mut lens = vec![0.0f64; n_u * n_v];
    proj.par_chunks_mut(n_u)
        .zip(lens.par_chunks_mut(n_u))
        .enumerate()
        .for_each(|(v, (prow, lrow))| {
            for u in 0..n_u {
                let ray = geom.pixel_ray(view, (u as f64, v as f64));
                let step = ray.length() / n_r as f64;
                let mut acc = 0.0;
                let mut hits = 0usize;
                for i in 0..=n_r {
                    let p = ray.at(i as f64 / n_r as f64);
                    if trilinear_taps(vol, p).is_some() {
                        acc += sample_trilinear(vol, p);
                        hits += 1;
                    }
                }
                prow[u] = step * acc;
                lrow[u] = step * hits as f64;
            }
        });
    (proj, lens)
}

/// Simultaneous ART. Per iteration, per view: forward-project, form pixel
/// residuals, and backproject them through the matched sampled-footprint
/// operator, normalized per ray and per voxel; clamp to non-negative after
/// each iteration.
pub fn sart_reconstruct(
    stack: &ProjectionStack,
    out_dims: (usize, usize, usize),
    out_spacing: Vec3,
    cfg: &SartConfig,
) -> Result<VoxelVolume> {
    cfg.validate()?;
    let geom = &stack.geometry;
    let (n_u, n_v) = geom.det_shape;
    let mut vol = VoxelVolume::centered(out_dims, out_spacing);
    let n_vox = vol.data.len();

    for _iter in 0..cfg.iterations {
        for view in 0..geom.n_views {
            let (proj, lens) = sart_forward_view(&vol, geom, view, cfg.n_r);
            // Scatter num += a_ij * r_i / L_i and den += a_ij over the same
            // footprints the forward pass used.
            let mut num = vec![0.0f64; n_vox];
            let mut den = vec![0.0f64; n_vox];
            for v in 0..n_v {
                for u in 0..n_u {
                    let pix = v * n_u + u;
                    let row_len = lens[pix];
                    if row_len <= 0.0 {
                        continue;
                    }
                    let residual =
                        (stack.pixel(view, u, v) as f64 - proj[pix]) / row_len;
                    let ray = geom.pixel_ray(view, (u as f64, v as f64));
                    let step = ray.length() / cfg.n_r as f64;
                    for i in 0..=cfg.n_r {
                        let p = ray.at(i as f64 / cfg.n_r as f64);
                        if let Some(taps) = trilinear_taps(&vol, p) {
                            for (idx, w) in taps {
                                let a = step * w;
                                num[idx] += a * residual;
                                den[idx] += a;
                            }
                        }
                    }
                }
            }
            for (j, x) in vol.data.iter_mut().enumerate() {
                if den[j] > 0.0 {
                    *x = (*x as f64 + cfg.relaxation * num[j] / den[j]) as f32;
                }
            }
        }
        let mut max_abs = 0.0f64;
        for x in vol.data.iter_mut() {
            if *x < 0.0 {
                *x = 0.0;
            }
            max_abs = max_abs.max(x.abs() as f64);
        }
        if !max_abs.is_finite() || max_abs > SART_DIVERGENCE_BOUND {
            return Err(Error::Divergence(format!(
                "sart volume norm reached {max_abs}"
            )));
        }
    }
    Ok(vol)
}

/// L2 norm of the projection residual of `vol` against the measured stack,
/// using the same forward model as SART.
pub fn projection_residual_norm(vol: &VoxelVolume, stack: &ProjectionStack, n_r: usize) -> f64 {
    let geom = &stack.geometry;
    let (n_u, n_v) = geom.det_shape;
    let mut total = 0.0;
    for view in 0..geom.n_views {
        let (proj, _) = sart_forward_view(vol, geom, view, n_r);
        for v in 0..n_v {
            for u in 0..n_u {
                let d = stack.pixel(view, u, v) as f64 - proj[v * n_u + u];
                total += d * d;
            }
        }
    }
    total.sqrt()
}

/// Bilinear lookup on one detector image; outside the raster reads zero.
fn bilerp_image(img: &[f64], n_u: usize, n_v: usize, u: f64, v: f64) -> f64 {
    let u0 = u.floor();
    let v0 = v.floor();
    let fu = u - u0;
    let fv = v - v0;
    let mut acc = 0.0;
    for (dv, wv) in [(0i64, 1.0 - fv), (1, fv)] {
        for (du, wu) in [(0i64, 1.0 - fu), (1, fu)] {
            let iu = u0 as i64 + du;
            let iv = v0 as i64 + dv;
            if iu >= 0 && (iu as usize) < n_u && iv >= 0 && (iv as usize) < n_v {
                acc += wu * wv * img[iv as usize * n_u + iu as usize];
            }
        }
    }
    acc
}

/// Simplified FDK filtered backprojection: cosine pre-weighting, per-row
/// frequency-domain ramp filtering with a rectangular band limit, and
/// distance-weighted cone-beam backprojection.
///
/// This is an approximation: no Parker weighting for the half-scan orbit,
/// so amplitudes are only roughly calibrated — it serves as a directional
/// baseline, not a quantitative one.
pub fn fdk_reconstruct(
    stack: &ProjectionStack,
    out_dims: (usize, usize, usize),
    out_spacing: Vec3,
) -> Result<VoxelVolume> {
    let geom = &stack.geometry;
    let (n_u, n_v) = geom.det_shape;
    let (cu, cv) = ((n_u as f64 - 1.0) / 2.0, (n_v as f64 - 1.0) / 2.0);
    // Detector geometry rescaled to the isocenter plane.
    let mag = geom.sid / geom.sdd;
    let du_iso = geom.det_spacing * mag;

    let fft_n = (2 * n_u).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(fft_n);
    let ifft = planner.plan_fft_inverse(fft_n);
    // |freq| ramp in cycles/mm, band-limited at the detector Nyquist rate.
    let ramp: Vec<f64> = (0..fft_n)
        .map(|j| {
            let idx = j.min(fft_n - j);
            idx as f64 / (fft_n as f64 * du_iso)
        })
        .collect();

    let filtered: Vec<Vec<f64>> = (0..geom.n_views)
        .map(|view| {
            let mut out = vec![0.0f64; n_u * n_v];
            out.par_chunks_mut(n_u).enumerate().for_each(|(v, row)| {
                let t = (v as f64 - cv) * du_iso;
                let mut buf = vec![Complex::new(0.0, 0.0); fft_n];
                for u in 0..n_u {
                    let s = (u as f64 - cu) * du_iso;
                    let cos_w = geom.sid / (geom.sid * geom.sid + s * s + t * t).sqrt();
                    buf[u] = Complex::new(stack.pixel(view, u, v) as f64 * cos_w, 0.0);
                }
                fft.process(&mut buf);
                for (b, &h) in buf.iter_mut().zip(&ramp) {
                    *b *= h;
                }
                ifft.process(&mut buf);
                for u in 0..n_u {
                    // rustfft leaves the inverse unnormalized (factor fft_n).
                    row[u] = buf[u].re / fft_n as f64 * du_iso;
                }
            });
            out
        })
        .collect();

    let mut vol = VoxelVolume::centered(out_dims, out_spacing);
    let d_beta = std::f64::consts::PI / geom.n_views as f64;
    let (nx, ny) = (out_dims.0, out_dims.1);
    let origin = vol.origin;
    let spacing = vol.spacing;
    vol.data
        .par_chunks_mut(nx * ny)
        .enumerate()
        .for_each(|(z, slice)| {
            for y in 0..ny {
                for x in 0..nx {
                    let p = [
                        origin[0] + x as f64 * spacing[0],
                        origin[1] + y as f64 * spacing[1],
                        origin[2] + z as f64 * spacing[2],
                    ];
                    let mut acc = 0.0;
                    for view in 0..geom.n_views {
                        let src = geom.poses[view].source_pos;
                        // Dimensionless source-distance ratio along the
                        // central ray.
                        let e_src = [
                            src[0] / geom.sid,
                            src[1] / geom.sid,
                            src[2] / geom.sid,
                        ];
                        let u_ratio = (geom.sid
                            - (p[0] * e_src[0] + p[1] * e_src[1] + p[2] * e_src[2]))
                            / geom.sid;
                        if u_ratio <= 1e-6 {
                            continue;
                        }
                        if let Ok((u, v)) = geom.project_point(view, p) {
                            acc += d_beta / (u_ratio * u_ratio)
                                * bilerp_image(&filtered[view], n_u, n_v, u, v);
                        }
                    }
                    slice[y * nx + x] = acc as f32;
                }
            }
        });
    Ok(vol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_circular_geometry;
    use crate::metrics::psnr;
    use crate::projector::drr;
    use crate::volume::{generate_phantom, sphere_spec};

    fn zero_stack(k: usize, det: usize) -> ProjectionStack {
        let geom = make_circular_geometry(k, 1000.0, 1500.0, (det, det), 4.0).unwrap();
        ProjectionStack {
            data: vec![vec![0.0; det * det]; k],
            geometry: geom,
        }
    }

    #[test]
    fn sart_zero_projections_stay_zero() {
        let stack = zero_stack(4, 16);
        let cfg = SartConfig {
            iterations: 3,
            relaxation: 0.5,
            n_r: 32,
        };
        let vol = sart_reconstruct(&stack, (8, 8, 8), [4.0; 3], &cfg).unwrap();
        assert!(vol.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn fdk_zero_projections_stay_zero() {
        let stack = zero_stack(8, 16);
        let vol = fdk_reconstruct(&stack, (8, 8, 8), [4.0; 3]).unwrap();
        assert!(vol.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn sart_config_validation() {
        let stack = zero_stack(2, 16);
        for bad in [
            SartConfig { iterations: 0, relaxation: 0.5, n_r: 8 },
            SartConfig { iterations: 1, relaxation: 0.0, n_r: 8 },
            SartConfig { iterations: 1, relaxation: 2.0, n_r: 8 },
            SartConfig { iterations: 1, relaxation: 0.5, n_r: 0 },
        ] {
            assert!(sart_reconstruct(&stack, (8, 8, 8), [4.0; 3], &bad).is_err());
        }
    }

    #[test]
    fn sart_recovers_sphere_roughly() {
        let vol = generate_phantom(&sphere_spec(20.0, 0.5), (16, 16, 16), [4.0; 3]).unwrap();
        let geom = make_circular_geometry(12, 1000.0, 1500.0, (24, 24), 5.0).unwrap();
        let stack = drr(&vol, &geom, 128).unwrap();
        let cfg = SartConfig {
            iterations: 10,
            relaxation: 0.5,
            n_r: 128,
        };
        let rec = sart_reconstruct(&stack, (16, 16, 16), [4.0; 3], &cfg).unwrap();
        let db = psnr(&rec, &vol, 1.0).unwrap();
        assert!(db > 20.0, "sart psnr {db}");
    }

    #[test]
    fn fdk_sphere_contrast() {
        let vol = generate_phantom(&sphere_spec(24.0, 0.5), (16, 16, 16), [4.0; 3]).unwrap();
        let geom = make_circular_geometry(36, 1000.0, 1500.0, (32, 32), 4.0).unwrap();
        let stack = drr(&vol, &geom, 128).unwrap();
        let rec = fdk_reconstruct(&stack, (16, 16, 16), [4.0; 3]).unwrap();
        // Compare mean inside the sphere against the outer shell.
        let mut inside = (0.0, 0usize);
        let mut outside = (0.0, 0usize);
        for z in 0..16 {
            for y in 0..16 {
                for x in 0..16 {
                    let p = rec.voxel_center(x, y, z);
                    let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                    let val = rec.at(x, y, z) as f64;
                    if r < 16.0 {
                        inside = (inside.0 + val, inside.1 + 1);
                    } else if r > 30.0 {
                        outside = (outside.0 + val, outside.1 + 1);
                    }
                }
            }
        }
        let mi = inside.0 / inside.1 as f64;
        let mo = outside.0 / outside.1 as f64;
        assert!(
            mi - mo > 0.25,
            "fdk contrast too low: inside {mi}, outside {mo}"
        );
    }
}
