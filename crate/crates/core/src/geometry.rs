//! Circular cone-beam acquisition geometry.
//!
//! Conventions: isocenter at the world origin, rotation axis = world z,
//! angle 0 places the source on +x. Angles cover 180 degrees
//! endpoint-exclusively, i.e. view k sits at k*pi/K.

use crate::error::{Error, Result};
use crate::math::{self, Vec3};

/// Perspective denominator below this is treated as "behind the source".
const BEHIND_EPS: f64 = 1e-9;

/// Pose of a single view: source position plus detector raster frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPose {
    pub angle: f64,
    pub source_pos: Vec3,
    /// World position of the center of detector pixel (0, 0).
    pub detector_origin: Vec3,
    pub detector_u_axis: Vec3,
    pub detector_v_axis: Vec3,
}

/// Full circular cone-beam scan description.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanGeometry {
    pub n_views: usize,
    /// Source-to-isocenter distance in mm.
    pub sid: f64,
    /// Source-to-detector distance in mm.
    pub sdd: f64,
    /// Detector raster (n_u, n_v) in pixels.
    pub det_shape: (usize, usize),
    /// Detector pixel pitch in mm.
    pub det_spacing: f64,
    pub poses: Vec<ViewPose>,
}

/// Source-to-detector ray, parameterized as R(t) = p_s + t (p_d - p_s).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub p_s: Vec3,
    pub p_d: Vec3,
}

impl Ray {
    #[inline]
    pub fn at(&self, t: f64) -> Vec3 {
        math::lerp(self.p_s, self.p_d, t)
    }

    #[inline]
    pub fn length(&self) -> f64 {
        math::norm(math::sub(self.p_d, self.p_s))
    }
}

/// Build K poses at angles k*pi/K on a circle of radius `sid` in the axial
/// plane, detector plane orthogonal to the principal ray at distance `sdd`
/// from the source and centered on it.
pub fn make_circular_geometry(
    k_views: usize,
    sid: f64,
    sdd: f64,
    det_shape: (usize, usize),
    det_spacing: f64,
) -> Result<ScanGeometry> {
    if k_views < 1 {
        return Err(Error::InvalidParameter("k_views must be >= 1".into()));
    }
    if !(sid > 0.0 && sid < sdd) {
        return Err(Error::InvalidParameter(format!(
            "need 0 < sid < sdd, got sid={sid}, sdd={sdd}"
        )));
    }
    if det_shape.0 < 2 || det_shape.1 < 2 {
        return Err(Error::InvalidParameter(format!(
            "detector shape components must be >= 2, got {det_shape:?}"
        )));
    }
    if det_spacing <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "det_spacing must be > 0, got {det_spacing}"
        )));
    }

    let (n_u, n_v) = det_shape;
    let mut poses = Vec::with_capacity(k_views);
    for k in 0..k_views {
        let angle = k as f64 * std::f64::consts::PI / k_views as f64;
        let (s, c) = angle.sin_cos();
        let source_pos = [sid * c, sid * s, 0.0];
        // Principal ray direction: source toward isocenter.
        let dir = [-c, -s, 0.0];
        let u_axis = [-s, c, 0.0];
        let v_axis = [0.0, 0.0, 1.0];
        let det_center = math::add(source_pos, math::scale(dir, sdd));
        let cu = (n_u as f64 - 1.0) / 2.0;
        let cv = (n_v as f64 - 1.0) / 2.0;
        let detector_origin = math::sub(
            math::sub(det_center, math::scale(u_axis, cu * det_spacing)),
            math::scale(v_axis, cv * det_spacing),
        );
        poses.push(ViewPose {
            angle,
            source_pos,
            detector_origin,
            detector_u_axis: u_axis,
            detector_v_axis: v_axis,
        });
    }

    Ok(ScanGeometry {
        n_views: k_views,
        sid,
        sdd,
        det_shape,
        det_spacing,
        poses,
    })
}

impl ScanGeometry {
    /// Principal-ray unit direction of view k (source toward detector).
    #[inline]
    fn principal_dir(&self, k: usize) -> Vec3 {
        let (s, c) = self.poses[k].angle.sin_cos();
        [-c, -s, 0.0]
    }

    /// Perspective projection of world point `p` onto the detector of view
    /// `k`, in continuous pixel units of the raster.
    pub fn project_point(&self, k: usize, p: Vec3) -> Result<(f64, f64)> {
        let pose = &self.poses[k];
        let dir = self.principal_dir(k);
        let rel = math::sub(p, pose.source_pos);
        let depth = math::dot(rel, dir);
        if depth <= BEHIND_EPS {
            return Err(Error::BehindSource(depth));
        }
        let t = self.sdd / depth;
        let q = math::add(pose.source_pos, math::scale(rel, t));
        let d = math::sub(q, pose.detector_origin);
        let u = math::dot(d, pose.detector_u_axis) / self.det_spacing;
        let v = math::dot(d, pose.detector_v_axis) / self.det_spacing;
        Ok((u, v))
    }

    /// Ray from the source of view `k` through continuous detector
    /// coordinate `uv` (which may lie outside the raster).
    pub fn pixel_ray(&self, k: usize, uv: (f64, f64)) -> Ray {
        let pose = &self.poses[k];
        let p_d = math::add(
            math::add(
                pose.detector_origin,
                math::scale(pose.detector_u_axis, uv.0 * self.det_spacing),
            ),
            math::scale(pose.detector_v_axis, uv.1 * self.det_spacing),
        );
        Ray {
            p_s: pose.source_pos,
            p_d,
        }
    }

    /// Detector center in pixel coordinates: ((n_u-1)/2, (n_v-1)/2).
    #[inline]
    pub fn detector_center(&self) -> (f64, f64) {
        (
            (self.det_shape.0 as f64 - 1.0) / 2.0,
            (self.det_shape.1 as f64 - 1.0) / 2.0,
        )
    }
}
