//! Voxel volumes and procedural ellipsoid phantoms.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::math::{self, Vec3};

/// Regular 3D attenuation grid with physical spacing.
///
/// `data` is stored x-fastest, then y, then z; values are normalized
/// attenuation in [0, 1]. `origin` is the world position of the center of
/// voxel (0, 0, 0).
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelVolume {
    pub dims: (usize, usize, usize),
    pub spacing: Vec3,
    pub origin: Vec3,
    pub data: Vec<f32>,
}

impl VoxelVolume {
    pub fn zeros(dims: (usize, usize, usize), spacing: Vec3, origin: Vec3) -> Self {
        Self {
            dims,
            spacing,
            origin,
            data: vec![0.0; dims.0 * dims.1 * dims.2],
        }
    }

    /// Cubic volume of `n` voxels per axis, centered on the world origin.
    pub fn centered(dims: (usize, usize, usize), spacing: Vec3) -> Self {
        let origin = [
            -((dims.0 as f64 - 1.0) / 2.0) * spacing[0],
            -((dims.1 as f64 - 1.0) / 2.0) * spacing[1],
            -((dims.2 as f64 - 1.0) / 2.0) * spacing[2],
        ];
        Self::zeros(dims, spacing, origin)
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims.1 + y) * self.dims.0 + x
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// World position of the center of voxel (x, y, z).
    #[inline]
    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vec3 {
        [
            self.origin[0] + x as f64 * self.spacing[0],
            self.origin[1] + y as f64 * self.spacing[1],
            self.origin[2] + z as f64 * self.spacing[2],
        ]
    }

    /// Axis-aligned bounding box spanned by the voxel centers.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let hi = [
            self.origin[0] + (self.dims.0 as f64 - 1.0) * self.spacing[0],
            self.origin[1] + (self.dims.1 as f64 - 1.0) * self.spacing[1],
            self.origin[2] + (self.dims.2 as f64 - 1.0) * self.spacing[2],
        ];
        (self.origin, hi)
    }

    pub fn same_shape(&self, other: &VoxelVolume) -> bool {
        self.dims == other.dims
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// Trilinear interpolation among the 8 voxel centers surrounding `p`.
/// Points outside the voxel-center bounding box return 0.
pub fn sample_trilinear(vol: &VoxelVolume, p: Vec3) -> f64 {
    let (nx, ny, nz) = vol.dims;
    let gx = (p[0] - vol.origin[0]) / vol.spacing[0];
    let gy = (p[1] - vol.origin[1]) / vol.spacing[1];
    let gz = (p[2] - vol.origin[2]) / vol.spacing[2];
    if gx < 0.0 || gy < 0.0 || gz < 0.0 {
        return 0.0;
    }
    if gx > (nx - 1) as f64 || gy > (ny - 1) as f64 || gz > (nz - 1) as f64 {
        return 0.0;
    }
    let ix = (gx.floor() as usize).min(nx.saturating_sub(2));
    let iy = (gy.floor() as usize).min(ny.saturating_sub(2));
    let iz = (gz.floor() as usize).min(nz.saturating_sub(2));
    let fx = gx - ix as f64;
    let fy = gy - iy as f64;
    let fz = gz - iz as f64;

    let c = |dx: usize, dy: usize, dz: usize| vol.at(ix + dx, iy + dy, iz + dz) as f64;
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let x00 = lerp(c(0, 0, 0), c(1, 0, 0), fx);
    let x10 = lerp(c(0, 1, 0), c(1, 1, 0), fx);
    let x01 = lerp(c(0, 0, 1), c(1, 0, 1), fx);
    let x11 = lerp(c(0, 1, 1), c(1, 1, 1), fx);
    let y0 = lerp(x00, x10, fy);
    let y1 = lerp(x01, x11, fy);
    lerp(y0, y1, fz)
}

/// The 8 (flat index, weight) taps of a trilinear lookup at `p`, or None
/// outside the voxel-center bounding box. Weights sum to 1 inside;
/// [`sample_trilinear`] is exactly the weighted sum over these taps.
pub fn trilinear_taps(vol: &VoxelVolume, p: Vec3) -> Option<[(usize, f64); 8]> {
    let (nx, ny, nz) = vol.dims;
    let gx = (p[0] - vol.origin[0]) / vol.spacing[0];
    let gy = (p[1] - vol.origin[1]) / vol.spacing[1];
    let gz = (p[2] - vol.origin[2]) / vol.spacing[2];
    if gx < 0.0 || gy < 0.0 || gz < 0.0 {
        return None;
    }
    if gx > (nx - 1) as f64 || gy > (ny - 1) as f64 || gz > (nz - 1) as f64 {
        return None;
    }
    let ix = (gx.floor() as usize).min(nx.saturating_sub(2));
    let iy = (gy.floor() as usize).min(ny.saturating_sub(2));
    let iz = (gz.floor() as usize).min(nz.saturating_sub(2));
    let fx = gx - ix as f64;
    let fy = gy - iy as f64;
    let fz = gz - iz as f64;
    let mut taps = [(0usize, 0.0f64); 8];
    let mut i = 0;
    for (dz, wz) in [(0usize, 1.0 - fz), (1, fz)] {
        for (dy, wy) in [(0usize, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0usize, 1.0 - fx), (1, fx)] {
                taps[i] = (vol.index(ix + dx, iy + dy, iz + dz), wx * wy * wz);
                i += 1;
            }
        }
    }
    Some(taps)
}

/// One additive ellipsoid of a procedural phantom.
#[derive(Debug, Clone, PartialEq)]
pub struct Ellipsoid {
    pub center: Vec3,
    pub semi_axes: Vec3,
    pub z_rotation: f64,
    pub value: f64,
}

impl Ellipsoid {
    /// True when `p` lies inside or on the ellipsoid surface.
    pub fn contains(&self, p: Vec3) -> bool {
        let d = math::rotate_z(math::sub(p, self.center), -self.z_rotation);
        let q = (d[0] / self.semi_axes[0]).powi(2)
            + (d[1] / self.semi_axes[1]).powi(2)
            + (d[2] / self.semi_axes[2]).powi(2);
        q <= 1.0
    }
}

/// Additive-ellipsoid phantom description.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PhantomSpec {
    pub ellipsoids: Vec<Ellipsoid>,
}

/// Rasterize a phantom spec into a centered volume. Each voxel value is the
/// sum of ellipsoid contributions at the voxel center, clamped to [0, 1].
pub fn generate_phantom(
    spec: &PhantomSpec,
    dims: (usize, usize, usize),
    spacing: Vec3,
) -> Result<VoxelVolume> {
    if dims.0 < 8 || dims.1 < 8 || dims.2 < 8 {
        return Err(Error::InvalidParameter(format!(
            "phantom dims must be >= 8 per axis, got {dims:?}"
        )));
    }
    for e in &spec.ellipsoids {
        if e.semi_axes.iter().any(|&a| a <= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "non-positive ellipsoid semi-axis {:?}",
                e.semi_axes
            )));
        }
    }
    let mut vol = VoxelVolume::centered(dims, spacing);
    for z in 0..dims.2 {
        for y in 0..dims.1 {
            for x in 0..dims.0 {
                let p = vol.voxel_center(x, y, z);
                let mut v = 0.0;
                for e in &spec.ellipsoids {
                    if e.contains(p) {
                        v += e.value;
                    }
                }
                let i = vol.index(x, y, z);
                vol.data[i] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(vol)
}

/// Single centered sphere of the given radius and value.
pub fn sphere_spec(radius: f64, value: f64) -> PhantomSpec {
    PhantomSpec {
        ellipsoids: vec![Ellipsoid {
            center: [0.0; 3],
            semi_axes: [radius; 3],
            z_rotation: 0.0,
            value,
        }],
    }
}

/// Seeded random phantom family: an outer body ellipsoid plus a handful of
/// internal structures. Stand-in for real CT scans in training/eval sets.
pub fn random_phantom_spec(seed: u64, half_extent: f64) -> PhantomSpec {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let body_axes = [
        half_extent * rng.gen_range(0.60..0.85),
        half_extent * rng.gen_range(0.60..0.85),
        half_extent * rng.gen_range(0.60..0.85),
    ];
    let mut ellipsoids = vec![Ellipsoid {
        center: [0.0; 3],
        semi_axes: body_axes,
        z_rotation: rng.gen_range(0.0..std::f64::consts::PI),
        value: rng.gen_range(0.20..0.30),
    }];
    let n_inner = rng.gen_range(2..=4);
    for _ in 0..n_inner {
        let axes = [
            half_extent * rng.gen_range(0.10..0.35),
            half_extent * rng.gen_range(0.10..0.35),
            half_extent * rng.gen_range(0.10..0.35),
        ];
        let center = [
            rng.gen_range(-0.4..0.4) * body_axes[0],
            rng.gen_range(-0.4..0.4) * body_axes[1],
            rng.gen_range(-0.4..0.4) * body_axes[2],
        ];
        let sign = if rng.gen_bool(0.35) { -1.0 } else { 1.0 };
        ellipsoids.push(Ellipsoid {
            center,
            semi_axes: axes,
            z_rotation: rng.gen_range(0.0..std::f64::consts::PI),
            value: sign * rng.gen_range(0.10..0.45),
        });
    }
    PhantomSpec { ellipsoids }
}
