//! Explicit 3D Gaussian feature field.
//!
//! Each Gaussian carries a fixed initial position (a grid centroid), a
//! learned offset, a feature vector, a unit quaternion, and per-axis scales.
//! Point features are the weight-summed features of the nearest Gaussians,
//! where the weight is the normalized anisotropic Gaussian density.

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::scalar::Scalar;

pub const TWO_PI_POW_NEG_3_2: f64 = 0.06349363593424097; // (2*pi)^(-3/2)

/// Lower bound on |Sigma| before the weight is considered singular.
const DET_EPS: f64 = 1e-30;

/// Scale bounds relative to the grid pitch.
pub const SCALE_MIN_FACTOR: f64 = 1e-3;
pub const SCALE_MAX_FACTOR: f64 = 4.0;

/// Centroids of a v x v x v uniform partition of `bounds`, x-fastest.
pub fn init_positions(v: usize, lo: Vec3, hi: Vec3) -> Result<Vec<Vec3>> {
    if v < 1 {
        return Err(Error::InvalidParameter("grid resolution must be >= 1".into()));
    }
    if (0..3).any(|i| hi[i] <= lo[i]) {
        return Err(Error::InvalidParameter(format!(
            "degenerate bounds {lo:?}..{hi:?}"
        )));
    }
    let cell = [
        (hi[0] - lo[0]) / v as f64,
        (hi[1] - lo[1]) / v as f64,
        (hi[2] - lo[2]) / v as f64,
    ];
    let mut out = Vec::with_capacity(v * v * v);
    for iz in 0..v {
        for iy in 0..v {
            for ix in 0..v {
                out.push([
                    lo[0] + (ix as f64 + 0.5) * cell[0],
                    lo[1] + (iy as f64 + 0.5) * cell[1],
                    lo[2] + (iz as f64 + 0.5) * cell[2],
                ]);
            }
        }
    }
    Ok(out)
}

/// Rotation matrix of a unit quaternion (r1, r2, r3, r4).
pub fn rotation_from_quaternion<T: Scalar>(r: [T; 4]) -> [[T; 3]; 3] {
    let two = T::from_f64c(2.0);
    let one = T::one();
    let (r1, r2, r3, r4) = (r[0], r[1], r[2], r[3]);
    [
        [
            one - two * (r3 * r3 + r4 * r4),
            two * (r2 * r3 - r1 * r4),
            two * (r2 * r4 + r1 * r3),
        ],
        [
            two * (r2 * r3 + r1 * r4),
            one - two * (r2 * r2 + r4 * r4),
            two * (r3 * r4 - r1 * r2),
        ],
        [
            two * (r2 * r4 - r1 * r3),
            two * (r3 * r4 + r1 * r2),
            one - two * (r2 * r2 + r3 * r3),
        ],
    ]
}

/// Normalize a raw quaternion; errors when its norm underflows.
pub fn normalize_quaternion<T: Scalar>(r: [T; 4]) -> Result<[T; 4]> {
    let n2 = r.iter().fold(T::zero(), |acc, &v| acc + v * v);
    let n = n2.sqrt();
    if n.to_f64c() < 1e-12 {
        return Err(Error::ZeroNormQuaternion);
    }
    Ok([r[0] / n, r[1] / n, r[2] / n, r[3] / n])
}

/// Covariance of a Gaussian: with L = M_r M_s this is the symmetric
/// positive-definite product M_r diag(s^2) M_r^T.
pub fn build_covariance<T: Scalar>(r: [T; 4], s: [T; 3]) -> [[T; 3]; 3] {
    let m = rotation_from_quaternion(r);
    let s2 = [s[0] * s[0], s[1] * s[1], s[2] * s[2]];
    let mut sigma = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = T::zero();
            for a in 0..3 {
                acc = acc + m[i][a] * s2[a] * m[j][a];
            }
            sigma[i][j] = acc;
        }
    }
    sigma
}

fn det3<T: Scalar>(m: &[[T; 3]; 3]) -> T {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn inverse3<T: Scalar>(m: &[[T; 3]; 3], det: T) -> [[T; 3]; 3] {
    let inv_det = T::one() / det;
    let mut inv = [[T::zero(); 3]; 3];
    inv[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv_det;
    inv[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv_det;
    inv[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv_det;
    inv[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv_det;
    inv[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv_det;
    inv[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv_det;
    inv[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv_det;
    inv[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv_det;
    inv[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv_det;
    inv
}

/// Normalized anisotropic Gaussian density of an arbitrary SPD covariance:
/// w = (2 pi)^(-3/2) |Sigma|^(-1/2) exp(-1/2 (p-u)^T Sigma^-1 (p-u)).
pub fn gaussian_weight<T: Scalar>(p: [T; 3], u: [T; 3], sigma: &[[T; 3]; 3]) -> Result<T> {
    let det = det3(sigma);
    if det.to_f64c() < DET_EPS {
        return Err(Error::SingularCovariance(det.to_f64c()));
    }
    let inv = inverse3(sigma, det);
    let d = [p[0] - u[0], p[1] - u[1], p[2] - u[2]];
    let mut q = T::zero();
    for i in 0..3 {
        for j in 0..3 {
            q = q + d[i] * inv[i][j] * d[j];
        }
    }
    let norm = T::from_f64c(TWO_PI_POW_NEG_3_2) / det.sqrt();
    Ok(norm * (-q / T::from_f64c(2.0)).exp())
}

/// Indices of the k nearest initial positions to `p` by exhaustive scan.
/// Ties break toward the ascending index.
pub fn nearest_k_brute(p: Vec3, u_hat: &[Vec3], k: usize) -> Vec<usize> {
    assert!(k <= u_hat.len());
    let mut dist: Vec<(f64, usize)> = u_hat
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let dx = p[0] - u[0];
            let dy = p[1] - u[1];
            let dz = p[2] - u[2];
            (dx * dx + dy * dy + dz * dz, i)
        })
        .collect();
    dist.sort_by(|a, b| a.partial_cmp(b).unwrap());
    dist[..k].iter().map(|&(_, i)| i).collect()
}

/// Learned Gaussian set over a fixed v^3 grid of initial positions.
///
/// All tensors hold post-activation values: unit quaternions, scales within
/// [s_min, s_max], offsets within half a cell of the home centroid.
#[derive(Debug, Clone)]
pub struct GaussianSet<T> {
    pub v: usize,
    pub lo: Vec3,
    pub hi: Vec3,
    pub cell: Vec3,
    pub s_min: f64,
    pub s_max: f64,
    pub u_hat: Vec<Vec3>,
    pub delta_u: Vec<[T; 3]>,
    /// [n_g, c_g]
    pub feat: Tensor<T>,
    pub quat: Vec<[T; 4]>,
    pub scale: Vec<[T; 3]>,
}

/// Gradients with respect to the activated Gaussian parameters.
#[derive(Debug, Clone)]
pub struct GaussianGrads<T> {
    pub delta_u: Vec<[T; 3]>,
    pub feat: Tensor<T>,
    pub quat: Vec<[T; 4]>,
    pub scale: Vec<[T; 3]>,
}

impl<T: Scalar> GaussianSet<T> {
    pub fn n_g(&self) -> usize {
        self.u_hat.len()
    }

    pub fn c_g(&self) -> usize {
        self.feat.shape[1]
    }

    pub fn zero_grads(&self) -> GaussianGrads<T> {
        GaussianGrads {
            delta_u: vec![[T::zero(); 3]; self.n_g()],
            feat: Tensor::zeros(&self.feat.shape),
            quat: vec![[T::zero(); 4]; self.n_g()],
            scale: vec![[T::zero(); 3]; self.n_g()],
        }
    }

    /// k nearest initial positions; a grid walk for small k, exhaustive
    /// otherwise. Matches [`nearest_k_brute`] exactly, including ties.
    pub fn nearest_k(&self, p: Vec3, k: usize) -> Vec<usize> {
        // Outside the grid the nearest set can run along a boundary face
        // beyond the 3^3 neighborhood, so only in-bounds points take the
        // grid walk.
        let outside = (0..3).any(|i| p[i] < self.lo[i] || p[i] > self.hi[i]);
        if k > 4 || self.v < 3 || outside {
            return nearest_k_brute(p, &self.u_hat, k);
        }
        let v = self.v;
        let cell_of = |x: f64, lo: f64, c: f64| -> usize {
            let i = ((x - lo) / c).floor();
            (i.max(0.0) as usize).min(v - 1)
        };
        let cx = cell_of(p[0], self.lo[0], self.cell[0]);
        let cy = cell_of(p[1], self.lo[1], self.cell[1]);
        let cz = cell_of(p[2], self.lo[2], self.cell[2]);
        let mut cand: Vec<(f64, usize)> = Vec::with_capacity(27);
        for iz in cz.saturating_sub(1)..=(cz + 1).min(v - 1) {
            for iy in cy.saturating_sub(1)..=(cy + 1).min(v - 1) {
                for ix in cx.saturating_sub(1)..=(cx + 1).min(v - 1) {
                    let idx = (iz * v + iy) * v + ix;
                    let u = self.u_hat[idx];
                    let dx = p[0] - u[0];
                    let dy = p[1] - u[1];
                    let dz = p[2] - u[2];
                    cand.push((dx * dx + dy * dy + dz * dz, idx));
                }
            }
        }
        cand.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cand[..k].iter().map(|&(_, i)| i).collect()
    }
}

/// Per-neighbor intermediates cached by [`query_field`] for its backward.
pub struct QueryFieldCache<T> {
    pub neighbors: Vec<NeighborCache<T>>,
}

pub struct NeighborCache<T> {
    pub idx: usize,
    pub w: T,
    pub d: [T; 3],
    pub y: [T; 3],
    pub rot: [[T; 3]; 3],
}

/// Eq.-style truncated field query: sum of w(p, G_i) * F_i over the k
/// Gaussians whose initial positions are nearest to p.
pub fn query_field<T: Scalar>(
    p: Vec3,
    gs: &GaussianSet<T>,
    k: usize,
) -> Result<(Vec<T>, QueryFieldCache<T>)> {
    let c_g = gs.c_g();
    let mut out = vec![T::zero(); c_g];
    let mut neighbors = Vec::with_capacity(k);
    for idx in gs.nearest_k(p, k) {
        let r = gs.quat[idx];
        let s = gs.scale[idx];
        let det_sq = s[0] * s[1] * s[2];
        if (det_sq * det_sq).to_f64c() < DET_EPS {
            return Err(Error::SingularCovariance((det_sq * det_sq).to_f64c()));
        }
        let rot = rotation_from_quaternion(r);
        let u = gs.u_hat[idx];
        let du = gs.delta_u[idx];
        let d = [
            T::from_f64c(p[0]) - (T::from_f64c(u[0]) + du[0]),
            T::from_f64c(p[1]) - (T::from_f64c(u[1]) + du[1]),
            T::from_f64c(p[2]) - (T::from_f64c(u[2]) + du[2]),
        ];
        // Rotate into the Gaussian frame: y = M_r^T d.
        let mut y = [T::zero(); 3];
        for i in 0..3 {
            y[i] = rot[0][i] * d[0] + rot[1][i] * d[1] + rot[2][i] * d[2];
        }
        let mut q = T::zero();
        for i in 0..3 {
            q = q + (y[i] / s[i]) * (y[i] / s[i]);
        }
        let w = T::from_f64c(TWO_PI_POW_NEG_3_2) / det_sq * (-q / T::from_f64c(2.0)).exp();
        let feat = &gs.feat.data[idx * c_g..(idx + 1) * c_g];
        for (o, &f) in out.iter_mut().zip(feat) {
            *o = *o + w * f;
        }
        neighbors.push(NeighborCache { idx, w, d, y, rot });
    }
    Ok((out, QueryFieldCache { neighbors }))
}

/// Derivative matrices dM_r/dr_j of the Eq.-1 rotation matrix.
fn rotation_grads<T: Scalar>(r: [T; 4]) -> [[[T; 3]; 3]; 4] {
    let two = T::from_f64c(2.0);
    let four = T::from_f64c(4.0);
    let z = T::zero();
    let (w, x, y, q) = (r[0], r[1], r[2], r[3]);
    [
        [
            [z, -two * q, two * y],
            [two * q, z, -two * x],
            [-two * y, two * x, z],
        ],
        [
            [z, two * y, two * q],
            [two * y, -four * x, -two * w],
            [two * q, two * w, -four * x],
        ],
        [
            [-four * y, two * x, two * w],
            [two * x, z, two * q],
            [-two * w, two * q, -four * y],
        ],
        [
            [-four * q, -two * w, two * x],
            [two * w, -four * q, two * y],
            [two * x, two * y, z],
        ],
    ]
}

/// Backward of [`query_field`]: scatter `gout` into the per-Gaussian grads
/// (with respect to the activated offset, feature, quaternion, and scale).
pub fn query_field_backward<T: Scalar>(
    gs: &GaussianSet<T>,
    cache: &QueryFieldCache<T>,
    gout: &[T],
    grads: &mut GaussianGrads<T>,
) {
    let c_g = gs.c_g();
    for nb in &cache.neighbors {
        let idx = nb.idx;
        let s = gs.scale[idx];
        let feat = &gs.feat.data[idx * c_g..(idx + 1) * c_g];

        // d(out)/dw and d(out)/dF.
        let mut gw = T::zero();
        for ci in 0..c_g {
            gw = gw + gout[ci] * feat[ci];
            let gi = idx * c_g + ci;
            grads.feat.data[gi] = grads.feat.data[gi] + nb.w * gout[ci];
        }

        let ys2 = [
            nb.y[0] / (s[0] * s[0]),
            nb.y[1] / (s[1] * s[1]),
            nb.y[2] / (s[2] * s[2]),
        ];

        // dw/d(delta_u) = w * M_r * (y / s^2).
        for i in 0..3 {
            let mut acc = T::zero();
            for a in 0..3 {
                acc = acc + nb.rot[i][a] * ys2[a];
            }
            grads.delta_u[idx][i] = grads.delta_u[idx][i] + gw * nb.w * acc;
        }

        // dw/ds_j = w * (y_j^2 / s_j^3 - 1 / s_j).
        for j in 0..3 {
            let term = nb.y[j] * nb.y[j] / (s[j] * s[j] * s[j]) - T::one() / s[j];
            grads.scale[idx][j] = grads.scale[idx][j] + gw * nb.w * term;
        }

        // dw/dr_j = -w * sum_i (y_i / s_i^2) * ((dM/dr_j)^T d)_i.
        let dm = rotation_grads(gs.quat[idx]);
        for j in 0..4 {
            let mut acc = T::zero();
            for i in 0..3 {
                let dy_i =
                    dm[j][0][i] * nb.d[0] + dm[j][1][i] * nb.d[1] + dm[j][2][i] * nb.d[2];
                acc = acc + ys2[i] * dy_i;
            }
            grads.quat[idx][j] = grads.quat[idx][j] - gw * nb.w * acc;
        }
    }
}

/// Intermediates of [`activate_gaussians`] needed by its backward.
pub struct ActivationCache<T> {
    tanh_du: Vec<[T; 3]>,
    sig_s: Vec<[T; 3]>,
    raw_quat_norm: Vec<T>,
}

/// Raw head output layout per Gaussian: [delta_u(3) | feat(c_g) | quat(4) | scale(3)].
pub fn head_width(c_g: usize) -> usize {
    3 + c_g + 4 + 3
}

/// Map raw head outputs to a valid Gaussian set:
/// delta_u = tanh(raw) * cell/2, quaternion = normalize(raw + (1,0,0,0)),
/// scale = s_min + (s_max - s_min) * sigmoid(raw), features pass through.
pub fn activate_gaussians<T: Scalar>(
    raw: &Tensor<T>,
    v: usize,
    lo: Vec3,
    hi: Vec3,
) -> Result<(GaussianSet<T>, ActivationCache<T>)> {
    let u_hat = init_positions(v, lo, hi)?;
    let n_g = u_hat.len();
    let c_g = raw.shape[1] - 10;
    if raw.shape[0] != n_g {
        return Err(Error::ShapeMismatch(format!(
            "expected {} raw rows, got {}",
            n_g, raw.shape[0]
        )));
    }
    let cell = [
        (hi[0] - lo[0]) / v as f64,
        (hi[1] - lo[1]) / v as f64,
        (hi[2] - lo[2]) / v as f64,
    ];
    let cell_s = (cell[0] + cell[1] + cell[2]) / 3.0;
    let s_min = SCALE_MIN_FACTOR * cell_s;
    let s_max = SCALE_MAX_FACTOR * cell_s;

    let width = head_width(c_g);
    let mut delta_u = Vec::with_capacity(n_g);
    let mut feat = Tensor::zeros(&[n_g, c_g]);
    let mut quat = Vec::with_capacity(n_g);
    let mut scale = Vec::with_capacity(n_g);
    let mut tanh_du = Vec::with_capacity(n_g);
    let mut sig_s = Vec::with_capacity(n_g);
    let mut raw_quat_norm = Vec::with_capacity(n_g);

    for g in 0..n_g {
        let row = &raw.data[g * width..(g + 1) * width];
        let mut du = [T::zero(); 3];
        let mut th = [T::zero(); 3];
        for i in 0..3 {
            let t = row[i].tanh();
            th[i] = t;
            du[i] = t * T::from_f64c(cell[i] / 2.0);
        }
        feat.data[g * c_g..(g + 1) * c_g].copy_from_slice(&row[3..3 + c_g]);

        let mut rq = [
            row[3 + c_g] + T::one(),
            row[3 + c_g + 1],
            row[3 + c_g + 2],
            row[3 + c_g + 3],
        ];
        let n = rq.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt();
        if n.to_f64c() < 1e-12 {
            return Err(Error::ZeroNormQuaternion);
        }
        for x in &mut rq {
            *x = *x / n;
        }

        let mut s = [T::zero(); 3];
        let mut sg = [T::zero(); 3];
        for i in 0..3 {
            let sig = row[3 + c_g + 4 + i].sigmoid();
            sg[i] = sig;
            s[i] = T::from_f64c(s_min) + T::from_f64c(s_max - s_min) * sig;
        }

        delta_u.push(du);
        quat.push(rq);
        scale.push(s);
        tanh_du.push(th);
        sig_s.push(sg);
        raw_quat_norm.push(n);
    }

    Ok((
        GaussianSet {
            v,
            lo,
            hi,
            cell,
            s_min,
            s_max,
            u_hat,
            delta_u,
            feat,
            quat,
            scale,
        },
        ActivationCache {
            tanh_du,
            sig_s,
            raw_quat_norm,
        },
    ))
}

/// Chain activated-parameter grads back to the raw head outputs.
pub fn activate_backward<T: Scalar>(
    gs: &GaussianSet<T>,
    cache: &ActivationCache<T>,
    grads: &GaussianGrads<T>,
) -> Tensor<T> {
    let n_g = gs.n_g();
    let c_g = gs.c_g();
    let width = head_width(c_g);
    let mut graw = Tensor::zeros(&[n_g, width]);
    for g in 0..n_g {
        let row = &mut graw.data[g * width..(g + 1) * width];
        for i in 0..3 {
            let t = cache.tanh_du[g][i];
            row[i] = grads.delta_u[g][i] * (T::one() - t * t) * T::from_f64c(gs.cell[i] / 2.0);
        }
        row[3..3 + c_g].copy_from_slice(&grads.feat.data[g * c_g..(g + 1) * c_g]);

        // Quaternion normalization: g_t = (g_r - r (r . g_r)) / |t|.
        let r = gs.quat[g];
        let gr = grads.quat[g];
        let dot = (0..4).fold(T::zero(), |acc, i| acc + r[i] * gr[i]);
        for i in 0..4 {
            row[3 + c_g + i] = (gr[i] - r[i] * dot) / cache.raw_quat_norm[g];
        }

        for i in 0..3 {
            let sig = cache.sig_s[g][i];
            row[3 + c_g + 4 + i] = grads.scale[g][i]
                * T::from_f64c(gs.s_max - gs.s_min)
                * sig
                * (T::one() - sig);
        }
    }
    graw
}
