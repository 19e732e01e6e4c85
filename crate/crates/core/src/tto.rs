//! Test-time optimization: fine-tune a trained model on a single test
//! sample by minimizing the discrepancy between measured projections and
//! re-rendered ray integrals, with mu supplied by the model itself.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::diffcore::sgd_momentum_step;
use crate::error::{Error, Result};
use crate::gaussians::{GaussianGrads, GaussianSet};
use crate::geometry::Ray;
use crate::math::Vec3;
use crate::model::{
    build_gaussians, build_gaussians_backward, encode, encode_backward, predict_batch,
    predict_batch_backward, EncodeOut, ModelParams, PredictCache,
};
use crate::projector::ProjectionStack;
use crate::scalar::Scalar;

/// One supervised ray: geometry plus the measured accumulated attenuation.
#[derive(Debug, Clone)]
pub struct RaySample {
    pub ray: Ray,
    pub view: usize,
    pub pixel: (usize, usize),
    pub e_true: f64,
}

/// Hyperparameters of the fine-tuning loop.
#[derive(Debug, Clone, PartialEq)]
pub struct TtoConfig {
    pub steps: usize,
    pub lr: f64,
    pub rays_per_step: usize,
    pub n_r: usize,
}

impl Default for TtoConfig {
    fn default() -> Self {
        // Projection errors are in raw mm-scale units, so gradients run
        // around 1e5; 1e-8 keeps single steps small against that scale.
        Self {
            steps: 100,
            lr: 1e-8,
            rays_per_step: 256,
            n_r: 192,
        }
    }
}

/// Draw `n` detector pixels uniformly without replacement across all views.
pub fn sample_rays(stack: &ProjectionStack, n: usize, seed: u64) -> Result<Vec<RaySample>> {
    let (n_u, n_v) = stack.geometry.det_shape;
    let total = stack.n_views() * n_u * n_v;
    if n < 1 || n > total {
        return Err(Error::InvalidParameter(format!(
            "cannot draw {n} rays from {total} pixels"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, total, n);
    let mut out = Vec::with_capacity(n);
    for flat in picks {
        let view = flat / (n_u * n_v);
        let rest = flat % (n_u * n_v);
        let v = rest / n_u;
        let u = rest % n_u;
        let e_true = stack.pixel(view, u, v) as f64;
        out.push(RaySample {
            ray: stack.geometry.pixel_ray(view, (u as f64, v as f64)),
            view,
            pixel: (u, v),
            e_true,
        });
    }
    Ok(out)
}

/// Forward caches of one rendered ray, consumed by the backward pass.
pub struct RenderCache<T> {
    pred: PredictCache<T>,
    len: f64,
    n_r: usize,
}

/// Render the model's accumulated attenuation along `ray`: the uniform
/// (N_r + 1)-point rule with each mu sample taken from the model.
pub fn render_ray<T: Scalar>(
    params: &ModelParams<T>,
    enc: &EncodeOut<T>,
    gs: Option<&GaussianSet<T>>,
    stack: &ProjectionStack,
    ray: &Ray,
    n_r: usize,
) -> Result<(T, RenderCache<T>)> {
    assert!(n_r >= 1, "n_r must be >= 1");
    let points: Vec<Vec3> = (0..=n_r).map(|i| ray.at(i as f64 / n_r as f64)).collect();
    let (mu, pred) = predict_batch(params, &points, &enc.f, enc.stride_f, gs, &stack.geometry)?;
    let len = ray.length();
    let sum: T = mu.into_iter().sum();
    let e_hat = sum * T::from_f64c(len / n_r as f64);
    Ok((e_hat, RenderCache { pred, len, n_r }))
}

/// Backward of [`render_ray`]: every sample point receives the same
/// len / N_r factor times the output gradient.
pub fn render_ray_backward<T: Scalar>(
    params: &mut ModelParams<T>,
    cache: &RenderCache<T>,
    g_e: T,
    gs: Option<&GaussianSet<T>>,
    ggs: Option<&mut GaussianGrads<T>>,
    gf: &mut crate::diffcore::Tensor<T>,
) {
    let g_mu = g_e * T::from_f64c(cache.len / cache.n_r as f64);
    let gv = vec![g_mu; cache.n_r + 1];
    predict_batch_backward(params, &cache.pred, &gv, gs, ggs, gf);
}

/// Mean squared projection error over an explicit ray set (forward only).
pub fn projection_loss<T: Scalar>(
    params: &ModelParams<T>,
    stack: &ProjectionStack,
    rays: &[RaySample],
    lo: Vec3,
    hi: Vec3,
    n_r: usize,
) -> Result<f64> {
    let enc = encode(params, stack)?;
    let gs = if params.config.enable_gaussians {
        Some(build_gaussians(params, &enc.f_t, enc.stride_ft, &stack.geometry, lo, hi)?.0)
    } else {
        None
    };
    let residuals: Result<Vec<f64>> = rays
        .par_iter()
        .map(|rs| {
            let (e_hat, _) = render_ray(params, &enc, gs.as_ref(), stack, &rs.ray, n_r)?;
            Ok((e_hat.to_f64c() - rs.e_true).powi(2))
        })
        .collect();
    let residuals = residuals?;
    Ok(residuals.iter().sum::<f64>() / rays.len() as f64)
}

/// The full-pixel-set projection loss (independent of any sampling seed).
pub fn full_projection_loss<T: Scalar>(
    params: &ModelParams<T>,
    stack: &ProjectionStack,
    lo: Vec3,
    hi: Vec3,
    n_r: usize,
) -> Result<f64> {
    let (n_u, n_v) = stack.geometry.det_shape;
    let total = stack.n_views() * n_u * n_v;
    // Seed is irrelevant: drawing every pixel enumerates the full set.
    let rays = sample_rays(stack, total, 0)?;
    projection_loss(params, stack, &rays, lo, hi, n_r)
}

fn step_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64 + 1).wrapping_mul(0x94D0_49BB_1331_11EB)
}

/// Fine-tune all model parameters against the measured projections.
///
/// Each step draws a fresh ray minibatch, recomputes the encoder features
/// and Gaussian set (they depend on the updated weights), takes the mean
/// squared projection error, and applies one plain SGD step. Returns the
/// per-step loss log.
pub fn tto_finetune<T: Scalar>(
    params: &mut ModelParams<T>,
    stack: &ProjectionStack,
    lo: Vec3,
    hi: Vec3,
    config: &TtoConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if config.n_r < 1 || config.rays_per_step < 1 {
        return Err(Error::InvalidParameter(
            "tto requires n_r >= 1 and rays_per_step >= 1".into(),
        ));
    }
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let rays = sample_rays(stack, config.rays_per_step, step_seed(seed, step))?;
        let enc = encode(params, stack)?;
        let gs = if params.config.enable_gaussians {
            Some(build_gaussians(params, &enc.f_t, enc.stride_ft, &stack.geometry, lo, hi)?)
        } else {
            None
        };
        let gs_set = gs.as_ref().map(|(g, _)| g);

        // Forward over rays in parallel; backward sequentially in ray order
        // so gradient accumulation is deterministic.
        let rendered: Result<Vec<(T, RenderCache<T>)>> = rays
            .par_iter()
            .map(|rs| render_ray(params, &enc, gs_set, stack, &rs.ray, config.n_r))
            .collect();
        let rendered = rendered?;

        let mut loss = 0.0f64;
        let mut ggs = gs_set.map(|g| g.zero_grads());
        let mut gf = crate::diffcore::Tensor::zeros(&enc.f.shape);
        for (rs, (e_hat, cache)) in rays.iter().zip(&rendered) {
            let err = e_hat.to_f64c() - rs.e_true;
            loss += err * err;
            let g_e = T::from_f64c(2.0 * err / rays.len() as f64);
            render_ray_backward(params, cache, g_e, gs_set, ggs.as_mut(), &mut gf);
        }
        loss /= rays.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!(
                "tto loss is {loss} at step {step}"
            )));
        }

        let mut gf_t = crate::diffcore::Tensor::zeros(&enc.f_t.shape);
        if let (Some((gs, bc)), Some(ggs)) = (gs.as_ref(), ggs.as_ref()) {
            build_gaussians_backward(params, gs, bc, ggs, &mut gf_t);
        } else {
            // 2D-only ablation: the Gaussian head sits outside the graph.
            for l in params.gauss_head.layers.iter_mut() {
                l.w.seen_grad = true;
                l.b.seen_grad = true;
            }
        }
        encode_backward(params, &enc.cache, &gf_t, &gf)?;
        // Plain SGD: no momentum carry-over from training.
        sgd_momentum_step(params, config.lr, 0.0)?;
        log.push(loss);
    }
    Ok(log)
}
