//! End-to-end reconstruction model: shared 2D encoder with two feature taps,
//! Gaussian parameter prediction from the intermediate tap, and hybrid
//! 2D+3D attenuation decoding, plus the training loop and volume
//! reconstruction.

use rand::SeedableRng;
use rand::{seq::SliceRandom, Rng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::diffcore::sample::bilinear_taps;
use crate::diffcore::{
    cat_channels, cat_channels_backward, lr_at_epoch, max_over_views,
    sgd_momentum_step, upsample2, upsample2_backward, Conv2d, Linear, Mlp, MlpCache, Param,
    ParamSet, Tensor,
};
use crate::error::{Error, Result};
use crate::gaussians::{
    activate_backward, activate_gaussians, head_width, query_field, query_field_backward,
    ActivationCache, GaussianGrads, GaussianSet, QueryFieldCache,
};
use crate::geometry::ScanGeometry;
use crate::math::Vec3;
use crate::projector::ProjectionStack;
use crate::scalar::Scalar;
use crate::volume::{sample_trilinear, VoxelVolume};

/// Hyperparameters of the model and its training loop.
///
/// Defaults are desk-scale; the paper-scale values (C = 128, C_t = 1024,
/// C_g = 128, V = 12) remain expressible.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub k_views: usize,
    pub det_shape: (usize, usize),
    /// Final (decoder) feature channels C.
    pub c: usize,
    /// Intermediate tap channels C^t; must equal the last encoder width.
    pub c_t: usize,
    /// Gaussian feature channels C^g.
    pub c_g: usize,
    /// Gaussian grid resolution V (N_g = V^3).
    pub v: usize,
    /// Off = 2D-only ablation: the Gaussian feature slot is zeroed and the
    /// Gaussian head receives no gradient.
    pub enable_gaussians: bool,
    pub encoder_widths: [usize; 4],
    pub gauss_head_hidden: Vec<usize>,
    pub atten_head_hidden: Vec<usize>,
    /// Gaussians per field query (3 per the truncation rule; N_g allowed).
    pub nearest_k: usize,
    pub epochs: usize,
    pub points_per_sample: usize,
    pub lr0: f64,
    pub momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k_views: 6,
            det_shape: (128, 128),
            c: 32,
            c_t: 128,
            c_g: 32,
            v: 8,
            enable_gaussians: true,
            encoder_widths: [16, 32, 64, 128],
            gauss_head_hidden: vec![128],
            atten_head_hidden: vec![64, 64],
            nearest_k: 3,
            epochs: 100,
            points_per_sample: 10_000,
            lr0: 0.01,
            momentum: 0.98,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.v < 1 || self.c < 1 || self.c_t < 1 || self.c_g < 1 {
            return Err(Error::InvalidParameter(
                "channel widths and grid resolution must be >= 1".into(),
            ));
        }
        if self.points_per_sample < 1 {
            return Err(Error::InvalidParameter(
                "points_per_sample must be >= 1".into(),
            ));
        }
        if self.c_t != self.encoder_widths[3] {
            return Err(Error::InvalidParameter(format!(
                "c_t ({}) must equal the last encoder width ({})",
                self.c_t, self.encoder_widths[3]
            )));
        }
        if self.nearest_k < 1 || self.nearest_k > self.n_g() {
            return Err(Error::InvalidParameter(format!(
                "nearest_k {} out of range 1..={}",
                self.nearest_k,
                self.n_g()
            )));
        }
        // Four stride-2 stages then two 2x upsamples.
        if self.det_shape.0 % 16 != 0 || self.det_shape.1 % 16 != 0 {
            return Err(Error::InvalidParameter(format!(
                "detector shape {:?} must be divisible by 16",
                self.det_shape
            )));
        }
        Ok(())
    }

    pub fn n_g(&self) -> usize {
        self.v * self.v * self.v
    }
}

/// All trainable tensors.
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    /// Four stride-2 blocks.
    pub enc: Vec<Conv2d<T>>,
    /// Two stride-1 fusion blocks after 2x upsampling.
    pub dec: Vec<Conv2d<T>>,
    /// C_t -> 3 + C_g + 4 + 3, output layer zero-initialized.
    pub gauss_head: Mlp<T>,
    /// C_g + C -> 1.
    pub atten_head: Mlp<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let w = config.encoder_widths;
        let enc = vec![
            Conv2d::new(1, w[0], 2, &mut rng),
            Conv2d::new(w[0], w[1], 2, &mut rng),
            Conv2d::new(w[1], w[2], 2, &mut rng),
            Conv2d::new(w[2], w[3], 2, &mut rng),
        ];
        let dec = vec![
            Conv2d::new(w[3] + w[2], w[2], 1, &mut rng),
            Conv2d::new(w[2] + w[1], config.c, 1, &mut rng),
        ];

        let mut gauss_dims = vec![config.c_t];
        gauss_dims.extend_from_slice(&config.gauss_head_hidden);
        gauss_dims.push(head_width(config.c_g));
        let mut gauss_head = Mlp::new(&gauss_dims, &mut rng);
        // Zero output layer: the initial field is identity Gaussians at the
        // grid centroids (delta_u = 0, r = (1,0,0,0), s at sigmoid midpoint).
        let last = gauss_head.layers.len() - 1;
        let (ci, co) = (
            gauss_head.layers[last].c_in(),
            gauss_head.layers[last].c_out(),
        );
        gauss_head.layers[last] = Linear::zeroed(ci, co);

        let mut atten_dims = vec![config.c_g + config.c];
        atten_dims.extend_from_slice(&config.atten_head_hidden);
        atten_dims.push(1);
        let atten_head = Mlp::new(&atten_dims, &mut rng);

        Ok(Self {
            config,
            enc,
            dec,
            gauss_head,
            atten_head,
        })
    }
}

impl<T: Scalar> ParamSet<T> for ModelParams<T> {
    fn for_each_param(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, c) in self.enc.iter_mut().enumerate() {
            f(&format!("enc{i}.w"), &mut c.w);
            f(&format!("enc{i}.b"), &mut c.b);
        }
        for (i, c) in self.dec.iter_mut().enumerate() {
            f(&format!("dec{i}.w"), &mut c.w);
            f(&format!("dec{i}.b"), &mut c.b);
        }
        for (i, l) in self.gauss_head.layers.iter_mut().enumerate() {
            f(&format!("gauss_head.{i}.w"), &mut l.w);
            f(&format!("gauss_head.{i}.b"), &mut l.b);
        }
        for (i, l) in self.atten_head.layers.iter_mut().enumerate() {
            f(&format!("atten_head.{i}.w"), &mut l.w);
            f(&format!("atten_head.{i}.b"), &mut l.b);
        }
    }
}

/// Everything the encoder backward needs.
pub struct EncodeCache<T> {
    x: Tensor<T>,
    e: Vec<Tensor<T>>,
    cat1: Tensor<T>,
    d1: Tensor<T>,
    cat2: Tensor<T>,
    f: Tensor<T>,
}

/// Encoder output: the deep tap F^t and the decoder tap F, plus strides
/// mapping detector pixels to feature pixels.
pub struct EncodeOut<T> {
    pub f_t: Tensor<T>,
    pub f: Tensor<T>,
    pub stride_ft: usize,
    pub stride_f: usize,
    pub cache: EncodeCache<T>,
}

/// Run the shared 2D encoder over all K views.
///
/// Projections enter normalized by the stack-wide maximum.
pub fn encode<T: Scalar>(
    params: &ModelParams<T>,
    stack: &ProjectionStack,
) -> Result<EncodeOut<T>> {
    let cfg = &params.config;
    let (n_u, n_v) = stack.geometry.det_shape;
    if stack.n_views() != cfg.k_views || (n_u, n_v) != cfg.det_shape {
        return Err(Error::ShapeMismatch(format!(
            "projection stack is {} views of {:?}, model expects {} of {:?}",
            stack.n_views(),
            (n_u, n_v),
            cfg.k_views,
            cfg.det_shape
        )));
    }
    let max = stack.max_value();
    let scale = if max > 0.0 { 1.0 / max as f64 } else { 1.0 };
    let mut x = Tensor::zeros(&[cfg.k_views, 1, n_v, n_u]);
    for (k, img) in stack.data.iter().enumerate() {
        for (dst, &src) in x.data[k * n_u * n_v..(k + 1) * n_u * n_v]
            .iter_mut()
            .zip(img.iter())
        {
            *dst = T::from_f64c(src as f64 * scale);
        }
    }

    let e0 = params.enc[0].forward(&x)?;
    let e1 = params.enc[1].forward(&e0)?;
    let e2 = params.enc[2].forward(&e1)?;
    let e3 = params.enc[3].forward(&e2)?;

    let up1 = upsample2(&e3);
    let cat1 = cat_channels(&up1, &e2)?;
    let d1 = params.dec[0].forward(&cat1)?;
    let up2 = upsample2(&d1);
    let cat2 = cat_channels(&up2, &e1)?;
    let f = params.dec[1].forward(&cat2)?;

    let stride_ft = n_v / e3.shape[2];
    let stride_f = n_v / f.shape[2];
    Ok(EncodeOut {
        f_t: e3.clone(),
        f: f.clone(),
        stride_ft,
        stride_f,
        cache: EncodeCache {
            x,
            e: vec![e0, e1, e2, e3],
            cat1,
            d1,
            cat2,
            f,
        },
    })
}

/// Backward through both taps; accumulates conv parameter grads.
pub fn encode_backward<T: Scalar>(
    params: &mut ModelParams<T>,
    cache: &EncodeCache<T>,
    gf_t: &Tensor<T>,
    gf: &Tensor<T>,
) -> Result<()> {
    let g_cat2 = params.dec[1].backward(&cache.cat2, &cache.f, gf)?;
    let (g_up2, g_e1a) = cat_channels_backward(&g_cat2, cache.d1.shape[1]);
    let g_d1 = upsample2_backward(&g_up2);
    let g_cat1 = params.dec[0].backward(&cache.cat1, &cache.d1, &g_d1)?;
    let (g_up1, g_e2a) = cat_channels_backward(&g_cat1, cache.e[3].shape[1]);
    let mut g_e3 = upsample2_backward(&g_up1);
    g_e3.add_assign(gf_t);
    let mut g_e2 = params.enc[3].backward(&cache.e[2], &cache.e[3], &g_e3)?;
    g_e2.add_assign(&g_e2a);
    let mut g_e1 = params.enc[2].backward(&cache.e[1], &cache.e[2], &g_e2)?;
    g_e1.add_assign(&g_e1a);
    let g_e0 = params.enc[1].backward(&cache.e[0], &cache.e[1], &g_e1)?;
    params.enc[0].backward(&cache.x, &cache.e[0], &g_e0)?;
    Ok(())
}

/// Per-point record of a pooled multi-view feature query.
pub struct PooledCache {
    coords: Vec<(f64, f64)>,
    valid: Vec<bool>,
    argmax: Vec<usize>,
}

/// Project `p` into every view, bilinearly sample the per-view feature map
/// at the scaled coordinate, and max-pool over views. Views that cannot see
/// the point (behind the source) are excluded from the max.
pub fn query_pooled<T: Scalar>(
    maps: &Tensor<T>,
    p: Vec3,
    geom: &ScanGeometry,
    stride: usize,
) -> Result<(Vec<T>, PooledCache)> {
    let (k_views, c, h, w) = (maps.shape[0], maps.shape[1], maps.shape[2], maps.shape[3]);
    let mut rows: Vec<Vec<T>> = Vec::with_capacity(k_views);
    let mut coords = Vec::with_capacity(k_views);
    let mut valid = Vec::with_capacity(k_views);
    for k in 0..k_views {
        match geom.project_point(k, p) {
            Ok((u, v)) => {
                let x = u / stride as f64;
                let y = v / stride as f64;
                let taps = bilinear_taps(h, w, x, y);
                let base = k * c * h * w;
                let mut row = vec![T::zero(); c];
                for (ci, out) in row.iter_mut().enumerate() {
                    let plane = &maps.data[base + ci * h * w..base + (ci + 1) * h * w];
                    for &(idx, weight) in &taps {
                        if weight != 0.0 {
                            *out = *out + plane[idx] * T::from_f64c(weight);
                        }
                    }
                }
                rows.push(row);
                coords.push((x, y));
                valid.push(true);
            }
            Err(_) => {
                rows.push(vec![T::zero(); c]);
                coords.push((0.0, 0.0));
                valid.push(false);
            }
        }
    }
    let (out, argmax) = max_over_views(&rows, &valid).ok_or(Error::AllViewsInvalid)?;
    Ok((
        out,
        PooledCache {
            coords,
            valid,
            argmax,
        },
    ))
}

/// Scatter the pooled-feature gradient back to the winning view's bilinear
/// taps for each channel.
pub fn query_pooled_backward<T: Scalar>(gmaps: &mut Tensor<T>, cache: &PooledCache, gout: &[T]) {
    let (c, h, w) = (gmaps.shape[1], gmaps.shape[2], gmaps.shape[3]);
    for (ci, &g) in gout.iter().enumerate() {
        if g == T::zero() {
            continue;
        }
        let k = cache.argmax[ci];
        debug_assert!(cache.valid[k]);
        let (x, y) = cache.coords[k];
        for (idx, weight) in bilinear_taps(h, w, x, y) {
            if weight != 0.0 {
                let base = (k * c + ci) * h * w;
                gmaps.data[base + idx] = gmaps.data[base + idx] + g * T::from_f64c(weight);
            }
        }
    }
}

/// Caches from building the Gaussian set out of the intermediate tap.
pub struct BuildCache<T> {
    pooled: Vec<PooledCache>,
    mlp: MlpCache<T>,
    act: ActivationCache<T>,
}

/// Predict the Gaussian set from the K-view intermediate features: pooled
/// query at each grid centroid, the parameter head, then activations.
pub fn build_gaussians<T: Scalar>(
    params: &ModelParams<T>,
    f_t: &Tensor<T>,
    stride_ft: usize,
    geom: &ScanGeometry,
    lo: Vec3,
    hi: Vec3,
) -> Result<(GaussianSet<T>, BuildCache<T>)> {
    let cfg = &params.config;
    let u_hat = crate::gaussians::init_positions(cfg.v, lo, hi)?;
    let n_g = u_hat.len();
    let c_t = f_t.shape[1];
    let mut pooled_feats = Tensor::zeros(&[n_g, c_t]);
    let mut pooled = Vec::with_capacity(n_g);
    for (i, &u) in u_hat.iter().enumerate() {
        let (row, cache) = query_pooled(f_t, u, geom, stride_ft)?;
        pooled_feats.data[i * c_t..(i + 1) * c_t].copy_from_slice(&row);
        pooled.push(cache);
    }
    let (raw, mlp) = params.gauss_head.forward(&pooled_feats)?;
    let (gs, act) = activate_gaussians(&raw, cfg.v, lo, hi)?;
    Ok((gs, BuildCache { pooled, mlp, act }))
}

/// Backward from Gaussian-parameter grads into the head and the
/// intermediate feature tap.
pub fn build_gaussians_backward<T: Scalar>(
    params: &mut ModelParams<T>,
    gs: &GaussianSet<T>,
    cache: &BuildCache<T>,
    grads: &GaussianGrads<T>,
    gf_t: &mut Tensor<T>,
) {
    let graw = activate_backward(gs, &cache.act, grads);
    let gpooled = params.gauss_head.backward(&cache.mlp, &graw);
    let c_t = gpooled.shape[1];
    for (i, pc) in cache.pooled.iter().enumerate() {
        query_pooled_backward(gf_t, pc, &gpooled.data[i * c_t..(i + 1) * c_t]);
    }
}

/// Per-point caches of a prediction batch.
pub struct PredictCache<T> {
    field: Vec<Option<QueryFieldCache<T>>>,
    pooled: Vec<PooledCache>,
    mlp: MlpCache<T>,
}

/// Fixed gain applied to the Gaussian feature slot of the decoder input.
///
/// The normalized kernel carries a 1/(s1·s2·s3) volume factor, so in
/// millimeter units its values are tiny (~1e-6 for centimeter-scale
/// Gaussians) and the 3D features would be numerically invisible next to
/// the pooled 2D features, freezing that pathway during training. The
/// constant rescales the slot so a kernel at the initialization scale (the
/// sigmoid midpoint of the scale activation) contributes O(1); being a
/// constant, it folds into the decoder's input layer.
fn field_gain<T>(gs: &GaussianSet<T>) -> f64 {
    let s_mid = gs.s_min + 0.5 * (gs.s_max - gs.s_min);
    s_mid.powi(3) / crate::gaussians::TWO_PI_POW_NEG_3_2
}

/// Decode attenuation at a batch of points from the hybrid 2D+3D features.
///
/// With Gaussians disabled the 3D feature slot is zero-filled, making the
/// output independent of the Gaussian head.
pub fn predict_batch<T: Scalar>(
    params: &ModelParams<T>,
    points: &[Vec3],
    f: &Tensor<T>,
    stride_f: usize,
    gs: Option<&GaussianSet<T>>,
    geom: &ScanGeometry,
) -> Result<(Vec<T>, PredictCache<T>)> {
    let cfg = &params.config;
    let n = points.len();
    let c_in = cfg.c_g + cfg.c;
    let mut x = Tensor::zeros(&[n, c_in]);
    let mut field = Vec::with_capacity(n);
    let mut pooled = Vec::with_capacity(n);
    for (i, &p) in points.iter().enumerate() {
        if cfg.enable_gaussians {
            let gs = gs.expect("gaussian set required when enabled");
            let gain = T::from_f64c(field_gain(gs));
            let (fg, qc) = query_field(p, gs, cfg.nearest_k)?;
            for (slot, v) in x.data[i * c_in..i * c_in + cfg.c_g].iter_mut().zip(&fg) {
                *slot = *v * gain;
            }
            field.push(Some(qc));
        } else {
            field.push(None);
        }
        let (fp, pc) = query_pooled(f, p, geom, stride_f)?;
        x.data[i * c_in + cfg.c_g..(i + 1) * c_in].copy_from_slice(&fp);
        pooled.push(pc);
    }
    let (y, mlp) = params.atten_head.forward(&x)?;
    Ok((y.data, PredictCache { field, pooled, mlp }))
}

/// Backward of [`predict_batch`] given per-point output grads. Accumulates
/// attenuation-head grads, Gaussian grads, and the decoder tap gradient.
pub fn predict_batch_backward<T: Scalar>(
    params: &mut ModelParams<T>,
    cache: &PredictCache<T>,
    gv: &[T],
    gs: Option<&GaussianSet<T>>,
    ggs: Option<&mut GaussianGrads<T>>,
    gf: &mut Tensor<T>,
) {
    let cfg_c_g = params.config.c_g;
    let n = gv.len();
    let gy = Tensor::from_vec(&[n, 1], gv.to_vec()).unwrap();
    let gx = params.atten_head.backward(&cache.mlp, &gy);
    let c_in = gx.shape[1];
    let mut ggs = ggs;
    for i in 0..n {
        let row = &gx.data[i * c_in..(i + 1) * c_in];
        if let (Some(qc), Some(ggs)) = (cache.field[i].as_ref(), ggs.as_deref_mut()) {
            let gs = gs.expect("gaussian set required");
            let gain = T::from_f64c(field_gain(gs));
            let g_fg: Vec<T> = row[..cfg_c_g].iter().map(|&g| g * gain).collect();
            query_field_backward(gs, qc, &g_fg, ggs);
        }
        query_pooled_backward(gf, &cache.pooled[i], &row[cfg_c_g..]);
    }
}

/// Uniform sample of supervision points over the volume's voxel-center
/// bounding box, paired with the trilinearly interpolated ground truth.
pub fn sample_points(vol: &VoxelVolume, n: usize, seed: u64) -> Vec<(Vec3, f64)> {
    assert!(n >= 1);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let (lo, hi) = vol.bounds();
    (0..n)
        .map(|_| {
            let p = [
                rng.gen_range(lo[0]..=hi[0]),
                rng.gen_range(lo[1]..=hi[1]),
                rng.gen_range(lo[2]..=hi[2]),
            ];
            (p, sample_trilinear(vol, p))
        })
        .collect()
}

/// One row of the training loss log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mse: f64,
}

fn point_seed(seed: u64, epoch: usize, sample: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (sample as u64 + 1).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

const POINT_CHUNK: usize = 512;

/// Forward + backward over one training sample; returns its mean point MSE.
fn train_sample<T: Scalar>(
    params: &mut ModelParams<T>,
    vol: &VoxelVolume,
    stack: &ProjectionStack,
    seed: u64,
) -> Result<f64> {
    let cfg = params.config.clone();
    let (lo, hi) = vol.bounds();
    let enc_out = encode(params, stack)?;
    let (gs, build_cache) = if cfg.enable_gaussians {
        let (gs, bc) = build_gaussians(
            params,
            &enc_out.f_t,
            enc_out.stride_ft,
            &stack.geometry,
            lo,
            hi,
        )?;
        (Some(gs), Some(bc))
    } else {
        (None, None)
    };

    let points = sample_points(vol, cfg.points_per_sample, seed);
    let n_total = points.len();
    let mut ggs = gs.as_ref().map(|g| g.zero_grads());
    let mut gf = Tensor::zeros(&enc_out.f.shape);
    let mut loss = 0.0f64;
    for chunk in points.chunks(POINT_CHUNK) {
        let ps: Vec<Vec3> = chunk.iter().map(|&(p, _)| p).collect();
        let (pred, cache) = predict_batch(
            params,
            &ps,
            &enc_out.f,
            enc_out.stride_f,
            gs.as_ref(),
            &stack.geometry,
        )?;
        let mut gv = Vec::with_capacity(chunk.len());
        for (&(_, gt), &v) in chunk.iter().zip(&pred) {
            let err = v.to_f64c() - gt;
            loss += err * err;
            gv.push(T::from_f64c(2.0 * err / n_total as f64));
        }
        predict_batch_backward(params, &cache, &gv, gs.as_ref(), ggs.as_mut(), &mut gf);
    }
    loss /= n_total as f64;
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("training loss is {loss}")));
    }

    let mut gf_t = Tensor::zeros(&enc_out.f_t.shape);
    if let (Some(gs), Some(bc), Some(ggs)) = (gs.as_ref(), build_cache.as_ref(), ggs.as_ref()) {
        build_gaussians_backward(params, gs, bc, ggs, &mut gf_t);
    } else {
        // Ablation: the Gaussian head is untouched by backward; its
        // gradients are exactly zero this step.
        for l in params.gauss_head.layers.iter_mut() {
            l.w.seen_grad = true;
            l.b.seen_grad = true;
        }
    }
    encode_backward(params, &enc_out.cache, &gf_t, &gf)?;
    Ok(loss)
}

/// Train a fresh model on (volume, projection) pairs with per-sample
/// sequential updates and the epoch-decayed momentum schedule.
pub fn train<T: Scalar>(
    dataset: &[(VoxelVolume, ProjectionStack)],
    config: ModelConfig,
    seed: u64,
) -> Result<(ModelParams<T>, Vec<EpochLog>)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidParameter("empty training set".into()));
    }
    let geom0 = &dataset[0].1.geometry;
    for (_, stack) in dataset {
        if stack.geometry != *geom0 {
            return Err(Error::InvalidParameter(
                "all projection stacks must share one scan geometry".into(),
            ));
        }
    }

    let mut params = ModelParams::init(config.clone(), seed)?;
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = lr_at_epoch(config.lr0, epoch, config.epochs);
        let mut epoch_loss = 0.0;
        for (i, (vol, stack)) in dataset.iter().enumerate() {
            let loss = train_sample(&mut params, vol, stack, point_seed(seed, epoch, i))?;
            epoch_loss += loss;
            sgd_momentum_step(&mut params, lr, config.momentum)?;
        }
        log.push(EpochLog {
            epoch,
            lr,
            mse: epoch_loss / dataset.len() as f64,
        });
    }
    Ok((params, log))
}

/// Order-preserving shuffle helper for dataset construction (seeded).
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx
}

/// Decode a full volume from a projection stack: one encoder pass, one
/// Gaussian build, then per-voxel prediction streamed in fixed chunks.
/// Values are clamped to [0, 1].
pub fn reconstruct<T: Scalar>(
    params: &ModelParams<T>,
    stack: &ProjectionStack,
    out_dims: (usize, usize, usize),
    out_spacing: Vec3,
    chunk: usize,
) -> Result<VoxelVolume> {
    let mut vol = VoxelVolume::centered(out_dims, out_spacing);
    let (lo, hi) = vol.bounds();
    let enc_out = encode(params, stack)?;
    let gs = if params.config.enable_gaussians {
        Some(
            build_gaussians(
                params,
                &enc_out.f_t,
                enc_out.stride_ft,
                &stack.geometry,
                lo,
                hi,
            )?
            .0,
        )
    } else {
        None
    };

    let centers: Vec<Vec3> = (0..vol.data.len())
        .map(|i| {
            let x = i % out_dims.0;
            let y = (i / out_dims.0) % out_dims.1;
            let z = i / (out_dims.0 * out_dims.1);
            vol.voxel_center(x, y, z)
        })
        .collect();

    let chunk = chunk.max(1);
    let results: Result<Vec<Vec<T>>> = centers
        .par_chunks(chunk)
        .map(|ps| {
            predict_batch(params, ps, &enc_out.f, enc_out.stride_f, gs.as_ref(), &stack.geometry)
                .map(|(v, _)| v)
        })
        .collect();
    let mut out = Vec::with_capacity(vol.data.len());
    for block in results? {
        out.extend(block.into_iter().map(|v| v.to_f64c().clamp(0.0, 1.0) as f32));
    }
    vol.data = out;
    Ok(vol)
}
