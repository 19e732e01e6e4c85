//! Structural properties of the model: view-permutation symmetry, Gaussian
//! parameter bounds, and training-loop behavior.

use gsdif_core::diffcore::ParamSet;
use gsdif_core::gaussians::init_positions;
use gsdif_core::geometry::make_circular_geometry;
use gsdif_core::model::{
    build_gaussians, encode, predict_batch, train, ModelConfig, ModelParams,
};
use gsdif_core::projector::{drr, ProjectionStack};
use gsdif_core::volume::{generate_phantom, random_phantom_spec, VoxelVolume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn tiny_config(k_views: usize) -> ModelConfig {
    ModelConfig {
        k_views,
        det_shape: (16, 16),
        c: 6,
        c_t: 16,
        c_g: 4,
        v: 2,
        enable_gaussians: true,
        encoder_widths: [4, 6, 8, 16],
        gauss_head_hidden: vec![16],
        atten_head_hidden: vec![12],
        nearest_k: 3,
        epochs: 2,
        points_per_sample: 64,
        lr0: 0.01,
        momentum: 0.98,
    }
}

fn tiny_sample(k_views: usize, seed: u64) -> (VoxelVolume, ProjectionStack) {
    let geom = make_circular_geometry(k_views, 1000.0, 1500.0, (16, 16), 24.0).unwrap();
    let vol = generate_phantom(&random_phantom_spec(seed, 60.0), (8, 8, 8), [16.0; 3]).unwrap();
    let stack = drr(&vol, &geom, 64).unwrap();
    (vol, stack)
}

/// Give every parameter a nonzero random value so the Gaussian head output
/// layer (zero at init) actually contributes.
fn randomize_params(params: &mut ModelParams<f64>, seed: u64) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    params.for_each_param(&mut |_, p| {
        for v in &mut p.value.data {
            *v += rng.gen_range(-0.1..0.1);
        }
    });
}

/// The max-pool over views makes the decoder symmetric in the view axis:
/// permuting the projections together with their poses changes nothing.
#[test]
fn predictions_invariant_under_view_permutation() {
    let k = 4usize;
    let (vol, stack) = tiny_sample(k, 21);
    let mut params: ModelParams<f64> = ModelParams::init(tiny_config(k), 5).unwrap();
    randomize_params(&mut params, 6);
    let (lo, hi) = vol.bounds();

    let perm = [2usize, 0, 3, 1];
    let mut permuted = stack.clone();
    for (dst, &src) in perm.iter().enumerate() {
        permuted.data[dst] = stack.data[src].clone();
        permuted.geometry.poses[dst] = stack.geometry.poses[src].clone();
    }

    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let points: Vec<[f64; 3]> = (0..32)
        .map(|_| {
            [
                rng.gen_range(lo[0]..hi[0]),
                rng.gen_range(lo[1]..hi[1]),
                rng.gen_range(lo[2]..hi[2]),
            ]
        })
        .collect();

    let predict = |stack: &ProjectionStack| -> Vec<f64> {
        let enc = encode(&params, stack).unwrap();
        let (gs, _) =
            build_gaussians(&params, &enc.f_t, enc.stride_ft, &stack.geometry, lo, hi).unwrap();
        predict_batch(&params, &points, &enc.f, enc.stride_f, Some(&gs), &stack.geometry)
            .unwrap()
            .0
    };
    assert_eq!(predict(&stack), predict(&permuted));
}

/// Initial positions stay the fixed grid centroids; learned offsets remain
/// within half a cell, scales within their bounds, quaternions unit.
#[test]
fn gaussian_parameters_respect_bounds() {
    let k = 2usize;
    let (vol, stack) = tiny_sample(k, 22);
    let (lo, hi) = vol.bounds();
    for seed in 0..5u64 {
        let mut params: ModelParams<f64> = ModelParams::init(tiny_config(k), seed).unwrap();
        randomize_params(&mut params, 50 + seed);
        let enc = encode(&params, &stack).unwrap();
        let (gs, _) =
            build_gaussians(&params, &enc.f_t, enc.stride_ft, &stack.geometry, lo, hi).unwrap();

        assert_eq!(gs.u_hat, init_positions(gs.v, lo, hi).unwrap());
        for g in 0..gs.n_g() {
            for i in 0..3 {
                assert!(gs.delta_u[g][i].abs() <= gs.cell[i] / 2.0 + 1e-12);
                assert!(gs.scale[g][i] >= gs.s_min - 1e-12 && gs.scale[g][i] <= gs.s_max + 1e-12);
            }
            let n: f64 = gs.quat[g].iter().map(|q| q * q).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_at_init() {
    let (vol, stack) = tiny_sample(2, 23);
    let mut cfg = tiny_config(2);
    cfg.lr0 = 0.0;
    let (trained, log) = train::<f64>(&[(vol, stack)], cfg.clone(), 77).unwrap();
    let fresh: ModelParams<f64> = ModelParams::init(cfg, 77).unwrap();
    assert_eq!(log.len(), 2);
    let mut trained = trained;
    let mut fresh = fresh;
    let mut trained_vals = Vec::new();
    trained.for_each_param(&mut |name, p| trained_vals.push((name.to_string(), p.value.clone())));
    let mut i = 0;
    fresh.for_each_param(&mut |name, p| {
        assert_eq!(trained_vals[i].0, name);
        assert_eq!(trained_vals[i].1, p.value, "parameter {name} moved");
        i += 1;
    });
}

/// A 200-epoch run on one sample must fit it far better than the first
/// epoch. The schedule decays lr by 1000x across the run, so the initial
/// rate is set high enough that most of the descent happens early.
#[test]
fn training_reduces_mse_substantially() {
    let geom = make_circular_geometry(2, 1000.0, 1500.0, (16, 16), 24.0).unwrap();
    let vol = generate_phantom(&gsdif_core::volume::sphere_spec(40.0, 0.5), (8, 8, 8), [16.0; 3])
        .unwrap();
    let stack = drr(&vol, &geom, 64).unwrap();
    let mut cfg = tiny_config(2);
    cfg.epochs = 400;
    cfg.points_per_sample = 256;
    cfg.lr0 = 0.1;
    cfg.momentum = 0.98;
    let (_, log) = train::<f32>(&[(vol, stack)], cfg, 4).unwrap();
    let first = log.first().unwrap().mse;
    let last = log.last().unwrap().mse;
    assert!(
        last < 0.25 * first,
        "mse went {first} -> {last}, expected at least 4x reduction"
    );
}
