//! 3x3 convolution block (cross-correlation + bias + ReLU) with exact
//! hand-written backward, plus the nearest-neighbor upsample and channel
//! concatenation the encoder-decoder needs.

use rand::Rng;
use rayon::prelude::*;

use super::tensor::{Param, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const K: usize = 3;
const PAD: isize = 1;

/// 3x3 conv + bias + ReLU. Weights are laid out [c_out, c_in, 3, 3].
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub w: Param<T>,
    pub b: Param<T>,
    pub stride: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng>(c_in: usize, c_out: usize, stride: usize, rng: &mut R) -> Self {
        assert!(stride == 1 || stride == 2, "stride must be 1 or 2");
        let fan_in = c_in * K * K;
        let fan_out = c_out * K * K;
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data: Vec<T> = (0..c_out * c_in * K * K)
            .map(|_| T::from_f64c(rng.gen_range(-bound..bound)))
            .collect();
        Self {
            w: Param::new(Tensor::from_vec(&[c_out, c_in, K, K], data).unwrap()),
            b: Param::new(Tensor::zeros(&[c_out])),
            stride,
            c_in,
            c_out,
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        if x.shape.len() != 4 || x.shape[1] != self.c_in {
            return Err(Error::ShapeMismatch(format!(
                "conv expects [n, {}, h, w], got {:?}",
                self.c_in, x.shape
            )));
        }
        let (n, h, w) = (x.shape[0], x.shape[2], x.shape[3]);
        if h % self.stride != 0 || w % self.stride != 0 {
            return Err(Error::ShapeMismatch(format!(
                "spatial dims {h}x{w} not divisible by stride {}",
                self.stride
            )));
        }
        Ok((n, h, w))
    }

    /// Forward: y = relu(x (*) w + b), output [n, c_out, h/stride, w/stride].
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, h, w) = self.check_input(x)?;
        let (oh, ow) = (h / self.stride, w / self.stride);
        let mut y = Tensor::zeros(&[n, self.c_out, oh, ow]);
        let wd = &self.w.value.data;
        let bd = &self.b.value.data;
        let (c_in, c_out, stride) = (self.c_in, self.c_out, self.stride);

        y.data
            .par_chunks_mut(oh * ow)
            .enumerate()
            .for_each(|(plane, out)| {
                let ni = plane / c_out;
                let co = plane % c_out;
                let xs = &x.data[ni * c_in * h * w..(ni + 1) * c_in * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bd[co];
                        for ci in 0..c_in {
                            let xplane = &xs[ci * h * w..(ci + 1) * h * w];
                            let wbase = ((co * c_in) + ci) * K * K;
                            for ky in 0..K {
                                let iy = (oy * stride) as isize + ky as isize - PAD;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let row = iy as usize * w;
                                for kx in 0..K {
                                    let ix = (ox * stride) as isize + kx as isize - PAD;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc = acc
                                        + xplane[row + ix as usize] * wd[wbase + ky * K + kx];
                                }
                            }
                        }
                        out[oy * ow + ox] = acc.max(T::zero());
                    }
                }
            });
        Ok(y)
    }

    /// Backward for the block. `x` and `y` are the forward input/output,
    /// `gy` the gradient at the output. Accumulates weight/bias grads and
    /// returns the input gradient.
    pub fn backward(&mut self, x: &Tensor<T>, y: &Tensor<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, h, w) = self.check_input(x)?;
        let (oh, ow) = (y.shape[2], y.shape[3]);
        debug_assert_eq!(gy.shape, y.shape);
        let (c_in, c_out, stride) = (self.c_in, self.c_out, self.stride);

        // Gradient through ReLU: zero where the output was clipped.
        let mut gpre = gy.clone();
        for (g, &v) in gpre.data.iter_mut().zip(&y.data) {
            if v <= T::zero() {
                *g = T::zero();
            }
        }

        // Weight and bias grads: disjoint per output channel.
        let wslices: Vec<(usize, Vec<T>, T)> = (0..c_out)
            .into_par_iter()
            .map(|co| {
                let mut gw = vec![T::zero(); c_in * K * K];
                let mut gb = T::zero();
                for ni in 0..n {
                    let xs = &x.data[ni * c_in * h * w..(ni + 1) * c_in * h * w];
                    let gs = &gpre.data[(ni * c_out + co) * oh * ow..(ni * c_out + co + 1) * oh * ow];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = gs[oy * ow + ox];
                            if g == T::zero() {
                                continue;
                            }
                            gb = gb + g;
                            for ci in 0..c_in {
                                let xplane = &xs[ci * h * w..(ci + 1) * h * w];
                                for ky in 0..K {
                                    let iy = (oy * stride) as isize + ky as isize - PAD;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let row = iy as usize * w;
                                    for kx in 0..K {
                                        let ix = (ox * stride) as isize + kx as isize - PAD;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        gw[(ci * K + ky) * K + kx] = gw[(ci * K + ky) * K + kx]
                                            + g * xplane[row + ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
                (co, gw, gb)
            })
            .collect();
        for (co, gw, gb) in wslices {
            let base = co * c_in * K * K;
            for (i, v) in gw.into_iter().enumerate() {
                self.w.grad.data[base + i] = self.w.grad.data[base + i] + v;
            }
            self.b.grad.data[co] = self.b.grad.data[co] + gb;
        }
        self.w.seen_grad = true;
        self.b.seen_grad = true;

        // Input gradient: disjoint per (sample, input channel) plane.
        let mut gx = Tensor::zeros(&x.shape);
        let wd = &self.w.value.data;
        gx.data
            .par_chunks_mut(h * w)
            .enumerate()
            .for_each(|(plane, gxp)| {
                let ni = plane / c_in;
                let ci = plane % c_in;
                for co in 0..c_out {
                    let gs =
                        &gpre.data[(ni * c_out + co) * oh * ow..(ni * c_out + co + 1) * oh * ow];
                    let wbase = (co * c_in + ci) * K * K;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = gs[oy * ow + ox];
                            if g == T::zero() {
                                continue;
                            }
                            for ky in 0..K {
                                let iy = (oy * stride) as isize + ky as isize - PAD;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..K {
                                    let ix = (ox * stride) as isize + kx as isize - PAD;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let idx = iy as usize * w + ix as usize;
                                    gxp[idx] = gxp[idx] + g * wd[wbase + ky * K + kx];
                                }
                            }
                        }
                    }
                }
            });
        Ok(gx)
    }
}

/// Nearest-neighbor 2x upsample of [n, c, h, w].
pub fn upsample2<T2: Scalar>(x: &Tensor<T2>) -> Tensor<T2> {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let mut y = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    for plane in 0..n * c {
        let xs = &x.data[plane * h * w..(plane + 1) * h * w];
        let ys = &mut y.data[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for iy in 0..2 * h {
            for ix in 0..2 * w {
                ys[iy * 2 * w + ix] = xs[(iy / 2) * w + ix / 2];
            }
        }
    }
    y
}

/// Backward of [`upsample2`]: each input cell collects its 2x2 block.
pub fn upsample2_backward<T2: Scalar>(gy: &Tensor<T2>) -> Tensor<T2> {
    let (n, c, h2, w2) = (gy.shape[0], gy.shape[1], gy.shape[2], gy.shape[3]);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Tensor::zeros(&[n, c, h, w]);
    for plane in 0..n * c {
        let gys = &gy.data[plane * h2 * w2..(plane + 1) * h2 * w2];
        let gxs = &mut gx.data[plane * h * w..(plane + 1) * h * w];
        for iy in 0..h2 {
            for ix in 0..w2 {
                let idx = (iy / 2) * w + ix / 2;
                gxs[idx] = gxs[idx] + gys[iy * w2 + ix];
            }
        }
    }
    gx
}

/// Concatenate two [n, c, h, w] tensors along the channel axis.
pub fn cat_channels<T2: Scalar>(a: &Tensor<T2>, b: &Tensor<T2>) -> Result<Tensor<T2>> {
    if a.shape[0] != b.shape[0] || a.shape[2..] != b.shape[2..] {
        return Err(Error::ShapeMismatch(format!(
            "cat_channels: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let (n, ca, cb) = (a.shape[0], a.shape[1], b.shape[1]);
    let hw = a.shape[2] * a.shape[3];
    let mut y = Tensor::zeros(&[n, ca + cb, a.shape[2], a.shape[3]]);
    for ni in 0..n {
        let dst = &mut y.data[ni * (ca + cb) * hw..(ni + 1) * (ca + cb) * hw];
        dst[..ca * hw].copy_from_slice(&a.data[ni * ca * hw..(ni + 1) * ca * hw]);
        dst[ca * hw..].copy_from_slice(&b.data[ni * cb * hw..(ni + 1) * cb * hw]);
    }
    Ok(y)
}

/// Split the gradient of [`cat_channels`] back into its two halves.
pub fn cat_channels_backward<T2: Scalar>(
    gy: &Tensor<T2>,
    ca: usize,
) -> (Tensor<T2>, Tensor<T2>) {
    let (n, c, h, w) = (gy.shape[0], gy.shape[1], gy.shape[2], gy.shape[3]);
    let cb = c - ca;
    let hw = h * w;
    let mut ga = Tensor::zeros(&[n, ca, h, w]);
    let mut gb = Tensor::zeros(&[n, cb, h, w]);
    for ni in 0..n {
        let src = &gy.data[ni * c * hw..(ni + 1) * c * hw];
        ga.data[ni * ca * hw..(ni + 1) * ca * hw].copy_from_slice(&src[..ca * hw]);
        gb.data[ni * cb * hw..(ni + 1) * cb * hw].copy_from_slice(&src[ca * hw..]);
    }
    (ga, gb)
}
