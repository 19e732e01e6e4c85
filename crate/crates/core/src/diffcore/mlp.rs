//! Fully connected stacks: ReLU hidden layers, linear output layer.

use rand::Rng;

use super::tensor::{Param, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct Linear<T> {
    /// [out, in]
    pub w: Param<T>,
    pub b: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (c_in + c_out) as f64).sqrt();
        let data: Vec<T> = (0..c_out * c_in)
            .map(|_| T::from_f64c(rng.gen_range(-bound..bound)))
            .collect();
        Self {
            w: Param::new(Tensor::from_vec(&[c_out, c_in], data).unwrap()),
            b: Param::new(Tensor::zeros(&[c_out])),
        }
    }

    pub fn zeroed(c_in: usize, c_out: usize) -> Self {
        Self {
            w: Param::new(Tensor::zeros(&[c_out, c_in])),
            b: Param::new(Tensor::zeros(&[c_out])),
        }
    }

    pub fn c_in(&self) -> usize {
        self.w.value.shape[1]
    }

    pub fn c_out(&self) -> usize {
        self.w.value.shape[0]
    }

    /// y = x W^T + b for x of shape [n, in].
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let (n, ci, co) = (x.shape[0], self.c_in(), self.c_out());
        let mut y = Tensor::zeros(&[n, co]);
        for ni in 0..n {
            let xs = &x.data[ni * ci..(ni + 1) * ci];
            let ys = &mut y.data[ni * co..(ni + 1) * co];
            for (o, yo) in ys.iter_mut().enumerate() {
                let ws = &self.w.value.data[o * ci..(o + 1) * ci];
                let mut acc = self.b.value.data[o];
                for (a, b) in xs.iter().zip(ws) {
                    acc = acc + *a * *b;
                }
                *yo = acc;
            }
        }
        y
    }

    fn backward(&mut self, x: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
        let (n, ci, co) = (x.shape[0], self.c_in(), self.c_out());
        let mut gx = Tensor::zeros(&[n, ci]);
        for ni in 0..n {
            let xs = &x.data[ni * ci..(ni + 1) * ci];
            let gys = &gy.data[ni * co..(ni + 1) * co];
            let gxs = &mut gx.data[ni * ci..(ni + 1) * ci];
            for (o, &g) in gys.iter().enumerate() {
                self.b.grad.data[o] = self.b.grad.data[o] + g;
                let ws = &self.w.value.data[o * ci..(o + 1) * ci];
                let gws = &mut self.w.grad.data[o * ci..(o + 1) * ci];
                for i in 0..ci {
                    gws[i] = gws[i] + g * xs[i];
                    gxs[i] = gxs[i] + g * ws[i];
                }
            }
        }
        self.w.seen_grad = true;
        self.b.seen_grad = true;
        gx
    }
}

/// Affine chain with ReLU between layers and a linear final layer.
#[derive(Debug, Clone)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
}

/// Per-layer inputs captured during forward, needed by backward.
pub struct MlpCache<T> {
    inputs: Vec<Tensor<T>>,
    outputs: Vec<Tensor<T>>,
}

impl<T: Scalar> Mlp<T> {
    /// `dims` lists [in, hidden..., out]; at least one affine layer.
    pub fn new<R: Rng>(dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .map(|w| Linear::new(w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn c_in(&self) -> usize {
        self.layers[0].c_in()
    }

    pub fn c_out(&self) -> usize {
        self.layers.last().unwrap().c_out()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, MlpCache<T>)> {
        if x.shape.len() != 2 || x.shape[1] != self.c_in() {
            return Err(Error::ShapeMismatch(format!(
                "mlp expects [n, {}], got {:?}",
                self.c_in(),
                x.shape
            )));
        }
        let n_layers = self.layers.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut outputs = Vec::with_capacity(n_layers);
        let mut cur = x.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            inputs.push(cur.clone());
            let mut y = layer.forward(&cur);
            if li + 1 < n_layers {
                y.data.iter_mut().for_each(|v| *v = v.max(T::zero()));
            }
            outputs.push(y.clone());
            cur = y;
        }
        Ok((cur, MlpCache { inputs, outputs }))
    }

    /// Accumulates parameter grads and returns the input gradient.
    pub fn backward(&mut self, cache: &MlpCache<T>, gy: &Tensor<T>) -> Tensor<T> {
        let n_layers = self.layers.len();
        let mut g = gy.clone();
        for li in (0..n_layers).rev() {
            if li + 1 < n_layers {
                // ReLU mask from the stored post-activation output.
                for (gv, &ov) in g.data.iter_mut().zip(&cache.outputs[li].data) {
                    if ov <= T::zero() {
                        *gv = T::zero();
                    }
                }
            }
            g = self.layers[li].backward(&cache.inputs[li], &g);
        }
        g
    }
}
