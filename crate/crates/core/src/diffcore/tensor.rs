use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor (last dimension fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = T::zero());
    }

    /// Element-wise a += b.
    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.iter().map(|v| v.to_f64c() as f32).collect()
    }

    pub fn from_f32_slice(shape: &[usize], data: &[f32]) -> Result<Self> {
        Self::from_vec(
            shape,
            data.iter().map(|&v| T::from_f64c(v as f64)).collect(),
        )
    }
}

/// Trainable tensor: value, accumulated gradient, and the optimizer's
/// momentum buffer.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub momentum: Tensor<T>,
    /// Set by backward passes; cleared by the optimizer step.
    pub seen_grad: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(&value.shape);
        let momentum = Tensor::zeros(&value.shape);
        Self {
            value,
            grad,
            momentum,
            seen_grad: false,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill_zero();
        self.seen_grad = false;
    }
}

/// Named collection of trainable parameters, visited in a fixed order.
pub trait ParamSet<T: Scalar> {
    fn for_each_param(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn mark_grads_seen(&mut self) {
        self.for_each_param(&mut |_, p| p.seen_grad = true);
    }

    fn zero_grads(&mut self) {
        self.for_each_param(&mut |_, p| p.zero_grad());
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, p| n += p.value.numel());
        n
    }
}
