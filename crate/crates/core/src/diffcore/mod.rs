//! Minimal fixed-topology differentiable compute layer.
//!
//! Forward functions return whatever caches their hand-written backward
//! passes need; there is no tape. All code is generic over [`crate::scalar::Scalar`]
//! so the same operations run in f32 for production and f64 for gradient
//! verification.

pub mod conv;
pub mod mlp;
pub mod optim;
pub mod sample;
pub mod tensor;

pub use conv::{cat_channels, cat_channels_backward, upsample2, upsample2_backward, Conv2d};
pub use mlp::{Linear, Mlp, MlpCache};
pub use optim::{lr_at_epoch, sgd_momentum_step};
pub use sample::{bilinear_backward, bilinear_sample, max_over_views};
pub use tensor::{Param, ParamSet, Tensor};
