//! Dense tensor engine with tape-based reverse-mode differentiation.
//!
//! Everything runs on the CPU. Tensors are row-major; convolutions take a
//! single `[C, H, W]` sample, so batching is done by running independent tapes.
//! The scalar type is generic over [`Real`]: training uses `f32`, gradient
//! checks use `f64`.

pub mod checkpoint;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod real;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use error::{NnError, Result};
pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{Conv2d, ConvGru};
pub use optim::Adam;
pub use params::{Bound, ParamId, ParamStore};
pub use real::Real;
pub use tape::{bce_value, iou_cxcywh, Grads, Tape, Var};
pub use tensor::Tensor;

/// Logistic function, numerically stable for large `|x|`.
pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}
