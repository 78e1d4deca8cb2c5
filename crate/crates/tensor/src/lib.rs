//! `veil-tensor`: a small CPU tensor library with reverse-mode autodiff.
//!
//! Built for the veil workspace: NCHW convolutions, instance norm, and a
//! tape whose backward pass is itself differentiable (gradient penalties,
//! finite-difference verification of second-order terms). Generic over `f32`
//! (training) and `f64` (gradient checking).
//!
//! Data-parallel kernels use rayon when the default `parallel` feature is
//! on; all reductions run in fixed chunk order, so parallel and sequential
//! execution produce bit-identical results.

pub mod nn;
pub mod ops;
pub mod optim;
mod par;
mod scalar;
mod tensor;

pub use par::{parallel_enabled, set_force_sequential};
pub use scalar::Scalar;
pub use tensor::{is_recording, no_grad, Gradients, Tensor};
