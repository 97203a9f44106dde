//! Deterministic double-precision numerics: dense matrices, parameter stores,
//! Adam, gradient clipping and a finite-difference gradient checker.

mod checkpoint;
mod gradcheck;
mod matrix;
mod params;
pub mod rng;

pub use checkpoint::Checkpoint;
pub use gradcheck::finite_diff_check;
pub use matrix::{argmax, axpy, dot, gemm, log_softmax, ranked_indices, sigmoid, softmax, Matrix};
pub(crate) use matrix::softmax_unchecked;
pub use params::{adam_step, clip_gradients, sgd_step, Param, ParamId, ParamStore, TrainConfig};
