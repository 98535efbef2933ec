//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Graphs are recorded on a [`Tape`]; parameters live in a [`ParamStore`] and
//! are copied onto the tape on first use, so one store can serve many tapes.

mod checkpoint;
mod gradcheck;
mod kernel;
mod optim;
mod param;
mod tape;
mod tensor;

pub use checkpoint::{checkpoint_paths, load_checkpoint, read_manifest, save_checkpoint, Manifest, TensorEntry};
pub use gradcheck::{
    check_params, finite_difference_check, finite_difference_check_with_floor, relative_error, ParamProbe,
    DEFAULT_EPS,
};
pub use optim::{adamw_step, clip_grad_norm, ensure_grads, sgd_step, AdamState, OptimizerConfig, OptimizerKind};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Binary, Tape, Unary, Var};
pub use tensor::Tensor;

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests;
