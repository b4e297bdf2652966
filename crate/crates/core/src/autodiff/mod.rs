//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] owns every value produced during a forward pass. Operations
//! are methods on the tape that return a [`Var`] handle; [`Tape::backward`]
//! walks the recording in reverse and accumulates gradients into every
//! node that tracks them. Parameters live in a [`ParamStore`] and are bound
//! as the first leaves of a tape with [`Tape::with_params`].
//!
//! There is no implicit broadcasting: binary element-wise ops require
//! identical shapes, and the only row-broadcast is the explicit
//! [`Tape::add_bias`].

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, ParamCheck, DEFAULT_STEP};
pub use params::{ParamId, ParamStore};
pub use tape::{Activation, Tape, Var, KL_FLOOR, SIMPLEX_TOL};
pub use tensor::Tensor;


#[cfg(test)]
mod tests;
