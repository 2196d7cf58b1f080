//! Tensor arithmetic with reverse-mode differentiation and Adam.

mod adam;
mod gradcheck;
mod kernels;
mod tape;

pub use adam::AdamState;
pub use gradcheck::{grad_check, grad_check_coords};
pub use tape::{Activation, ConvMode, Gradients, Tape, Var};
