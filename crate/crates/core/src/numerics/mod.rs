//! Differentiable dense-tensor substrate.

pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_params, Coords, GradCheckReport};
pub use params::{Graph, Init, ParamId, ParamSpec, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};
