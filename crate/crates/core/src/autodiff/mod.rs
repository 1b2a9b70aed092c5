//! Reverse-mode differentiation over dense rank-2 tensors.

mod gradcheck;
mod params;
mod tape;

pub use gradcheck::{grad_check, grad_check_params, relative_error};
pub use params::{glorot_bound, Graph, Param, ParamId, ParamKind, ParamStore};
pub use tape::{Axis, Gradients, Tape, Var, MASK_NEG};
