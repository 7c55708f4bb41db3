//! Dense reverse-mode differentiation over 2-D `f64` tensors.
//!
//! A [`Tape`] records primitives as they execute; [`Tape::backward`] walks it
//! once in reverse and accumulates into a [`ParameterStore`] (or a detached
//! [`GradBuffer`] when several workers share one store). Every primitive traps
//! non-finite output as [`Error::NumericFault`](crate::Error::NumericFault).

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport, ParamCheck};
pub use params::{GradBuffer, ParamEntry, ParamId, ParameterStore, ParamsFile, PARAMS_FORMAT, PARAMS_VERSION};
pub use tape::{softmax_in_place, Tape, Var};
pub use tensor::Tensor;
