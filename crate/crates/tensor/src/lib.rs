//! Dense `f64` tensors and a tape-based reverse-mode autodiff engine.
//!
//! The op set is deliberately small: exactly what a transformer-style
//! sequence model with embedding inputs and cross-entropy heads needs.
//! Shapes are explicit; the only broadcast is [`Graph::add_bias`].

mod error;
mod gradcheck;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport, DEFAULT_EPS};
pub use graph::{Gradients, Graph, NonFinite, Var, LAYER_NORM_EPS};
pub use params::{ParamId, ParamSet};
pub use tensor::Tensor;
