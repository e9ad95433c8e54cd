//! Small reverse-mode autodiff over row-major matrices.
//!
//! Second-order products (Hessian-vector, mixed partial-vector) come from
//! running the same tape over dual numbers, so no Hessian is ever formed.

mod graph;
mod params;
mod scalar;

pub use graph::{ConvGeom, Grads, Graph, Var};
pub use params::{
    grad_and_hvp, inner_second_order, inner_value_and_grad, outer_value_and_grad,
    value_and_grad, BilevelObjective, Objective, ParamSet, ParamTensor,
};
pub use scalar::{Dual, Scalar};
