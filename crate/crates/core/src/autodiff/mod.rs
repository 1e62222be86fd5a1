//! Reverse-mode automatic differentiation over dense tensors.

mod conv;
mod elementwise;
mod graph;
mod linalg;
mod norm;
mod reduce;
mod resize;
mod shape;

pub use conv::ConvSpec;
pub use graph::{BackwardCtx, BackwardFn, Graph, Var};
pub use shape::concat;

pub use elementwise::{sigmoid_scalar, softplus_scalar};
