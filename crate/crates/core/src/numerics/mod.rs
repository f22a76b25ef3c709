//! Dense tensors, reverse-mode differentiation and the layer building blocks
//! the model is assembled from.

mod gradcheck;
mod graph;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{gradient_check, gradient_check_with, relative_error, GradCheckConfig, GradCheckReport, Stencil};
pub use graph::{Activation, Dropout, Graph, LayerNormParams, Linear, Mlp};
pub use param::{xavier, ParamId, ParamStore, Parameter};
pub use tape::{sigmoid, softplus, Gradients, Tape, Unary, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
