//! Dense tensors, the fixed set of differentiable operations the model
//! needs, reverse-mode gradients and a finite-difference checker.

mod gradcheck;
mod graph;
pub mod ops;
mod real;
mod tensor;


pub use gradcheck::{grad_check, grad_check_tensors, relative_error, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, ParamId, ParamStore, SparseSoftmaxGrad, Var};
pub use ops::{bilinear_upsample, conv2d, matmul, mean_pool_spatial, relu, sigmoid, softmax_1d, softplus};
pub use real::Real;
pub use tensor::Tensor;
