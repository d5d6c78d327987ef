//! Differentiable operations, each implemented as a method on [`Graph`](crate::nn::Graph).

pub mod conv;
pub mod elementwise;
pub mod matmul;
pub mod norm;
pub mod resample;
pub mod scan;
pub mod shape;
pub mod softmax;

pub use conv::ConvSpec;
pub use elementwise::{sigmoid, softplus};
pub use norm::{effective_groups, NORM_EPS};
pub use scan::ssm_scan_1d;
pub use softmax::softmax_along;
