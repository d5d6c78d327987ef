//! Minimal CPU tensor engine: dense tensors, a reverse-mode tape, the
//! layer operations the model needs, and a finite-difference checker.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod ops;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_params, GradCheckOptions, GradCheckReport};
pub use graph::{Grads, Graph, Var};
pub use layers::{Conv2d, GroupNorm, LayerNorm};
pub use ops::{ssm_scan_1d, ConvSpec};
pub use params::{Init, ParamBuilder, ParamId, ParamStore};
pub use tensor::{Real, Tensor};
