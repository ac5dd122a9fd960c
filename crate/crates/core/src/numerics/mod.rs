//! Tensors, reverse-mode autodiff, the optimizer and the gradient oracle.

pub mod checkpoint;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use ops::{concat_rows, sum_all};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use params::{Bindings, GradMap, ParamStore};
pub use rng::RngStream;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Precision, Real, Tensor};
