//! Dense tensors, reverse-mode differentiation, layers and optimizers.

mod gemm;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_params};
pub use graph::{Graph, Var};
pub use nn::{attention_forward, film_modulate};
pub use optim::{adamw_step, clip_grad_norm, plateau_step, AdamWConfig, OptimizerState, PlateauScheduler};
pub use params::{ParamId, ParamStore};
pub use rng::Rng;
pub use tensor::Tensor;
