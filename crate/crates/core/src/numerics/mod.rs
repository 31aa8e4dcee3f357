//! Dense tensors, a recording reverse-mode graph, AdamW and the learning-rate schedule.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{analytic_gradients, grad_check, grad_check_against, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, Var};
pub use optim::{lr_schedule, AdamW, AdamWConfig, OptimState};
pub use params::ParamStore;
pub use tensor::{layer_norm, softmax, Tensor};
