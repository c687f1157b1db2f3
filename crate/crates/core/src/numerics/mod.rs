//! Dense `f64` tensors, reverse-mode differentiation, and optimisation.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{grad_check, relative_error, CoordCheck, GradCheckReport, GRAD_CHECK_FLOOR};
pub use graph::{AttnMask, Gradients, Graph, Var};
pub use optim::{adam_update, adam_update_grouped, AdamConfig, AdamState, LrSchedule};
pub use params::{Binder, ParamStore};
pub use tensor::{softmax, Tensor};
