//! Minimal reverse-mode automatic differentiation over dense 2-D arrays.

mod norm;
mod optim;
mod params;
mod tape;
mod tensor;

pub use norm::{apply_stat_updates, BatchNorm, BN_EPS, BN_MOMENTUM};
pub use optim::{sgd_step, Sgd};
pub use params::{BufferId, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, NormMode, Segments, StatUpdate, Tape, Var};
pub use tensor::Tensor;
