//! Dense matrices, reverse-mode autodiff, AdamW and the learning-rate schedule.

mod layers;
mod matrix;
pub mod ops;
mod optim;
mod params;
mod rng;
mod tape;

pub use layers::{ActivationKind, Linear, Mlp};
pub use matrix::Matrix;
pub use optim::{adamw_step, AdamWConfig, AdamWState, LrSchedule};
pub use params::{Graph, Param, ParamStore};
pub use rng::{Rng, Stream};
pub use tape::{combine, softmax_masked, Activation, BackwardStats, LossKind, PoolKind, Tape, Var};
