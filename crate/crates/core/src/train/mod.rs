//! Reverse-mode gradients, SGD, data loading and a small training loop.

mod block;
mod check;
pub mod data;
mod model;
mod sgd;
mod tape;
pub mod vjp;

pub use block::{record_block, BlockVars};
pub use check::{finite_diff_check, GradCheckReport, FINITE_DIFF_STEP};
pub use data::{augment, load_cifar10, synth_dataset, Dataset};
pub use model::{count_correct, train, CheckpointIndex, EpochMetrics, Network, TrainOutcome};
pub use sgd::{sgd_step, ParamState, SyntheticConfig, TrainConfig};
pub use tape::{column, BatchStats, Gradients, Tape, Var, BATCH_NORM_EPS};
