//! Command implementations behind the `sola` binary.

pub mod checks;
pub mod commands;
pub mod report;
pub mod toy;

pub use commands::{cmd_bench, cmd_check, cmd_forward, cmd_range, cmd_train_toy, CheckOptions};
pub use report::RunReport;
pub use toy::{train_toy, ToyTask, TrainOptions};
