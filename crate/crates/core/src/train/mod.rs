//! Losses, alternating optimization and the training loop.

pub mod checkpoint;
pub mod losses;
pub mod optim;
pub mod run;
pub mod schedule;
pub mod step;
