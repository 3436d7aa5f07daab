//! Experiment harness: configuration, CLI, benchmark drivers, inspection
//! reports, and the Monte-Carlo similarity verifier.

pub mod cli;
pub mod config;
pub mod experiments;
pub mod inspect;
pub mod mc;

use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::datagen::DataError;
use crate::losses::LossError;
use crate::trainer::TrainError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
