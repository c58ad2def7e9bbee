//! File formats, training pipeline, CLI and live session gateway around
//! [`imf_core`].

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod gateway;
pub mod manifest;
pub mod pipeline;
pub mod report;
pub mod scenario;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Scenario(#[from] scenario::ScenarioError),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error(transparent)]
    Experiment(#[from] imf_core::experiments::ExperimentError),
    #[error(transparent)]
    Supervisor(#[from] imf_core::supervisor::SupervisorError),
    #[error(transparent)]
    Utility(#[from] imf_core::utility::UtilityError),
    #[error(transparent)]
    Sim(#[from] imf_core::netsim::SimError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("plot error: {0}")]
    Plot(String),
    #[error("{0}")]
    Invalid(String),
}
