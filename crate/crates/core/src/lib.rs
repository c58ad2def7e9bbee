//! Core of an adaptive intent management function (IMF).
//!
//! A supervisor policy assigns sub-goals to pre-trained, goal-conditioned
//! lower-level agents that steer a simulated network slice. A dynamic utility
//! network (DUN) reads range-normalized utility features so the supervisor can
//! follow priority and utility-form changes at run time without retraining.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the CLI and the
//! live gateway live in the `imf` companion crate.

#![no_std]
// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod agents;
pub mod experiments;
pub mod netsim;
pub mod nn;
pub mod rng;
pub mod supervisor;
pub mod utility;

pub use agents::{AgentSpec, LowerSystems, SubGoal, SystemKind};
pub use netsim::{ControlInputs, KpiVector, SliceConfig, SliceState};
pub use supervisor::{SupervisorModel, TrainConfig};
pub use utility::{Expectation, ExpectationId, IntentSet, UtilityForm};
