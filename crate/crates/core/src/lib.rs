//! IRS-assisted wideband spectrum sensing.
//!
//! The crate is organised bottom-up:
//!
//! - [`channel`]: direct, IRS-reflected and total power gains between primary
//!   and secondary users.
//! - [`simgen`]: labelled PSD dataset synthesis (occupancy, leakage, noise),
//!   plus a time-series PSD estimator.
//! - [`nn`]: a multi-task CNN with shared shallow layers and band-specific
//!   grouped deep layers, written with explicit forward/backward passes.
//! - [`collab`]: hierarchical parameter averaging across sensing nodes, with
//!   standalone and FedAvg baselines.
//! - [`metrics`]: accuracy, probability of detection and false alarm.
//! - [`config`] and [`experiment`]: the config-driven experiment runner behind
//!   the `irs-sense` binary.

pub mod channel;
pub mod collab;
pub mod config;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod simgen;

pub use error::{Error, Result};
