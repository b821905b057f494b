//! A generalization laboratory for federated averaging on Gaussian linear
//! models.
//!
//! The library has two halves that validate each other:
//!
//! * [`sim`] executes the actual FedAvg process — every client draws fresh
//!   Gaussian data each round, runs one step, several batched steps, or
//!   trains to convergence, and the server takes the sample-count-weighted
//!   average — and aggregates Monte-Carlo statistics of the squared model
//!   error.
//! * [`theory`] evaluates the exact expected squared model error for the
//!   same three regimes in closed form, for heterogeneous and
//!   non-stationary plans as well as the balanced simple case.
//!
//! [`analysis`] layers studies on top (optimal local-step search,
//! double-descent sweeps over the model dimension, Monte-Carlo oracles for
//! the underlying matrix expectations), [`config`] holds problem
//! specifications and the deterministic seeding discipline, and [`linalg`]
//! provides the shared dense kernels.

pub mod analysis;
pub mod config;
pub mod error;
pub mod linalg;
pub mod sim;
pub mod theory;

pub use config::{
    HeterogeneitySchedule, Regime, RoundPlan, RunConfig, SystemSpec, ValidationReport,
};
pub use error::{Error, Result};
pub use sim::SimCurve;
pub use theory::TheoryCurve;
