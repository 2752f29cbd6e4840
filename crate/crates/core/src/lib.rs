//! Election forecasting by evidence synthesis.
//!
//! A survey-trained multinomial-logit model supplies province-level vote
//! simulations; a poll-error model with house, election and trend effects
//! scores each simulation against the published polls; importance weights
//! turn the weighted simulations into vote and D'Hondt seat forecasts.

pub mod artifacts;
pub mod benchmarks;
pub mod config;
pub mod error;
pub mod fundamental;
pub mod inference;
pub mod ingest;
mod par;
pub mod pipeline;
pub mod polls;
pub mod seats;
pub mod simplex;
pub mod synth;
pub mod synthesis;

pub use error::{Error, Result};
pub use simplex::{lift, reduce, softmax, CovMatrix, PartyCanon, ReducedVector, ShareVector};
