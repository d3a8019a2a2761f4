//! Forecasting downstream accuracy of training runs from their observed
//! accuracy trajectories and token-level validation probabilities.

pub mod datapipe;
pub mod encoders;
mod error;
pub mod evalharness;
pub mod forecaster;
pub mod fsutil;
pub mod logfit;
pub mod synthgen;

pub use error::{Error, Result};
