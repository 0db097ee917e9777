//! Cross-city few-shot traffic forecasting with a traffic pattern bank.

pub mod archive;
pub mod autoencoder;
pub mod autograd;
pub mod bank;
pub mod data;
pub mod error;
pub mod experiment;
pub mod forecaster;
pub mod meta_trainer;
pub mod metrics;
pub mod nn;

pub use error::{Result, TpbError};
