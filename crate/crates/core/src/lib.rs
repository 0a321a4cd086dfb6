//! Progressive layer freezing for video masked autoencoders: the prediction
//! target moves from pixels to the outputs of ever deeper frozen layers.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod cost;
pub mod data;
pub mod engine;
pub mod error;
pub mod jepa;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod patch;
pub mod readout;
pub mod rope;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
