//! Frequency-band mixture-of-experts forecasting.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod moe;
pub mod normalization;
pub mod params;
pub mod predictor;
pub mod rng;
pub mod series;
pub mod spectral;
pub mod training;

pub use error::{Error, Result};
