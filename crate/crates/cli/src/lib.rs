//! IO, file formats, configuration, and experiment orchestration around
//! the `epicast-core` forecasting engine.

pub mod checkpoint;
pub mod config;
pub mod dates;
pub mod error;
pub mod pipeline;
pub mod plot;
pub mod rawio;
pub mod runner;
