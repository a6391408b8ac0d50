//! Federated training of small diffusion denoisers with optional wire
//! quantization.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod quantizer;
pub mod report;
pub mod rng;
pub mod verify;

pub use error::{Error, Result};
