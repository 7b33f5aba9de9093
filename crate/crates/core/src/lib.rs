//! Unsupervised behavioral modes for trajectory forecasting.
//!
//! A self-conditioned GAN clusters its discriminator's features of full
//! tracks into modes; per-mode errors and sizes then drive weighted training
//! of context-free forecasters.

pub mod clustering;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod forecast;
pub mod gan;
pub mod ingest;
pub mod nn;
pub mod plots;
pub mod selfcond;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod util;
pub mod weights;

pub use error::{Error, Result};
