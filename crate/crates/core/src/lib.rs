//! Latent-space forecasting of daily sea-ice concentration out to 180 days.
//!
//! The pipeline compresses each daily grid into a latent vector
//! ([`latent`]), forecasts latent sequences with interchangeable backbones
//! ([`backbones`]), chains 15-day forecasts into 180-day rollouts
//! ([`rollout`]), optionally blends models ([`ensemble`]) and scores
//! everything in grid space ([`metrics`]).

pub mod autodiff;
pub mod backbones;
pub mod bench;
pub mod ensemble;
mod error;
pub mod grid;
pub mod latent;
pub mod metrics;
pub mod rollout;

pub use error::{Error, Result};
