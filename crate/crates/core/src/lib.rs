//! Hybrid physics/learning classification.
//!
//! The crate bundles two physical-layer simulators (MIMO-OFDM channel
//! frequency responses and an asynchronous DS-CDMA uplink), suboptimal
//! maximum-likelihood parameter estimators for both, a small feed-forward
//! network engine, and the domain-adversarial trainer that combines a few
//! measured samples with many synthetic ones drawn from the fitted models.

pub mod cdma;
pub mod channel_cfr;
pub mod estimator_cfr;
pub mod experiments;
pub mod hyphylearn;
pub mod error;
pub mod linalg;
pub mod nnet;
pub mod spoofing;

pub use error::{Error, Result};
pub use linalg::C64;
