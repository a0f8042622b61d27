//! Temporal self-contrast decoding.
//!
//! A small decoder-only backbone is trained from scratch, a conditional
//! multi-token projector is trained on its frozen hidden states, and decoding
//! contrasts the backbone's next-token distribution against the projector's
//! predictions from stale hidden states.

pub mod cmtpp;
pub mod config;
pub mod decoding;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
