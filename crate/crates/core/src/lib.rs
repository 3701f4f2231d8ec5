//! Set-to-sequence learning-path recommendation.
//!
//! A concept-aware set encoder feeds a pointer-style LSTM decoder that
//! ranks candidate concepts into a learning path, trained with REINFORCE on
//! the learning effect reported by a synthetic student simulator and an
//! auxiliary knowledge-tracing loss.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod baselines;
pub mod episode;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod rng;
pub mod simulator;
pub mod training;
