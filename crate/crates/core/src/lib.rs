//! Safe lexical diversity for concept-to-text generation: a semantically
//! conditioned LSTM generator, a meta-classifier that learns which next words
//! are safe to sample, imitation-learning loops that train it against a
//! rollout-based expert, baseline decoders, and corpus metrics.

pub mod error;
pub mod expert;
pub mod corpus;
pub mod decoding;
pub mod generator;
pub mod imitation;
pub mod metaclassifier;
pub mod metrics;
pub mod model;
pub mod numkit;
pub mod toy;

pub use error::{Error, Result};
