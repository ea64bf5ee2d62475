//! Coherence-aware two-pass document translation: corpus handling, the
//! Transformer model with a draft-reading second decoder, the order-reward
//! teacher, joint likelihood and self-critical training, and evaluation.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod teacher;
pub mod training;

pub use error::{Error, Result};
