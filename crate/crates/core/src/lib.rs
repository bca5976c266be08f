//! Dual-flow medical dialogue modelling: an entity-graph flow and a
//! dialogue-act flow, interwoven by cross-attention, that guide a gated
//! encoder-decoder response generator.

pub mod corpus;
pub mod dualflow;
pub mod error;
pub mod generator;
pub mod kg;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod training;
pub mod vocab;

pub use error::{DfmedError, Result};
