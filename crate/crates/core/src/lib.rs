//! Reply-structure recovery for multi-party conversations with a masked
//! hierarchical transformer.

pub mod corpus;
pub mod decode;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod fsutil;
pub mod graph;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
