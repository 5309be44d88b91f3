//! Gated delta-rule associative memory for frozen attention backbones.
//!
//! A fixed-size online state per hooked layer is read before attention,
//! turned into low-rank query/key/value/output corrections, and then written
//! with a dimension-wise gated delta rule. Only the memory maps train; the
//! backbone stays frozen.

pub mod error;
pub mod numerics;
pub mod osam;
pub mod params;
pub mod backbone;
pub mod projections;
pub mod steering;
pub mod write_policy;
pub mod model;
pub mod checkpoint;
pub mod training;
pub mod tasks;
pub mod pretrain;
pub mod eval;
pub mod config;
pub mod experiment;

pub use error::{Error, Result};
