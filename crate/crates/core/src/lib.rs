//! QuadMix: video domain adaptation for semantic segmentation on a toy scale.
//!
//! The crate covers tensor I/O, seeded sampling, flow-guided ops, template
//! mixing, feature aggregation and alignment, a trainable toy model, and the
//! synthetic ShiftWorld benchmark.

pub mod aggregate;
pub mod augment;
pub mod bench;
pub mod config;
pub mod error;
pub mod engine;
pub mod flow;
pub mod losses;
pub mod metrics;
pub mod mixer;
pub mod model;
pub(crate) mod math;
pub mod rng;
pub mod shiftworld;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
