//! Iterative non-autoregressive sequence generation with mask-predict decoding.

pub mod checkpoint;
pub mod decoding;
mod error;
pub mod eval;
pub mod masking;
pub mod model;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use masking::{MaskPlan, Schedule};
pub use model::{Model, ModelBundle, ModelConfig, Regime};
