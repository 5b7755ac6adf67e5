//! STAR: slot self-attentive dialogue state tracking on a small reverse-mode
//! autodiff engine.

pub mod context;
pub mod corpus;
pub mod correlation;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod tracker;
pub mod train;
