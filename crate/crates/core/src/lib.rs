//! Cross-script handwritten word retrieval with an asymmetric dual encoder.
//!
//! Word images are embedded by a small trainable visual tower and matched
//! against frozen, language-agnostic text anchors passed through a trainable
//! projector. Training combines a symmetric InfoNCE objective with a
//! label-guided invariance term.

pub mod config;
pub mod error;
pub mod evalmetrics;
pub mod fsio;
pub mod model;
pub mod numcore;
pub mod objectives;
pub mod pipeline;
pub mod quantsim;
pub mod retrieval;
pub mod seed;
pub mod synthgen;
pub mod training;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use pipeline::Layout;
