//! Multi-identity routed conditioning for a miniature video diffusion
//! transformer, trained and evaluated on a procedural corpus with exact
//! ground truth.

pub mod backbone;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod identity_embedding;
pub mod model;
pub mod nn;
pub mod projector;
pub mod router;
pub mod supervision;
pub mod synthdata;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
