//! Knowledge-guided personalized response engine.
//!
//! Retrieves knowledge for a dialog turn, picks the personas worth
//! mentioning, generates candidate responses and reranks them with a
//! reward that blends BLEU, embedding transport similarity and persona
//! agreement.

pub mod dataset;
pub mod embeddings;
pub mod error;
pub mod generation;
pub mod metrics;
pub mod model;
pub mod persona_select;
pub mod pipeline;
pub mod retrieval;
pub mod reward;

pub use error::{Error, Result};
