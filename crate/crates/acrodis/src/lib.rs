//! Local-first acronym disambiguation toolkit.
//!
//! Everything needed to prepare an acronym corpus, run zero-shot detection
//! and expansion prompts against locally hosted model backends, and score
//! the results with sequence-matching metrics. No corpus text ever leaves
//! the machine unless a non-private endpoint is explicitly forced.

pub mod corpus;
pub mod inference;
pub mod metrics;
pub mod pipeline;
pub mod prompting;
pub mod report;
pub mod textnorm;
