//! Next-query generation from search sessions.
//!
//! Sessions are segmented from raw interaction logs, turned into four
//! behavioral hypotheses, encoded by one shared transformer encoder and fused
//! position by position with a learned attention over hypotheses before
//! decoding suggestions with beam search. A co-occurrence baseline, top-k
//! metrics and the analysis breakdowns sit alongside.

pub mod analysis;
pub mod autograd;
pub mod decoder;
pub mod error;
pub mod hypothesis;
pub mod metrics;
pub mod model;
pub mod mps;
pub mod session;
pub mod synth;
pub mod text;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
