//! Entity-aspect pair generation and pairwise semantic matching for
//! scientific document retrieval.
//!
//! The offline side turns a corpus into canonical (entity, aspect) pairs,
//! a merged vocabulary, and two small relevance predictors. The online side
//! builds pairs for a query and reranks a dense retriever's candidates by
//! fusing base, pair, and entity similarities.

pub mod candidates;
pub mod error;
pub mod eval;
pub mod matching;
pub mod model;
pub mod pairgen;
mod par;
pub mod pipeline;
pub mod predictors;
pub mod providers;
pub mod relevance;
pub mod synth;
pub mod text;
pub mod vocab;

pub use error::{Error, Result};
