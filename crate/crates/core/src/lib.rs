//! Query-directed sparse transformer for long-document reranking.

pub mod analysis;
pub mod attention;
pub mod bench;
pub mod cli;
pub mod error;
pub mod model;
pub mod pattern;
pub mod pipeline;
pub mod tensor;

pub use error::{QdstError, Result};
