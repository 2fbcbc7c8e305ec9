//! Prompt-based hateful meme classification: prompt-sequence assembly
//! with a fixed region layout, regional global extraction, multi-view
//! perception scoring, and prompt-aware contrastive training, on top of a
//! small reverse-mode autodiff core.

pub mod assembler;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod oracle;
pub mod params;
pub mod pcl;
pub mod pmp;
pub mod tensor;
pub mod trainer;

pub use error::{PenError, Result};
