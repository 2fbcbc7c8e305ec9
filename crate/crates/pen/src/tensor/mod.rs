//! Minimal differentiable computation substrate.
//!
//! Dense tensors of rank 0..2 recorded on a define-by-run graph, with
//! reverse-mode gradient accumulation. The op set is exactly the closure
//! needed by the perception head and its losses; nothing more.

mod graph;
pub mod checkpoint;
pub mod lstm;

pub use graph::{Graph, TensorRef};

/// Element type for tensors. Training defaults to `f32`; gradient-check
/// mode forces `f64`.
pub trait Scalar:
    num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64c(v: f64) -> Self;
    fn to_f64c(self) -> f64;
    fn from_f32c(v: f32) -> Self;
    fn to_f32c(self) -> f32;
}

impl Scalar for f32 {
    fn from_f64c(v: f64) -> Self {
        v as f32
    }
    fn to_f64c(self) -> f64 {
        self as f64
    }
    fn from_f32c(v: f32) -> Self {
        v
    }
    fn to_f32c(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    fn from_f64c(v: f64) -> Self {
        v
    }
    fn to_f64c(self) -> f64 {
        self
    }
    fn from_f32c(v: f32) -> Self {
        v as f64
    }
    fn to_f32c(self) -> f32 {
        self as f32
    }
}

/// Denominator guard for cosine similarity.
pub const COSINE_EPS: f64 = 1e-6;
