//! Tensor arithmetic, reverse-mode differentiation, and the optimizer.
//!
//! Everything downstream of this module is expressed in these primitives.
//! All computation is in f64; determinism on a fixed platform is a contract.

pub mod adamw;
pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use adamw::{AdamW, AdamWConfig};
pub use tape::{causal_mask, Tape, Var};
pub use tensor::Tensor;
