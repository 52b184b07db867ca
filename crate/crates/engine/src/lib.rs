//! A small reverse-mode differentiation engine.
//!
//! Tensors are dense row-major matrices of `f64`. A [`Tape`] borrows a
//! [`ParamStore`], records every forward op, and produces per-parameter
//! [`Gradients`] on [`Tape::backward`]. [`Adagrad`] consumes accumulated
//! gradients; [`grad_check`] verifies adjoints by central differences.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod param;
pub mod suite;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use error::{EngineError, Result};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use optim::Adagrad;
pub use param::{Gradients, ParamId, ParamStore, Parameter};
pub use tape::{cosine, Conv1dSpec, NodeId, SparseRows, Tape, BCE_CLAMP, COSINE_NORM_FLOOR};
pub use tensor::Tensor;
