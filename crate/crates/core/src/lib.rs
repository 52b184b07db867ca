//! Knowledge tracing over student interaction logs: factor features, two attention pools and a deep scoring head.

pub mod dataset;
pub mod error;
pub mod factors;
pub mod harness;
pub mod network;
pub mod pretrain;
pub mod question_graph;

pub use error::{KtError, Result};
