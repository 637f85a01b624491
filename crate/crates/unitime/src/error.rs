//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not conform for the attempted operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An operation received a tensor it cannot process (wrong rank,
    /// empty axis, non-scalar loss, ...).
    #[error("invalid operand for {op}: {reason}")]
    InvalidOperand { op: &'static str, reason: String },

    /// A gradient contained NaN or Inf; the optimizer refuses the step.
    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    /// Configuration is structurally valid but semantically broken.
    #[error("invalid config: {0}")]
    Config(String),

    /// Config file could not be parsed; the message names the offending key.
    #[error("config parse error: {0}")]
    ConfigParse(String),

    /// Problems reading or interpreting a data file.
    #[error("data error in {path}: {reason}")]
    Data { path: String, reason: String },

    /// Checkpoint bytes are not a valid container of the expected version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// The training loss became NaN; the caller receives the last good state.
    #[error("training diverged at epoch {epoch} (loss is not finite)")]
    Diverged { epoch: usize },

    /// Evaluation was asked for something the artifacts cannot provide.
    #[error("evaluation error: {0}")]
    Eval(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
