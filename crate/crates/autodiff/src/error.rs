use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    /// Input shapes do not conform to the op's shape rule.
    #[error("dimension error in {op}: {shapes}")]
    Dimension { op: &'static str, shapes: String },

    #[error("argument error in {op}: {msg}")]
    Argument { op: &'static str, msg: String },

    /// Misuse of a tape, e.g. a variable recorded on a different tape.
    #[error("tape state error: {0}")]
    State(String),

    #[error("numeric error in {op}: {msg}")]
    Numeric { op: &'static str, msg: String },
}

impl TensorError {
    pub(crate) fn dims(op: &'static str, shapes: &[&[usize]]) -> Self {
        let shapes = shapes
            .iter()
            .map(|s| format!("{s:?}"))
            .collect::<Vec<_>>()
            .join(" vs ");
        TensorError::Dimension { op, shapes }
    }

    pub(crate) fn arg(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Argument { op, msg: msg.into() }
    }
}
