use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A tensor extent did not match what the operation requires.
    #[error("{op}: dimension mismatch on axis {axis}: expected {expected}, found {found}")]
    Dimension {
        op: &'static str,
        axis: usize,
        expected: usize,
        found: usize,
    },

    #[error("{op}: rank mismatch: expected {expected}, found {found}")]
    Rank {
        op: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    /// A precondition on arguments that is not about tensor shape.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("no annotations for view {view}, category {category}: pseudo depth prior unavailable")]
    PriorUnavailable { view: u32, category: u32 },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("point is behind the camera (depth {0})")]
    BehindCamera(f64),

    #[error("malformed archive: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
