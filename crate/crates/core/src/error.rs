use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(&'static str),
    #[error("too few correspondences: need at least {needed}, got {got}")]
    TooFewCorrespondences { needed: usize, got: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("pose graph is disconnected ({} components)", components.len())]
    DisconnectedGraph { components: Vec<Vec<usize>> },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("edge ({0}, {1}) has no correspondences")]
    EmptyCorrespondences(usize, usize),
    #[error("duplicate edge between vertices {0} and {1}")]
    DuplicateEdge(usize, usize),
    #[error("self-loop on vertex {0}")]
    SelfLoop(usize),
    #[error("matrix is not a proper rotation")]
    InvalidRotation,
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
