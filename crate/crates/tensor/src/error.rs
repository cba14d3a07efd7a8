use thiserror::Error;

/// Errors raised by tensor construction and graph operations.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} elements but {actual} were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("every extent must be at least 1, got shape {0:?}")]
    ZeroExtent(Vec<usize>),
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: mask has {mask} entries but the axis has extent {extent}")]
    MaskLength {
        op: &'static str,
        mask: usize,
        extent: usize,
    },
    #[error("{op}: mask marks no position as valid")]
    DegenerateMask { op: &'static str },
    #[error("{op}: index {index} out of range for extent {extent}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("{op}: needs at least one input")]
    Empty { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape; call reset_backward first")]
    BackwardTwice,
}

pub type Result<T> = std::result::Result<T, TensorError>;
