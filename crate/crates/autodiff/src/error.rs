//! Error type for graph construction and gradient checking.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum AutodiffError {
    /// Operand shapes do not conform for the named operation.
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
        expected: String,
    },
    /// A buffer length does not match the product of its shape.
    InvalidShape { shape: Vec<usize>, len: usize },
    /// An axis index is out of range for the operand rank.
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    /// Backward was requested from a tensor that is not a single element.
    NonScalarLoss { shape: Vec<usize> },
    /// The loss node does not depend on any gradient-tracked leaf.
    NoGradPath,
    /// Finite-difference step must be positive.
    InvalidEpsilon { eps: f64 },
}

impl fmt::Display for AutodiffError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch {
                op,
                shapes,
                expected,
            } => {
                write!(f, "{op}: shape mismatch, got ")?;
                for (i, s) in shapes.iter().enumerate() {
                    if i > 0 {
                        write!(f, " x ")?;
                    }
                    write!(f, "{s:?}")?;
                }
                write!(f, " ({expected})")
            }
            Self::InvalidShape { shape, len } => {
                write!(f, "shape {shape:?} does not match buffer length {len}")
            }
            Self::InvalidAxis { op, axis, rank } => {
                write!(f, "{op}: axis {axis} out of range for rank {rank}")
            }
            Self::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Self::NoGradPath => write!(f, "loss does not reach any gradient-tracked tensor"),
            Self::InvalidEpsilon { eps } => write!(f, "finite-difference step must be > 0, got {eps}"),
        }
    }
}

impl std::error::Error for AutodiffError {}
