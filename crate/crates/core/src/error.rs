//! Error types shared across the crate.

use thiserror::Error;

use crate::topology::Edge;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape/data mismatch: shape {shape:?} implies {expected} elements, got {got}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("contraction pairs axis {axis_a} of lhs (extent {extent_a}) with axis {axis_b} of rhs (extent {extent_b})")]
    ContractionMismatch {
        axis_a: usize,
        extent_a: usize,
        axis_b: usize,
        extent_b: usize,
    },
    #[error("axis {axis} out of range for rank-{rank} tensor")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("axis {axis} paired more than once")]
    DuplicateAxis { axis: usize },
    #[error("expected a matrix, got rank-{rank} tensor")]
    NotAMatrix { rank: usize },
    #[error("max_rank must be >= 1")]
    ZeroRank,
    #[error("SVD did not converge")]
    SvdFailed,
    #[error("non-finite value produced in {op}")]
    NonFinite { op: &'static str },
}

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("need at least 3 variables, got {0}")]
    TooFewLeaves(usize),
    #[error("edge {0} not present in topology")]
    UnknownEdge(Edge),
    #[error("invariant violated: {0}")]
    InvariantViolated(String),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bond dimension must be >= 2, got {0}")]
    ChiTooSmall(usize),
    #[error("model is degenerate: wave function is identically zero")]
    DegenerateModel,
    #[error("sample {sample} has zero amplitude under the model")]
    ZeroAmplitude { sample: usize },
    #[error("sample {sample} has zero marginal probability p(a,b)")]
    ZeroProbability { sample: usize },
    #[error("configuration length {got} does not match variable count {expected}")]
    WrongLength { expected: usize, got: usize },
    #[error("exact enumeration supports n <= {max}, model has n = {n}")]
    EnumerationGuard { n: usize, max: usize },
    #[error("edge {0} is not adjacent to the root edge {1}")]
    NonAdjacentTarget(Edge, Edge),
    #[error("bmi_empirical requires the root edge, got {got} while root is {root}")]
    NotRootEdge { got: Edge, root: Edge },
    #[error("pattern superposition needs chi >= {needed}, got {chi}")]
    InsufficientRank { needed: usize, chi: usize },
    #[error("canonical-form violation: {0}")]
    CanonicalViolation(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("infeasible spec: {0}")]
    InfeasibleSpec(String),
    #[error("batch must contain at least {need} rows, got {got}")]
    TooFewRows { need: usize, got: usize },
    #[error("minibatch size {size} exceeds available rows {rows}")]
    BatchTooLarge { size: usize, rows: usize },
    #[error("batch entries must be 0 or 1, found {found} at row {row}, column {col}")]
    NonBinary { found: u8, row: usize, col: usize },
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("target edge {0} is a leaf edge; reconnection targets must be virtual bonds")]
    LeafTarget(Edge),
    #[error("variable sets differ: result has {result} variables, reference has {reference}")]
    VariableMismatch { result: usize, reference: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Crate-wide error, a union of the per-module errors.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
}
