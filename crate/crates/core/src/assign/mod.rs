//! Exact combinatorial kernels: farthest point sampling and minimum-cost
//! bipartite matching.

mod fps;
mod hungarian;

pub use fps::{farthest_point_sampling, normalize_unit_cube};
pub use hungarian::{hungarian, Assignment, CostMatrix};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AssignError {
    #[error("cannot match {rows} instances to {cols} queries")]
    TooManyRows { rows: usize, cols: usize },
    #[error("non-finite cost at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("cost matrix has {actual} entries, expected {rows}x{cols}")]
    Shape { rows: usize, cols: usize, actual: usize },
    #[error("cannot sample {requested} of {available} points")]
    TooManySamples { requested: usize, available: usize },
    #[error("start index {start} out of range for {available} points")]
    BadStart { start: usize, available: usize },
    #[error("non-finite coordinate at point {0}")]
    NonFiniteCoord(usize),
}
