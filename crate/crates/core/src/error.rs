use thiserror::Error;

use crate::sdot::SolveReport;

/// Errors produced by the geometric engine, the transport solver and the
/// diagnostics built on top of them.
#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("duplicate sites: points {0} and {1} coincide")]
    DuplicateSites(usize, usize),

    #[error("transport solver did not converge after {} iterations (residual {:.3e})", .0.iterations, .0.final_residual)]
    NotConverged(SolveReport),

    #[error("power cell {0} carries zero mass")]
    EmptyCell(usize),

    #[error("density has zero total mass")]
    ZeroMass,

    #[error("epsilon {epsilon} exceeds the minimum pairwise distance {min_pairwise}")]
    EpsilonTooLarge { epsilon: f64, min_pairwise: f64 },

    #[error("grid point cloud needs a perfect square, got N = {0}")]
    NonSquareN(usize),

    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, Error>;
