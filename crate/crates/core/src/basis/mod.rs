//! Spline bases, difference penalties and the penalized least-squares engine
//! shared by the mean, covariance and joint fits.

mod normal;
mod penalty;
mod pls;
mod spline;

pub use normal::{accumulate_chunks_parallel, accumulate_normal_equations, NormalEquations, SparseRow};
pub use penalty::{difference_operator, difference_penalty, PenaltyMatrix};
pub use pls::{
    criterion_at, lambda_scale, solve_penalized_ls, solve_penalized_normal, Criterion, PenalizedLsFit, PenaltyBlock,
    PlsOptions, Smoothing,
};
pub use spline::{KnotLayout, SplineBasis};
