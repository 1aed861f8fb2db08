//! Feasibility of linear matrix inequalities in one symmetric matrix variable
//! and a few scalars.
//!
//! Problems are assembled with [`LmiProblem`] and [`MatrixExpr`], decided with
//! [`solve`], and any witness can be re-checked with [`verify`] without
//! trusting the solver.

mod error;
mod problem;
mod solver;
mod verify;

pub use error::LmiError;
pub use problem::{
    Coef, LmiConstraint, LmiProblem, LmiSolution, MatrixExpr, Relation, ScalarId, ScalarVar, Sign,
};
pub use solver::{solve, solve_count, solve_with, Inconclusive, Infeasibility, SolveOptions, SolveOutcome};
pub use verify::{verify, ConstraintResidual, ResidualReport};
