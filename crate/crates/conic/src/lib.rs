//! Convex quadratic programs over products of zero, nonnegative,
//! second-order and positive-semidefinite cones, with a small
//! operator-splitting solver.

pub mod admm;
pub mod cone;
pub mod program;
pub mod settings;
pub mod sparse;

pub use admm::{solve, solve_with_warm_start, Solution, SolverError, WarmStart};
pub use cone::{smat, svec, triangle, triu_index, Cone};
pub use program::{ConicProgram, ProgramBuilder, ProgramError, Row};
pub use settings::{IterationLog, SolveReport, SolveStatus, SolverSettings};
pub use sparse::CscMatrix;
