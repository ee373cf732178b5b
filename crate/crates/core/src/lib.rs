//! Semismooth Newton solver for optimistic bilevel programs.
//!
//! The follower problem is replaced by a value-function penalty: the leader
//! minimizes `F + λ(f(x, y) − φ(x))`, where `φ` is the follower's optimal value,
//! and the resulting KKT system is reformulated with the Fischer–Burmeister
//! function. Each `λ` gives a square nonsmooth system `Φ(ζ) = 0`, solved by a
//! globalized semismooth Newton method.
//!
//! ```
//! use bilevel_ssn::{bench, driver::{default_start, SweepConfig}, solver::{run, SolverConfig}};
//!
//! let problem = bench::quadratic_projection();
//! let start = default_start(&problem, &[1.0], &[1.0, 1.0]).unwrap();
//! let report = run(&problem, &SolverConfig::new(1.0).unwrap(), &start).unwrap();
//! assert!(report.solved());
//! # let _ = SweepConfig::default();
//! ```

pub mod analysis;
pub mod bench;
pub mod driver;
pub mod error;
pub mod fb;
pub mod linalg;
pub mod problem;
pub mod report;
pub mod solver;
pub mod system;

pub use error::{Error, EvaluationError, Result};
pub use problem::{
    BilevelProblem, KnownStatus, ProblemDims, ProblemFunctions, ScalarEval, VectorEval,
};
pub use solver::{SolveReport, SolveStatus, SolverConfig};
pub use system::Iterate;
