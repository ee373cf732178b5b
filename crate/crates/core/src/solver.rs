//! Globalized semismooth Newton iteration on the penalized system.
//!
//! Each iteration solves `W d = −Φ` with `W` a selected generalized Jacobian
//! element. The Newton direction is kept when it exists and satisfies
//! `∇Ψᵀd ≤ −β‖d‖ᵗ`; otherwise the steepest-descent direction `−∇Ψ` is used.
//! Steps are `ρ^s` with the smallest `s` meeting the Armijo condition on
//! `Ψ = ½‖Φ‖²`.

use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::driver::{eoc, Eoc};
use crate::error::{Error, Result};
use crate::fb::DEFAULT_KINK_TOL;
use crate::linalg::{lu_solve, DEFAULT_PIVOT_TOL};
use crate::problem::{evaluate_all, BilevelProblem};
use crate::system::{assemble_residual, linearize, Iterate, JacobianOptions, Linearization};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub lambda: f64,
    /// Descent-test factor for the Newton direction.
    pub beta: f64,
    /// Stop when `‖Φ‖ ≤ eps`.
    pub eps: f64,
    /// Exponent of the descent test, `> 2`.
    pub t: f64,
    /// Backtracking factor in `(0, 1)`.
    pub rho: f64,
    /// Armijo constant in `(0, ½)`.
    pub sigma: f64,
    pub max_iter: usize,
    pub max_backtracks: usize,
    pub kink_tol: f64,
    pub pivot_tol: f64,
    /// Declare a merit-stationary point when `‖∇Ψ‖` falls to this level.
    pub grad_stall_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            beta: 1e-8,
            eps: 1e-8,
            t: 2.1,
            rho: 0.5,
            sigma: 1e-4,
            max_iter: 2000,
            max_backtracks: 60,
            kink_tol: DEFAULT_KINK_TOL,
            pivot_tol: DEFAULT_PIVOT_TOL,
            grad_stall_tol: 1e-12,
        }
    }
}

impl SolverConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        let c = Self {
            lambda,
            ..Self::default()
        };
        c.validate()?;
        Ok(c)
    }

    pub fn with_lambda(self, lambda: f64) -> Result<Self> {
        let c = Self { lambda, ..self };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidPenalty(self.lambda));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return bad(format!("eps must be non-negative, got {}", self.eps));
        }
        if !(self.t > 2.0 && self.t.is_finite()) {
            return bad(format!("t must exceed 2, got {}", self.t));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad(format!("rho must lie in (0, 1), got {}", self.rho));
        }
        if !(self.sigma > 0.0 && self.sigma < 0.5) {
            return bad(format!("sigma must lie in (0, 1/2), got {}", self.sigma));
        }
        for (name, v) in [
            ("kink_tol", self.kink_tol),
            ("pivot_tol", self.pivot_tol),
            ("grad_stall_tol", self.grad_stall_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        Ok(())
    }

    pub fn jacobian_options(&self) -> JacobianOptions {
        JacobianOptions::with_kink_tol(self.kink_tol)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Solved,
    /// `∇Ψ` vanished while `Φ` did not.
    MeritStationary,
    MaxIter,
    LineSearchStall,
    EvaluationFailed,
}

impl SolveStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Solved => "Solved",
            Self::MeritStationary => "MeritStationary",
            Self::MaxIter => "MaxIter",
            Self::LineSearchStall => "LineSearchStall",
            Self::EvaluationFailed => "EvaluationFailed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DirectionKind {
    Newton,
    Gradient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    pub d: DVector<f64>,
    pub kind: DirectionKind,
    /// `∇Ψᵀd`.
    pub slope: f64,
}

/// One accepted step `ζ_{k+1} = ζ_k + α_k d_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    pub residual_norm: f64,
    pub merit: f64,
    pub direction_kind: DirectionKind,
    pub slope: f64,
    pub step_size: f64,
    pub backtracks: usize,
    /// Stacked `ζ_k`.
    pub point: Vec<f64>,
    pub direction: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub problem: String,
    pub lambda: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    /// `‖Φ(ζ_k)‖` for `k = 0..=iterations`.
    pub residual_history: Vec<f64>,
    pub trace: Vec<IterationRecord>,
    pub final_point: Iterate,
    pub final_residual: f64,
    pub upper_objective: Option<f64>,
    pub lower_objective: Option<f64>,
    pub eoc: Eoc,
    pub wall_time_secs: f64,
    pub diagnostic: Option<String>,
}

impl SolveReport {
    pub fn solved(&self) -> bool {
        self.status == SolveStatus::Solved
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("line search found no acceptable step within {backtracks} backtracks")]
pub struct Stall {
    pub backtracks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineSearchOutcome {
    pub step_size: f64,
    pub backtracks: usize,
    pub next: Iterate,
    pub next_merit: f64,
}

fn stack_add(problem: &BilevelProblem, zeta: &Iterate, alpha: f64, d: &DVector<f64>) -> Iterate {
    let s = zeta.to_stacked() + d * alpha;
    Iterate::from_stacked(problem.dims(), s.as_slice()).expect("stacked length is fixed by dims")
}

/// Chooses the search direction from an existing linearization.
pub fn choose_direction(lin: &Linearization, config: &SolverConfig) -> Direction {
    let rhs = -&lin.residual.values;
    if let Ok(d) = lu_solve(&lin.jacobian.matrix, &rhs, config.pivot_tol) {
        if d.iter().all(|v| v.is_finite()) {
            let slope = lin.merit_gradient.dot(&d);
            if slope <= -config.beta * d.norm().powf(config.t) {
                return Direction {
                    d,
                    kind: DirectionKind::Newton,
                    slope,
                };
            }
        }
    }
    let d = -&lin.merit_gradient;
    let slope = -lin.merit_gradient.norm_squared();
    Direction {
        d,
        kind: DirectionKind::Gradient,
        slope,
    }
}

/// Search direction at `ζ_k`. Must only be called while `‖Φ(ζ_k)‖ > eps`.
pub fn step(problem: &BilevelProblem, config: &SolverConfig, zeta: &Iterate) -> Result<Direction> {
    let lin = linearize(problem, config.lambda, zeta, &config.jacobian_options())?;
    Ok(choose_direction(&lin, config))
}

/// Armijo backtracking from known `Ψ(ζ)` and `∇Ψ(ζ)ᵀd`.
///
/// Trial points whose evaluation fails count as rejected.
pub fn backtrack(
    problem: &BilevelProblem,
    config: &SolverConfig,
    zeta: &Iterate,
    d: &DVector<f64>,
    merit0: f64,
    slope: f64,
) -> std::result::Result<LineSearchOutcome, Stall> {
    if slope.is_nan() || slope >= 0.0 {
        return Err(Stall { backtracks: 0 });
    }
    let mut alpha = 1.0;
    for s in 0..=config.max_backtracks {
        let trial = stack_add(problem, zeta, alpha, d);
        if let Ok(r) = assemble_residual(problem, config.lambda, &trial) {
            let psi = r.merit();
            if psi <= merit0 + config.sigma * alpha * slope {
                return Ok(LineSearchOutcome {
                    step_size: alpha,
                    backtracks: s,
                    next: trial,
                    next_merit: psi,
                });
            }
        }
        alpha *= config.rho;
    }
    Err(Stall {
        backtracks: config.max_backtracks,
    })
}

/// Armijo line search along `d` from `ζ`.
pub fn line_search(
    problem: &BilevelProblem,
    config: &SolverConfig,
    zeta: &Iterate,
    d: &DVector<f64>,
) -> Result<std::result::Result<LineSearchOutcome, Stall>> {
    let lin = linearize(problem, config.lambda, zeta, &config.jacobian_options())?;
    let slope = lin.merit_gradient.dot(d);
    Ok(backtrack(
        problem,
        config,
        zeta,
        d,
        lin.residual.merit(),
        slope,
    ))
}

/// Runs the method from `start` until a stopping rule fires.
pub fn run(
    problem: &BilevelProblem,
    config: &SolverConfig,
    start: &Iterate,
) -> Result<SolveReport> {
    config.validate()?;
    start.check(problem.dims())?;
    let clock = Instant::now();
    let opts = config.jacobian_options();

    let mut zeta = start.clone();
    let mut history = Vec::new();
    let mut trace = Vec::new();
    let mut diagnostic = None;
    let mut k = 0;

    let status = loop {
        let lin = match linearize(problem, config.lambda, &zeta, &opts) {
            Ok(l) => l,
            Err(e) if k == 0 => return Err(e),
            Err(e) => {
                diagnostic = Some(e.to_string());
                break SolveStatus::EvaluationFailed;
            }
        };
        let norm = lin.residual.norm();
        history.push(norm);
        if norm <= config.eps {
            break SolveStatus::Solved;
        }
        if k >= config.max_iter {
            break SolveStatus::MaxIter;
        }
        if lin.merit_gradient.norm() <= config.grad_stall_tol {
            break SolveStatus::MeritStationary;
        }

        let dir = choose_direction(&lin, config);
        let merit0 = lin.residual.merit();
        let ls = match backtrack(problem, config, &zeta, &dir.d, merit0, dir.slope) {
            Ok(ls) => ls,
            Err(stall) => {
                diagnostic = Some(stall.to_string());
                break SolveStatus::LineSearchStall;
            }
        };
        if ls.next_merit.is_nan() || ls.next_merit >= merit0 {
            // Armijo held only through rounding; no further progress is possible.
            diagnostic = Some(format!("merit did not decrease below {merit0:e}"));
            break SolveStatus::LineSearchStall;
        }
        trace.push(IterationRecord {
            k,
            residual_norm: norm,
            merit: merit0,
            direction_kind: dir.kind,
            slope: dir.slope,
            step_size: ls.step_size,
            backtracks: ls.backtracks,
            point: zeta.to_stacked().as_slice().to_vec(),
            direction: dir.d.as_slice().to_vec(),
        });
        zeta = ls.next;
        k += 1;
    };

    let (upper_objective, lower_objective) = match evaluate_all(problem, &zeta.x, &zeta.y) {
        Ok(e) => (Some(e.upper_objective.value), Some(e.lower_objective.value)),
        Err(_) => (None, None),
    };
    let final_residual = history.last().copied().unwrap_or(f64::NAN);
    Ok(SolveReport {
        problem: problem.name().to_string(),
        lambda: config.lambda,
        status,
        iterations: k,
        eoc: eoc(&history),
        residual_history: history,
        trace,
        final_point: zeta,
        final_residual,
        upper_objective,
        lower_objective,
        wall_time_secs: clock.elapsed().as_secs_f64(),
        diagnostic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench;
    use crate::driver::default_start;
    use nalgebra::DMatrix;

    #[test]
    fn defaults_match_protocol() {
        let c = SolverConfig::default();
        assert_eq!(c.beta, 1e-8);
        assert_eq!(c.eps, 1e-8);
        assert_eq!(c.t, 2.1);
        assert_eq!(c.rho, 0.5);
        assert_eq!(c.sigma, 1e-4);
        assert_eq!(c.max_iter, 2000);
        assert_eq!(c.max_backtracks, 60);
        assert_eq!(c.kink_tol, 1e-12);
        assert_eq!(c.pivot_tol, 1e-12);
        assert_eq!(c.grad_stall_tol, 1e-12);
    }

    #[test]
    fn config_ranges_enforced() {
        assert!(SolverConfig::new(0.0).is_err());
        let base = SolverConfig::default();
        assert!(SolverConfig { t: 2.0, ..base }.validate().is_err());
        assert!(SolverConfig { rho: 1.0, ..base }.validate().is_err());
        assert!(SolverConfig { sigma: 0.5, ..base }.validate().is_err());
        assert!(SolverConfig { beta: 0.0, ..base }.validate().is_err());
        assert!(SolverConfig { eps: -1.0, ..base }.validate().is_err());
        assert!(SolverConfig {
            kink_tol: 0.0,
            ..base
        }
        .validate()
        .is_err());
        assert!(base.validate().is_ok());
    }

    #[test]
    fn newton_direction_near_solution() {
        let entry = bench::find(bench::QUADRATIC_PROJECTION).unwrap();
        let lambda = 1.0;
        let mut zeta = entry.certified_for(lambda).unwrap();
        zeta.x[0] += 1e-3;
        zeta.y[1] -= 1e-3;
        zeta.v[0] += 1e-3;
        let config = SolverConfig::new(lambda).unwrap();
        let dir = step(&entry.problem, &config, &zeta).unwrap();
        assert_eq!(dir.kind, DirectionKind::Newton);
        assert!(dir.slope <= -config.beta * dir.d.norm().powf(config.t));
        let ls = line_search(&entry.problem, &config, &zeta, &dir.d)
            .unwrap()
            .unwrap();
        assert_eq!(ls.backtracks, 0);
        assert_eq!(ls.step_size, 1.0);
    }

    #[test]
    fn singular_jacobian_falls_back_to_gradient() {
        // Duplicate rows make the linear system unsolvable.
        let config = SolverConfig::default();
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 1.0, 2.0]);
        let phi = DVector::from_vec(vec![1.0, -1.0]);
        let grad = w.tr_mul(&phi);
        let problem = bench::xy_linear();
        let layout = crate::system::BlockLayout::new(problem.dims());
        let lin = Linearization {
            residual: crate::system::ResidualVector {
                layout,
                values: phi,
            },
            jacobian: crate::system::JacobianMatrix { layout, matrix: w },
            merit_gradient: grad.clone(),
        };
        let dir = choose_direction(&lin, &config);
        assert_eq!(dir.kind, DirectionKind::Gradient);
        assert_eq!(dir.d, -grad);
    }

    #[test]
    fn starting_at_solution_takes_zero_iterations() {
        let entry = bench::find(bench::XY_LINEAR).unwrap();
        let config = SolverConfig::new(1.0).unwrap();
        let rep = run(&entry.problem, &config, &entry.certified_for(1.0).unwrap()).unwrap();
        assert_eq!(rep.status, SolveStatus::Solved);
        assert_eq!(rep.iterations, 0);
        assert!(rep.trace.is_empty());
        assert_eq!(rep.residual_history.len(), 1);
    }

    #[test]
    fn quadratic_projection_from_default_start() {
        let p = bench::quadratic_projection();
        let config = SolverConfig::new(1.0).unwrap();
        let start = default_start(&p, &[1.0], &[1.0, 1.0]).unwrap();
        let rep = run(&p, &config, &start).unwrap();
        assert_eq!(rep.status, SolveStatus::Solved, "{rep:?}");
        assert!(rep.final_residual <= 1e-8);
        assert!(rep.final_point.x[0].abs() <= 1e-6);
        assert!(rep.final_point.y.iter().all(|v| v.abs() <= 1e-6));
    }

    #[test]
    fn max_iter_is_respected() {
        let p = bench::quadratic_projection();
        let config = SolverConfig {
            max_iter: 1,
            ..SolverConfig::new(1.0).unwrap()
        };
        let start = default_start(&p, &[1.0], &[1.0, 1.0]).unwrap();
        let rep = run(&p, &config, &start).unwrap();
        assert_eq!(rep.status, SolveStatus::MaxIter);
        assert_eq!(rep.iterations, 1);
        assert_eq!(rep.residual_history.len(), 2);
    }

    #[test]
    fn rounding_level_progress_ends_as_stall() {
        // At λ = ½ the iteration reaches a nonzero local minimizer of Ψ.
        let p = bench::dempe_parabola();
        let config = SolverConfig::new(0.5).unwrap();
        let start = default_start(&p, &[1.0], &[1.0]).unwrap();
        let rep = run(&p, &config, &start).unwrap();
        assert_eq!(rep.status, SolveStatus::LineSearchStall);
        assert!(rep.iterations < config.max_iter);
        assert!(rep.trace.windows(2).all(|w| w[1].merit < w[0].merit));
    }

    #[test]
    fn non_descent_direction_stalls() {
        let p = bench::xy_linear();
        let config = SolverConfig::default();
        let zeta = Iterate::zeros(p.dims());
        let d = DVector::zeros(p.dims().total());
        assert!(backtrack(&p, &config, &zeta, &d, 1.0, 0.0).is_err());
    }

    #[test]
    fn tiny_gradient_step_terminates() {
        let entry = bench::find(bench::QUADRATIC_PROJECTION).unwrap();
        let config = SolverConfig::new(1.0).unwrap();
        let mut zeta = entry.certified_for(1.0).unwrap();
        zeta.x[0] = 1e-7;
        let lin = linearize(&entry.problem, 1.0, &zeta, &config.jacobian_options()).unwrap();
        let d = -&lin.merit_gradient;
        match line_search(&entry.problem, &config, &zeta, &d).unwrap() {
            Ok(ls) => {
                let slope = lin.merit_gradient.dot(&d);
                assert!(
                    ls.next_merit <= lin.residual.merit() + config.sigma * ls.step_size * slope
                );
                assert!(ls.backtracks <= config.max_backtracks);
            }
            Err(stall) => assert_eq!(stall.backtracks, config.max_backtracks),
        }
    }
}
