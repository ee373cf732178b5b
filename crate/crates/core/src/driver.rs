//! Penalty sweeps, best-run selection and run metrics.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result};
use crate::problem::{evaluate_all, BilevelProblem, KnownStatus};
use crate::solver::{run, SolveReport, SolveStatus, SolverConfig};
use crate::system::Iterate;

/// `λ ∈ {2⁻¹, 2⁰, …, 2⁷}`.
pub const DEFAULT_LAMBDA_GRID: [f64; 9] = [0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0];

/// Empirical order of convergence over the last three residual norms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "value")]
pub enum Eoc {
    /// One of the final norms is exactly zero.
    Exact,
    Value(f64),
    /// Fewer than three norms were recorded.
    Absent,
    /// The log ratios were not finite.
    Undefined,
}

impl Eoc {
    pub fn value(&self) -> Option<f64> {
        match self {
            Self::Value(v) => Some(*v),
            _ => None,
        }
    }
}

/// `max{log‖Φ_{K−1}‖ / log‖Φ_{K−2}‖, log‖Φ_K‖ / log‖Φ_{K−1}‖}`.
pub fn eoc(history: &[f64]) -> Eoc {
    let k = history.len();
    if k < 3 {
        return Eoc::Absent;
    }
    let tail = &history[k - 3..];
    if tail.contains(&0.0) {
        return Eoc::Exact;
    }
    let l: Vec<f64> = tail.iter().map(|v| v.ln()).collect();
    let (a, b) = (l[1] / l[0], l[2] / l[1]);
    let value = a.max(b);
    if !a.is_nan() && !b.is_nan() && value.is_finite() {
        Eoc::Value(value)
    } else {
        Eoc::Undefined
    }
}

/// Relative deviations from the reported leader and follower values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaMetrics {
    pub delta_upper: f64,
    pub delta_lower: f64,
    /// Absent when the reported values are not known to be attained.
    pub delta: Option<f64>,
}

pub fn delta_metrics(
    upper: f64,
    lower: f64,
    known_upper: Option<f64>,
    known_lower: Option<f64>,
    status: KnownStatus,
) -> Option<DeltaMetrics> {
    let (fu, fl) = (known_upper?, known_lower?);
    let delta_upper = (upper - fu) / fu.abs().max(1.0);
    let delta_lower = (lower - fl) / fl.abs().max(1.0);
    let delta = match status {
        KnownStatus::Optimal => Some(delta_upper.abs().max(delta_lower.abs())),
        KnownStatus::Known => Some(delta_upper.max(delta_lower)),
        KnownStatus::Unknown => None,
    };
    Some(DeltaMetrics {
        delta_upper,
        delta_lower,
        delta,
    })
}

/// Starting iterate with `z⁰ = y⁰`, `u⁰ = |G|`, `v⁰ = |g(x⁰, y⁰)|` and `w⁰ = v⁰`.
pub fn default_start(problem: &BilevelProblem, x0: &[f64], y0: &[f64]) -> Result<Iterate> {
    let dims = problem.dims();
    check_len("x0", dims.n, x0.len())?;
    check_len("y0", dims.m, y0.len())?;
    let e = evaluate_all(problem, x0, y0)?;
    let u: Vec<f64> = e.upper_constraints.values.iter().map(|v| v.abs()).collect();
    let v: Vec<f64> = e.lower_constraints.values.iter().map(|v| v.abs()).collect();
    Ok(Iterate {
        x: x0.to_vec(),
        y: y0.to_vec(),
        z: y0.to_vec(),
        u,
        w: v.clone(),
        v,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub lambda_grid: Vec<f64>,
    /// Parameters shared by every run; `lambda` is overwritten per grid point.
    pub solver: SolverConfig,
    pub parallel: bool,
    /// Leader and follower starting values. The problem's registered start,
    /// or all ones, is used when absent.
    pub start: Option<(Vec<f64>, Vec<f64>)>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lambda_grid: DEFAULT_LAMBDA_GRID.to_vec(),
            solver: SolverConfig::default(),
            parallel: true,
            start: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaRun {
    pub lambda: f64,
    pub report: SolveReport,
    /// Only reported for runs that solved the penalized system.
    pub delta: Option<DeltaMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub problem: String,
    pub runs: Vec<LambdaRun>,
    /// Index into `runs` of the selected run.
    pub best: Option<usize>,
    /// False when no run solved and the best run was chosen by residual.
    pub converged: bool,
    /// Smallest defined `δ` over the grid.
    pub delta_star: Option<f64>,
    pub wall_time_secs: f64,
}

impl SweepReport {
    pub fn best_run(&self) -> Option<&LambdaRun> {
        self.best.map(|i| &self.runs[i])
    }

    pub fn best_lambda(&self) -> Option<f64> {
        self.best_run().map(|r| r.lambda)
    }
}

/// Picks the solved run with least leader objective, earliest on ties. With no
/// solved run, falls back to the least final residual.
pub fn select_best(runs: &[LambdaRun]) -> (Option<usize>, bool) {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in runs.iter().enumerate() {
        if !r.report.solved() {
            continue;
        }
        let Some(f) = r.report.upper_objective else {
            continue;
        };
        if best.is_none_or(|(_, b)| f < b) {
            best = Some((i, f));
        }
    }
    if let Some((i, _)) = best {
        return (Some(i), true);
    }
    let key = |r: &LambdaRun| {
        let v = r.report.final_residual;
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut fallback: Option<usize> = None;
    for (i, r) in runs.iter().enumerate() {
        if fallback.is_none_or(|j| key(r) < key(&runs[j])) {
            fallback = Some(i);
        }
    }
    (fallback, false)
}

fn run_one(
    problem: &BilevelProblem,
    config: &SolverConfig,
    lambda: f64,
    start: &Iterate,
) -> Result<LambdaRun> {
    let solver = config.with_lambda(lambda)?;
    let report = run(problem, &solver, start)?;
    let delta = match (
        report.status,
        report.upper_objective,
        report.lower_objective,
    ) {
        (SolveStatus::Solved, Some(fu), Some(fl)) => delta_metrics(
            fu,
            fl,
            problem.known_upper(),
            problem.known_lower(),
            problem.known_status(),
        ),
        _ => None,
    };
    Ok(LambdaRun {
        lambda,
        report,
        delta,
    })
}

/// Solves the penalized system for every `λ` in the grid from a common start.
pub fn sweep(problem: &BilevelProblem, config: &SweepConfig) -> Result<SweepReport> {
    let clock = Instant::now();
    config.solver.validate()?;
    for &l in &config.lambda_grid {
        config.solver.with_lambda(l)?;
    }
    let (x0, y0) = match &config.start {
        Some((x, y)) => (x.clone(), y.clone()),
        None => problem.start_or_ones(),
    };
    let start = default_start(problem, &x0, &y0)?;

    let runs: Vec<LambdaRun> = if config.parallel {
        config
            .lambda_grid
            .par_iter()
            .map(|&l| run_one(problem, &config.solver, l, &start))
            .collect::<Result<_>>()?
    } else {
        config
            .lambda_grid
            .iter()
            .map(|&l| run_one(problem, &config.solver, l, &start))
            .collect::<Result<_>>()?
    };

    let (best, converged) = select_best(&runs);
    let delta_star = runs
        .iter()
        .filter_map(|r| r.delta.and_then(|d| d.delta))
        .min_by(f64::total_cmp);
    Ok(SweepReport {
        problem: problem.name().to_string(),
        runs,
        best,
        converged,
        delta_star,
        wall_time_secs: clock.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench;

    #[test]
    fn eoc_cases() {
        assert_eq!(eoc(&[1.0, 0.1]), Eoc::Absent);
        assert_eq!(eoc(&[1e-1, 1e-2, 0.0]), Eoc::Exact);
        assert_eq!(eoc(&[1e-1, 1e-2, 1e-4]), Eoc::Value(2.0));
        // A single infinite ratio does not dominate the maximum.
        assert_eq!(eoc(&[1.0, 1e-2, 1e-4]), Eoc::Value(2.0));
        assert_eq!(eoc(&[1.0, 1.0, 0.5]), Eoc::Undefined);
        assert_eq!(eoc(&[0.5, 1.0, 1.0]), Eoc::Undefined);
        let v = eoc(&[5.0, 1e-2, 1e-3, 1e-6]).value().unwrap();
        assert!((v - 2.0).abs() < 1e-12);
    }

    #[test]
    fn delta_examples() {
        let d = delta_metrics(0.5, -3.0, Some(0.0), Some(-2.0), KnownStatus::Optimal).unwrap();
        assert_eq!(d.delta_upper, 0.5);
        assert_eq!(d.delta_lower, -0.5);
        assert_eq!(d.delta, Some(0.5));
        let d = delta_metrics(0.5, -3.0, Some(0.0), Some(-2.0), KnownStatus::Known).unwrap();
        assert_eq!(d.delta, Some(0.5));
        let d = delta_metrics(-0.5, -3.0, Some(0.0), Some(-2.0), KnownStatus::Known).unwrap();
        assert_eq!(d.delta, Some(-0.5));
        let d = delta_metrics(1.0, 1.0, Some(0.0), Some(0.0), KnownStatus::Unknown).unwrap();
        assert_eq!(d.delta, None);
        assert!(delta_metrics(1.0, 1.0, None, Some(0.0), KnownStatus::Optimal).is_none());
    }

    #[test]
    fn default_start_uses_constraint_magnitudes() {
        let p = bench::xy_linear();
        let s = default_start(&p, &[1.0], &[1.0]).unwrap();
        let e = evaluate_all(&p, &[1.0], &[1.0]).unwrap();
        assert_eq!(s.z, vec![1.0]);
        assert_eq!(s.u[0], e.upper_constraints.values[0].abs());
        assert_eq!(s.v[0], e.lower_constraints.values[0].abs());
        assert_eq!(s.w, s.v);
        assert!(default_start(&p, &[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn parallel_and_serial_sweeps_agree() {
        let p = bench::quadratic_projection();
        let par = sweep(&p, &SweepConfig::default()).unwrap();
        let ser = sweep(
            &p,
            &SweepConfig {
                parallel: false,
                ..SweepConfig::default()
            },
        )
        .unwrap();
        assert_eq!(par.runs.len(), 9);
        for (a, b) in par.runs.iter().zip(&ser.runs) {
            assert_eq!(a.lambda, b.lambda);
            assert_eq!(a.report.status, b.report.status);
            assert_eq!(a.report.residual_history, b.report.residual_history);
            assert_eq!(a.report.final_point, b.report.final_point);
        }
        assert_eq!(par.best, ser.best);
        assert_eq!(par.delta_star, ser.delta_star);
    }

    #[test]
    fn best_run_prefers_solved_then_residual() {
        let p = bench::quadratic_projection();
        let base = sweep(
            &p,
            &SweepConfig {
                lambda_grid: vec![1.0, 2.0],
                parallel: false,
                ..SweepConfig::default()
            },
        )
        .unwrap();
        let mut runs = base.runs.clone();
        runs[0].report.upper_objective = Some(1.0);
        runs[1].report.upper_objective = Some(1.0);
        assert_eq!(select_best(&runs), (Some(0), true));
        runs[1].report.upper_objective = Some(0.5);
        assert_eq!(select_best(&runs), (Some(1), true));
        runs[0].report.status = SolveStatus::MaxIter;
        runs[1].report.status = SolveStatus::LineSearchStall;
        runs[0].report.final_residual = 1e-3;
        runs[1].report.final_residual = 1e-4;
        assert_eq!(select_best(&runs), (Some(1), false));
    }

    #[test]
    fn delta_star_is_grid_minimum() {
        let p = bench::xy_linear();
        let rep = sweep(&p, &SweepConfig::default()).unwrap();
        let defined: Vec<f64> = rep
            .runs
            .iter()
            .filter_map(|r| r.delta.and_then(|d| d.delta))
            .collect();
        if let Some(star) = rep.delta_star {
            assert!(defined.iter().all(|&d| star <= d));
            assert!(defined.contains(&star));
        } else {
            assert!(defined.is_empty());
        }
    }

    #[test]
    fn invalid_grid_rejected() {
        let p = bench::xy_linear();
        let cfg = SweepConfig {
            lambda_grid: vec![1.0, -1.0],
            ..SweepConfig::default()
        };
        assert!(sweep(&p, &cfg).is_err());
    }
}
