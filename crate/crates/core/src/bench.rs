//! Bundled benchmark problems with closed-form derivatives and
//! known stationary points of the penalized system.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::problem::{
    BilevelProblem, KnownStatus, ProblemDims, ProblemFunctions, ScalarEval, VectorEval,
};
use crate::system::Iterate;

/// A stationary point of the penalized system valid for `λ > lambda_above`.
#[derive(Debug, Clone, Copy)]
pub struct CertifiedPoint {
    pub lambda_above: f64,
    pub point: fn(f64) -> Iterate,
    pub description: &'static str,
}

impl CertifiedPoint {
    pub fn admits(&self, lambda: f64) -> bool {
        lambda > self.lambda_above
    }

    pub fn at(&self, lambda: f64) -> Iterate {
        (self.point)(lambda)
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkEntry {
    pub problem: BilevelProblem,
    pub certified_points: Vec<CertifiedPoint>,
    /// Known global optimum `(x, y)`, when one exists.
    pub optimum: Option<(Vec<f64>, Vec<f64>)>,
}

impl BenchmarkEntry {
    pub fn certified_for(&self, lambda: f64) -> Option<Iterate> {
        self.certified_points
            .iter()
            .find(|c| c.admits(lambda))
            .map(|c| c.at(lambda))
    }
}

fn scalar(value: f64, grad: &[f64], hess: &[f64]) -> ScalarEval {
    let k = grad.len();
    ScalarEval {
        value,
        gradient: DVector::from_column_slice(grad),
        hessian: DMatrix::from_row_slice(k, k, hess),
    }
}

fn vector(values: &[f64], jac: &[f64], hessians: Vec<DMatrix<f64>>) -> VectorEval {
    let k = if values.is_empty() {
        0
    } else {
        jac.len() / values.len()
    };
    VectorEval {
        values: DVector::from_column_slice(values),
        jacobian: DMatrix::from_row_slice(values.len(), k, jac),
        hessians,
    }
}

/// min x² + y₁² + y₂² over y ∈ argmin { ‖y − (x, −1)‖² : y₁ − y₂ ≤ 0, −y₁ − y₂ ≤ 0 }.
struct QuadraticProjection;

impl ProblemFunctions for QuadraticProjection {
    fn upper_objective(&self, x: &[f64], y: &[f64]) -> ScalarEval {
        let (a, b, c) = (x[0], y[0], y[1]);
        scalar(
            a * a + b * b + c * c,
            &[2.0 * a, 2.0 * b, 2.0 * c],
            &[2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 2.0],
        )
    }

    fn upper_constraints(&self, _x: &[f64], _y: &[f64]) -> VectorEval {
        VectorEval::empty(3)
    }

    fn lower_objective(&self, x: &[f64], y: &[f64]) -> ScalarEval {
        let (a, b, c) = (x[0], y[0], y[1]);
        scalar(
            (b - a).powi(2) + (c + 1.0).powi(2),
            &[-2.0 * (b - a), 2.0 * (b - a), 2.0 * (c + 1.0)],
            &[2.0, -2.0, 0.0, -2.0, 2.0, 0.0, 0.0, 0.0, 2.0],
        )
    }

    fn lower_constraints(&self, _x: &[f64], y: &[f64]) -> VectorEval {
        let (b, c) = (y[0], y[1]);
        vector(
            &[b - c, -b - c],
            &[0.0, 1.0, -1.0, 0.0, -1.0, -1.0],
            vec![DMatrix::zeros(3, 3), DMatrix::zeros(3, 3)],
        )
    }
}

/// min xy s.t. x + y ≤ 2 over y ∈ argmin { y : x − y ≤ 0 }.
struct XyLinear;

impl ProblemFunctions for XyLinear {
    fn upper_objective(&self, x: &[f64], y: &[f64]) -> ScalarEval {
        scalar(x[0] * y[0], &[y[0], x[0]], &[0.0, 1.0, 1.0, 0.0])
    }

    fn upper_constraints(&self, x: &[f64], y: &[f64]) -> VectorEval {
        vector(
            &[x[0] + y[0] - 2.0],
            &[1.0, 1.0],
            vec![DMatrix::zeros(2, 2)],
        )
    }

    fn lower_objective(&self, _x: &[f64], y: &[f64]) -> ScalarEval {
        scalar(y[0], &[0.0, 1.0], &[0.0; 4])
    }

    fn lower_constraints(&self, x: &[f64], y: &[f64]) -> VectorEval {
        vector(&[x[0] - y[0]], &[1.0, -1.0], vec![DMatrix::zeros(2, 2)])
    }
}

/// min (x − 3.5)² + (y + 4)² over y ∈ argmin { (y − 3)² : −x + y² ≤ 0 }.
struct DempeParabola;

impl ProblemFunctions for DempeParabola {
    fn upper_objective(&self, x: &[f64], y: &[f64]) -> ScalarEval {
        let (a, b) = (x[0], y[0]);
        scalar(
            (a - 3.5).powi(2) + (b + 4.0).powi(2),
            &[2.0 * (a - 3.5), 2.0 * (b + 4.0)],
            &[2.0, 0.0, 0.0, 2.0],
        )
    }

    fn upper_constraints(&self, _x: &[f64], _y: &[f64]) -> VectorEval {
        VectorEval::empty(2)
    }

    fn lower_objective(&self, _x: &[f64], y: &[f64]) -> ScalarEval {
        let b = y[0];
        scalar(
            (b - 3.0).powi(2),
            &[0.0, 2.0 * (b - 3.0)],
            &[0.0, 0.0, 0.0, 2.0],
        )
    }

    fn lower_constraints(&self, x: &[f64], y: &[f64]) -> VectorEval {
        let (a, b) = (x[0], y[0]);
        vector(
            &[-a + b * b],
            &[-1.0, 2.0 * b],
            vec![DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 2.0])],
        )
    }
}

pub const QUADRATIC_PROJECTION: &str = "quadratic-projection";
pub const XY_LINEAR: &str = "xy-linear";
pub const DEMPE_PARABOLA: &str = "dempe-parabola";

pub fn quadratic_projection() -> BilevelProblem {
    // f at the optimum (0, (0, 0)) is (0 − 0)² + (0 + 1)² = 1.
    BilevelProblem::new(
        QUADRATIC_PROJECTION,
        ProblemDims::new(1, 2, 0, 2).expect("static dims"),
        QuadraticProjection,
    )
    .with_known_values(0.0, 1.0, KnownStatus::Optimal)
}

pub fn xy_linear() -> BilevelProblem {
    BilevelProblem::new(
        XY_LINEAR,
        ProblemDims::new(1, 1, 1, 1).expect("static dims"),
        XyLinear,
    )
    .with_known_values(0.0, 0.0, KnownStatus::Optimal)
}

pub fn dempe_parabola() -> BilevelProblem {
    BilevelProblem::new(
        DEMPE_PARABOLA,
        ProblemDims::new(1, 1, 0, 1).expect("static dims"),
        DempeParabola,
    )
    .with_status(KnownStatus::Known)
}

fn quadratic_projection_point(lambda: f64) -> Iterate {
    Iterate {
        x: vec![0.0],
        y: vec![0.0, 0.0],
        z: vec![0.0, 0.0],
        u: vec![],
        v: vec![lambda, lambda],
        w: vec![1.0, 1.0],
    }
}

fn xy_linear_point(lambda: f64) -> Iterate {
    Iterate {
        x: vec![0.0],
        y: vec![0.0],
        z: vec![0.0],
        u: vec![0.0],
        v: vec![lambda],
        w: vec![1.0],
    }
}

fn dempe_parabola_point(lambda: f64) -> Iterate {
    Iterate {
        x: vec![1.0],
        y: vec![1.0],
        z: vec![1.0],
        u: vec![],
        v: vec![2.0 * lambda - 5.0],
        w: vec![2.0],
    }
}

pub fn registry() -> Vec<BenchmarkEntry> {
    vec![
        BenchmarkEntry {
            problem: quadratic_projection(),
            certified_points: vec![CertifiedPoint {
                lambda_above: 0.0,
                point: quadratic_projection_point,
                description: "x = 0, y = z = (0, 0), v = (λ, λ), w = (1, 1)",
            }],
            optimum: Some((vec![0.0], vec![0.0, 0.0])),
        },
        BenchmarkEntry {
            problem: xy_linear(),
            certified_points: vec![CertifiedPoint {
                lambda_above: 0.0,
                point: xy_linear_point,
                description: "x = y = z = 0, u = 0, v = λ, w = 1",
            }],
            optimum: Some((vec![0.0], vec![0.0])),
        },
        BenchmarkEntry {
            problem: dempe_parabola(),
            certified_points: vec![CertifiedPoint {
                lambda_above: 2.5,
                point: dempe_parabola_point,
                description: "x = y = z = 1, v = 2λ − 5, w = 2 (stationary for λ > 5/2)",
            }],
            optimum: None,
        },
    ]
}

pub fn find(name: &str) -> Result<BenchmarkEntry> {
    registry()
        .into_iter()
        .find(|e| e.problem.name() == name)
        .ok_or_else(|| Error::UnknownProblem(name.to_string()))
}

pub fn names() -> Vec<&'static str> {
    vec![QUADRATIC_PROJECTION, XY_LINEAR, DEMPE_PARABOLA]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{check_derivatives, evaluate_all, sample_points, DERIVATIVE_CHECK_STEP};
    use crate::system::assemble_residual;

    #[test]
    fn registry_contents() {
        let r = registry();
        assert_eq!(r.len(), 3);
        let names: Vec<_> = r.iter().map(|e| e.problem.name().to_string()).collect();
        assert_eq!(
            names,
            ["quadratic-projection", "xy-linear", "dempe-parabola"]
        );
        assert!(find("nosuch").is_err());
    }

    #[test]
    fn xy_linear_values_at_ones() {
        let e = evaluate_all(&xy_linear(), &[1.0], &[1.0]).unwrap();
        assert_eq!(e.upper_objective.value, 1.0);
        assert_eq!(e.upper_objective.gradient.as_slice(), &[1.0, 1.0]);
        assert_eq!(e.upper_constraints.values.as_slice(), &[0.0]);
        assert_eq!(e.lower_constraints.values.as_slice(), &[0.0]);
        assert_eq!(e.lower_objective.value, 1.0);
        assert_eq!(e.lower_objective.gradient.as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn quadratic_projection_origin() {
        let e = evaluate_all(&quadratic_projection(), &[0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(e.upper_objective.value, 0.0);
    }

    #[test]
    fn evaluation_is_deterministic() {
        for entry in registry() {
            let p = &entry.problem;
            for (x, y) in sample_points(p.dims(), 10, 2.0, 17) {
                assert_eq!(
                    evaluate_all(p, &x, &y).unwrap(),
                    evaluate_all(p, &x, &y).unwrap()
                );
            }
        }
    }

    #[test]
    fn all_entries_pass_derivative_check() {
        for entry in registry() {
            let p = &entry.problem;
            let pts = sample_points(p.dims(), 10, 2.0, 23);
            let rep = check_derivatives(p, &pts, DERIVATIVE_CHECK_STEP).unwrap();
            assert!(rep.passes(), "{}: {rep:?}", p.name());
        }
    }

    #[test]
    fn certified_points_solve_the_system() {
        for entry in registry() {
            for lambda in [1.0, 2.0, 4.0, 8.0] {
                if let Some(pt) = entry.certified_for(lambda) {
                    let r = assemble_residual(&entry.problem, lambda, &pt).unwrap();
                    assert!(
                        r.norm() <= 1e-12,
                        "{} λ={lambda}: {}",
                        entry.problem.name(),
                        r.norm()
                    );
                }
            }
        }
    }

    #[test]
    fn dempe_point_outside_admissible_range() {
        let entry = find(DEMPE_PARABOLA).unwrap();
        assert!(entry.certified_for(2.0).is_none());
        let pt = (entry.certified_points[0].point)(2.0);
        assert_eq!(pt.v, vec![-1.0]);
        let r = assemble_residual(&entry.problem, 2.0, &pt).unwrap();
        // φ(0, −1) = 1 − 0 + 1 = 2.
        assert_eq!(r.comp_lower_at_y(), &[2.0]);
    }
}
