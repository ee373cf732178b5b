//! Bilevel problem data: dimensions, evaluator contract and derivative checks.
//!
//! A bilevel program is described by four twice continuously differentiable
//! maps of `(x, y) ∈ ℝⁿ × ℝᵐ`: the leader objective `F`, the leader
//! constraints `G ≤ 0` (p components), the follower objective `f` and the
//! follower constraints `g ≤ 0` (q components). Gradients are always taken
//! with respect to the stacked vector `(x, y)`; the first `n` entries form the
//! upper block `∇₁` and the remaining `m` entries the lower block `∇₂`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, EvaluationError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemDims {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub q: usize,
}

impl ProblemDims {
    pub fn new(n: usize, m: usize, p: usize, q: usize) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::InvalidDims(format!(
                "need at least one upper and one lower variable (n={n}, m={m})"
            )));
        }
        Ok(Self { n, m, p, q })
    }

    /// Length of the stacked system variable `(x, y, z, u, v, w)`.
    pub fn total(&self) -> usize {
        self.n + 2 * self.m + self.p + 2 * self.q
    }

    /// Length of `(x, y)`.
    pub fn primal(&self) -> usize {
        self.n + self.m
    }
}

/// Value, gradient and Hessian of a scalar function of `(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarEval {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

/// Values, Jacobian (one row per component) and per-component Hessians of a
/// vector function of `(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorEval {
    pub values: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub hessians: Vec<DMatrix<f64>>,
}

impl VectorEval {
    /// An empty evaluation for a constraint block with no components.
    pub fn empty(primal: usize) -> Self {
        Self {
            values: DVector::zeros(0),
            jacobian: DMatrix::zeros(0, primal),
            hessians: Vec::new(),
        }
    }
}

/// Evaluator contract for the problem functions.
///
/// Implementations must be pure: the same inputs give bitwise-identical
/// outputs, and concurrent calls are allowed.
pub trait ProblemFunctions: Send + Sync {
    fn upper_objective(&self, x: &[f64], y: &[f64]) -> ScalarEval;
    fn upper_constraints(&self, x: &[f64], y: &[f64]) -> VectorEval;
    fn lower_objective(&self, x: &[f64], y: &[f64]) -> ScalarEval;
    fn lower_constraints(&self, x: &[f64], y: &[f64]) -> VectorEval;
}

/// How trustworthy the literature values attached to a problem are.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KnownStatus {
    /// The known leader value is the global optimum.
    Optimal,
    /// Best value reported so far, not certified optimal.
    Known,
    Unknown,
}

#[derive(Clone)]
pub struct BilevelProblem {
    name: String,
    dims: ProblemDims,
    functions: Arc<dyn ProblemFunctions>,
    known_upper: Option<f64>,
    known_lower: Option<f64>,
    status: KnownStatus,
    start: Option<(Vec<f64>, Vec<f64>)>,
}

impl fmt::Debug for BilevelProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BilevelProblem")
            .field("name", &self.name)
            .field("dims", &self.dims)
            .field("known_upper", &self.known_upper)
            .field("known_lower", &self.known_lower)
            .field("status", &self.status)
            .field("start", &self.start)
            .finish_non_exhaustive()
    }
}

impl BilevelProblem {
    pub fn new(
        name: impl Into<String>,
        dims: ProblemDims,
        functions: impl ProblemFunctions + 'static,
    ) -> Self {
        Self::from_arc(name, dims, Arc::new(functions))
    }

    pub fn from_arc(
        name: impl Into<String>,
        dims: ProblemDims,
        functions: Arc<dyn ProblemFunctions>,
    ) -> Self {
        Self {
            name: name.into(),
            dims,
            functions,
            known_upper: None,
            known_lower: None,
            status: KnownStatus::Unknown,
            start: None,
        }
    }

    /// Best known leader/follower objective values from the literature.
    pub fn with_known_values(mut self, upper: f64, lower: f64, status: KnownStatus) -> Self {
        self.known_upper = Some(upper);
        self.known_lower = Some(lower);
        self.status = status;
        self
    }

    /// Records a status without values (e.g. only a stationary point is known).
    pub fn with_status(mut self, status: KnownStatus) -> Self {
        self.status = status;
        self
    }

    pub fn with_start(mut self, x0: Vec<f64>, y0: Vec<f64>) -> Result<Self> {
        check_len("start x", self.dims.n, x0.len())?;
        check_len("start y", self.dims.m, y0.len())?;
        self.start = Some((x0, y0));
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dims(&self) -> ProblemDims {
        self.dims
    }

    pub fn functions(&self) -> &Arc<dyn ProblemFunctions> {
        &self.functions
    }

    pub fn known_upper(&self) -> Option<f64> {
        self.known_upper
    }

    pub fn known_lower(&self) -> Option<f64> {
        self.known_lower
    }

    pub fn known_status(&self) -> KnownStatus {
        self.status
    }

    pub fn registered_start(&self) -> Option<(&[f64], &[f64])> {
        self.start
            .as_ref()
            .map(|(x, y)| (x.as_slice(), y.as_slice()))
    }

    /// The registered start, or all-ones vectors when none is registered.
    pub fn start_or_ones(&self) -> (Vec<f64>, Vec<f64>) {
        match &self.start {
            Some((x, y)) => (x.clone(), y.clone()),
            None => (vec![1.0; self.dims.n], vec![1.0; self.dims.m]),
        }
    }
}

/// One evaluation of every problem function at a point `(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointEvaluation {
    pub upper_objective: ScalarEval,
    pub upper_constraints: VectorEval,
    pub lower_objective: ScalarEval,
    pub lower_constraints: VectorEval,
}

/// Lower-level data only, as needed at `(x, z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerEvaluation {
    pub objective: ScalarEval,
    pub constraints: VectorEval,
}

fn point_of(x: &[f64], y: &[f64]) -> Vec<f64> {
    x.iter().chain(y).copied().collect()
}

fn symmetrize(h: &mut DMatrix<f64>) {
    let t = h.transpose();
    *h += t;
    *h *= 0.5;
}

fn validate_scalar(
    name: &str,
    dims: ProblemDims,
    mut e: ScalarEval,
    pt: &dyn Fn() -> Vec<f64>,
) -> Result<ScalarEval> {
    let k = dims.primal();
    if e.gradient.len() != k || e.hessian.shape() != (k, k) {
        return Err(EvaluationError::new(name, pt(), "derivative has wrong shape").into());
    }
    if !e.value.is_finite() {
        return Err(EvaluationError::new(name, pt(), "non-finite value").into());
    }
    if e.gradient.iter().any(|v| !v.is_finite()) {
        return Err(EvaluationError::new(name, pt(), "non-finite gradient").into());
    }
    if e.hessian.iter().any(|v| !v.is_finite()) {
        return Err(EvaluationError::new(name, pt(), "non-finite Hessian").into());
    }
    symmetrize(&mut e.hessian);
    Ok(e)
}

fn validate_vector(
    name: &str,
    dims: ProblemDims,
    count: usize,
    mut e: VectorEval,
    pt: &dyn Fn() -> Vec<f64>,
) -> Result<VectorEval> {
    let k = dims.primal();
    if e.values.len() != count
        || e.jacobian.shape() != (count, k)
        || e.hessians.len() != count
        || e.hessians.iter().any(|h| h.shape() != (k, k))
    {
        return Err(EvaluationError::new(name, pt(), "constraint data has wrong shape").into());
    }
    let finite = e.values.iter().all(|v| v.is_finite())
        && e.jacobian.iter().all(|v| v.is_finite())
        && e.hessians.iter().all(|h| h.iter().all(|v| v.is_finite()));
    if !finite {
        return Err(EvaluationError::new(name, pt(), "non-finite constraint data").into());
    }
    for h in &mut e.hessians {
        symmetrize(h);
    }
    Ok(e)
}

/// Evaluates `F, G, f, g` with all derivatives at `(x, y)`.
///
/// Hessians are symmetrized as `(H + Hᵀ)/2`.
pub fn evaluate_all(problem: &BilevelProblem, x: &[f64], y: &[f64]) -> Result<PointEvaluation> {
    let dims = problem.dims;
    check_len("x", dims.n, x.len())?;
    check_len("y", dims.m, y.len())?;
    let pt = || point_of(x, y);
    let fns = &problem.functions;
    Ok(PointEvaluation {
        upper_objective: validate_scalar("F", dims, fns.upper_objective(x, y), &pt)?,
        upper_constraints: validate_vector("G", dims, dims.p, fns.upper_constraints(x, y), &pt)?,
        lower_objective: validate_scalar("f", dims, fns.lower_objective(x, y), &pt)?,
        lower_constraints: validate_vector("g", dims, dims.q, fns.lower_constraints(x, y), &pt)?,
    })
}

/// Evaluates only the follower data `f, g` at `(x, z)`.
pub fn evaluate_lower(problem: &BilevelProblem, x: &[f64], z: &[f64]) -> Result<LowerEvaluation> {
    let dims = problem.dims;
    check_len("x", dims.n, x.len())?;
    check_len("z", dims.m, z.len())?;
    let pt = || point_of(x, z);
    let fns = &problem.functions;
    Ok(LowerEvaluation {
        objective: validate_scalar("f", dims, fns.lower_objective(x, z), &pt)?,
        constraints: validate_vector("g", dims, dims.q, fns.lower_constraints(x, z), &pt)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionCheck {
    /// `F`, `G`, `f` or `g`.
    pub function: String,
    pub gradient_error: f64,
    pub hessian_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeCheckReport {
    pub functions: Vec<FunctionCheck>,
    pub points: Vec<Vec<f64>>,
    pub tolerance: f64,
}

impl DerivativeCheckReport {
    pub fn worst_error(&self) -> f64 {
        self.functions
            .iter()
            .map(|c| c.gradient_error.max(c.hessian_error))
            .fold(0.0, f64::max)
    }

    pub fn passes(&self) -> bool {
        self.worst_error() <= self.tolerance
    }
}

/// Relative tolerance at which [`check_derivatives`] declares a pass.
pub const DERIVATIVE_CHECK_TOL: f64 = 1e-4;
/// Base finite-difference step; scaled by `max(1, ‖point‖)`.
pub const DERIVATIVE_CHECK_STEP: f64 = 1e-6;

fn rel_err(approx: &[f64], exact: &[f64]) -> f64 {
    let scale = exact.iter().fold(1.0_f64, |acc, v| acc.max(v.abs()));
    let diff = approx
        .iter()
        .zip(exact)
        .fold(0.0_f64, |acc, (a, e)| acc.max((a - e).abs()));
    diff / scale
}

/// Compares user derivatives against central differences.
///
/// Gradients are checked against differences of values; Hessians against
/// differences of the supplied gradients. Errors are `‖approx − exact‖∞ /
/// max(1, ‖exact‖∞)`, maximised over points and components.
pub fn check_derivatives(
    problem: &BilevelProblem,
    points: &[(Vec<f64>, Vec<f64>)],
    step: f64,
) -> Result<DerivativeCheckReport> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let dims = problem.dims;
    let k = dims.primal();
    let mut worst = [[0.0_f64; 2]; 4];

    for (x, y) in points {
        let base = evaluate_all(problem, x, y)?;
        let pt = point_of(x, y);
        let norm = pt.iter().map(|v| v * v).sum::<f64>().sqrt();
        let h = step * norm.max(1.0);

        // Per coordinate j: forward/backward evaluations.
        let mut plus = Vec::with_capacity(k);
        let mut minus = Vec::with_capacity(k);
        for j in 0..k {
            let mut a = pt.clone();
            a[j] += h;
            let mut b = pt.clone();
            b[j] -= h;
            plus.push(evaluate_all(problem, &a[..dims.n], &a[dims.n..])?);
            minus.push(evaluate_all(problem, &b[..dims.n], &b[dims.n..])?);
        }
        let inv = 1.0 / (2.0 * h);

        let scalar_check = |get: &dyn Fn(&PointEvaluation) -> &ScalarEval| -> [f64; 2] {
            let exact = get(&base);
            let fd_grad: Vec<f64> = (0..k)
                .map(|j| (get(&plus[j]).value - get(&minus[j]).value) * inv)
                .collect();
            let mut fd_hess = DMatrix::zeros(k, k);
            for j in 0..k {
                let col = (&get(&plus[j]).gradient - &get(&minus[j]).gradient) * inv;
                fd_hess.set_column(j, &col);
            }
            [
                rel_err(&fd_grad, exact.gradient.as_slice()),
                rel_err(fd_hess.as_slice(), exact.hessian.as_slice()),
            ]
        };
        let vector_check = |get: &dyn Fn(&PointEvaluation) -> &VectorEval| -> [f64; 2] {
            let exact = get(&base);
            let mut out = [0.0_f64; 2];
            for i in 0..exact.values.len() {
                let fd_grad: Vec<f64> = (0..k)
                    .map(|j| (get(&plus[j]).values[i] - get(&minus[j]).values[i]) * inv)
                    .collect();
                let grad: Vec<f64> = exact.jacobian.row(i).iter().copied().collect();
                let mut fd_hess = DMatrix::zeros(k, k);
                for j in 0..k {
                    let col = (get(&plus[j]).jacobian.row(i) - get(&minus[j]).jacobian.row(i))
                        .transpose()
                        * inv;
                    fd_hess.set_column(j, &col);
                }
                out[0] = out[0].max(rel_err(&fd_grad, &grad));
                out[1] = out[1].max(rel_err(fd_hess.as_slice(), exact.hessians[i].as_slice()));
            }
            out
        };

        let results = [
            scalar_check(&|e| &e.upper_objective),
            vector_check(&|e| &e.upper_constraints),
            scalar_check(&|e| &e.lower_objective),
            vector_check(&|e| &e.lower_constraints),
        ];
        for (w, r) in worst.iter_mut().zip(results) {
            w[0] = w[0].max(r[0]);
            w[1] = w[1].max(r[1]);
        }
    }

    let functions = ["F", "G", "f", "g"]
        .iter()
        .zip(worst)
        .map(|(name, [g, h])| FunctionCheck {
            function: name.to_string(),
            gradient_error: g,
            hessian_error: h,
        })
        .collect();
    Ok(DerivativeCheckReport {
        functions,
        points: points.iter().map(|(x, y)| point_of(x, y)).collect(),
        tolerance: DERIVATIVE_CHECK_TOL,
    })
}

/// Uniform sample points in the box `[-radius, radius]^{n+m}`.
pub fn sample_points(
    dims: ProblemDims,
    count: usize,
    radius: f64,
    seed: u64,
) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let x = (0..dims.n)
                .map(|_| rng.gen_range(-radius..=radius))
                .collect();
            let y = (0..dims.m)
                .map(|_| rng.gen_range(-radius..=radius))
                .collect();
            (x, y)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// F = x² + 3xy + 2y², no constraints, f = y².
    struct Quadratic {
        corrupt: bool,
    }

    impl ProblemFunctions for Quadratic {
        fn upper_objective(&self, x: &[f64], y: &[f64]) -> ScalarEval {
            let (a, b) = (x[0], y[0]);
            let scale = if self.corrupt { 1.1 } else { 1.0 };
            ScalarEval {
                value: a * a + 3.0 * a * b + 2.0 * b * b,
                gradient: DVector::from_vec(vec![scale * (2.0 * a + 3.0 * b), 3.0 * a + 4.0 * b]),
                hessian: DMatrix::from_row_slice(2, 2, &[2.0, 3.0, 3.0, 4.0]),
            }
        }
        fn upper_constraints(&self, _: &[f64], _: &[f64]) -> VectorEval {
            VectorEval::empty(2)
        }
        fn lower_objective(&self, _x: &[f64], y: &[f64]) -> ScalarEval {
            ScalarEval {
                value: y[0] * y[0],
                gradient: DVector::from_vec(vec![0.0, 2.0 * y[0]]),
                hessian: DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 2.0]),
            }
        }
        fn lower_constraints(&self, _: &[f64], _: &[f64]) -> VectorEval {
            VectorEval::empty(2)
        }
    }

    fn quad(corrupt: bool) -> BilevelProblem {
        BilevelProblem::new(
            "quad",
            ProblemDims::new(1, 1, 0, 0).unwrap(),
            Quadratic { corrupt },
        )
    }

    #[test]
    fn dims_total() {
        let d = ProblemDims::new(1, 2, 0, 2).unwrap();
        // n + 2m + p + 2q
        assert_eq!(d.total(), 9);
        assert!(ProblemDims::new(0, 1, 0, 0).is_err());
        assert!(ProblemDims::new(1, 0, 0, 0).is_err());
    }

    #[test]
    fn quadratic_gradient_is_near_exact() {
        let pts = sample_points(quad(false).dims(), 5, 2.0, 7);
        let rep = check_derivatives(&quad(false), &pts, DERIVATIVE_CHECK_STEP).unwrap();
        assert!(rep.functions[0].gradient_error <= 1e-9, "{rep:?}");
        assert!(rep.passes());
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let pts = sample_points(quad(true).dims(), 5, 2.0, 7);
        let rep = check_derivatives(&quad(true), &pts, DERIVATIVE_CHECK_STEP).unwrap();
        assert!(!rep.passes());
        assert!(rep.functions[0].gradient_error > 1e-2);
    }

    #[test]
    fn rejects_bad_step() {
        assert!(check_derivatives(&quad(false), &[], 0.0).is_err());
    }

    struct Broken;
    impl ProblemFunctions for Broken {
        fn upper_objective(&self, x: &[f64], _y: &[f64]) -> ScalarEval {
            ScalarEval {
                value: x[0].ln(),
                gradient: DVector::from_vec(vec![1.0 / x[0], 0.0]),
                hessian: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]),
            }
        }
        fn upper_constraints(&self, _: &[f64], _: &[f64]) -> VectorEval {
            VectorEval::empty(2)
        }
        fn lower_objective(&self, x: &[f64], y: &[f64]) -> ScalarEval {
            self.upper_objective(x, y)
        }
        fn lower_constraints(&self, _: &[f64], _: &[f64]) -> VectorEval {
            VectorEval::empty(2)
        }
    }

    #[test]
    fn non_finite_value_is_an_evaluation_error() {
        let p = BilevelProblem::new("broken", ProblemDims::new(1, 1, 0, 0).unwrap(), Broken);
        match evaluate_all(&p, &[-1.0], &[0.0]) {
            Err(Error::Evaluation(e)) => {
                assert_eq!(e.function, "F");
                assert_eq!(e.point, vec![-1.0, 0.0]);
            }
            other => panic!("expected evaluation error, got {other:?}"),
        }
    }

    #[test]
    fn hessians_are_symmetrized() {
        let p = BilevelProblem::new("broken", ProblemDims::new(1, 1, 0, 0).unwrap(), Broken);
        let e = evaluate_all(&p, &[2.0], &[0.0]).unwrap();
        let h = &e.upper_objective.hessian;
        assert_eq!(h[(0, 1)], 1.0);
        assert_eq!(h[(0, 1)], h[(1, 0)]);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(
            evaluate_all(&quad(false), &[1.0, 2.0], &[0.0]),
            Err(Error::Dimension { .. })
        ));
    }
}
