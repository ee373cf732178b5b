//! The penalized stationarity system, a selected generalized Jacobian
//! element, and the least-squares merit function.
//!
//! For a fixed penalty `λ > 0` the unknown is `ζ = (x, y, z, u, v, w)` and
//!
//! ```text
//! Φ(ζ) = [ ∇_{(x,y,z)} L(ζ) ; φ(−G(x,y), u) ; φ(−g(x,y), v) ; φ(−g(x,z), w) ]
//! L    = F + uᵀG + vᵀg(x,y) + λ f(x,y) − λ (f(x,z) + wᵀg(x,z))
//! ```
//!
//! Row blocks of `Φ` and column blocks of the Jacobian share one layout, so
//! `grad_x` rows sit at the `x` offsets, `comp_G` rows at the `u` offsets and
//! so on.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::fb::{fb, pair_coeffs_with, PairCoefficients, DEFAULT_KINK_TOL};
use crate::problem::{
    evaluate_all, evaluate_lower, BilevelProblem, LowerEvaluation, PointEvaluation, ProblemDims,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Iterate {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub w: Vec<f64>,
}

impl Iterate {
    pub fn new(
        dims: ProblemDims,
        x: Vec<f64>,
        y: Vec<f64>,
        z: Vec<f64>,
        u: Vec<f64>,
        v: Vec<f64>,
        w: Vec<f64>,
    ) -> Result<Self> {
        let it = Self { x, y, z, u, v, w };
        it.check(dims)?;
        Ok(it)
    }

    pub fn zeros(dims: ProblemDims) -> Self {
        Self {
            x: vec![0.0; dims.n],
            y: vec![0.0; dims.m],
            z: vec![0.0; dims.m],
            u: vec![0.0; dims.p],
            v: vec![0.0; dims.q],
            w: vec![0.0; dims.q],
        }
    }

    pub fn check(&self, dims: ProblemDims) -> Result<()> {
        check_len("x", dims.n, self.x.len())?;
        check_len("y", dims.m, self.y.len())?;
        check_len("z", dims.m, self.z.len())?;
        check_len("u", dims.p, self.u.len())?;
        check_len("v", dims.q, self.v.len())?;
        check_len("w", dims.q, self.w.len())
    }

    pub fn from_stacked(dims: ProblemDims, stacked: &[f64]) -> Result<Self> {
        check_len("stacked iterate", dims.total(), stacked.len())?;
        let l = BlockLayout::new(dims);
        Ok(Self {
            x: stacked[l.x()].to_vec(),
            y: stacked[l.y()].to_vec(),
            z: stacked[l.z()].to_vec(),
            u: stacked[l.u()].to_vec(),
            v: stacked[l.v()].to_vec(),
            w: stacked[l.w()].to_vec(),
        })
    }

    pub fn to_stacked(&self) -> DVector<f64> {
        let data: Vec<f64> = [&self.x, &self.y, &self.z, &self.u, &self.v, &self.w]
            .into_iter()
            .flat_map(|b| b.iter().copied())
            .collect();
        DVector::from_vec(data)
    }
}

/// Offsets of the six blocks inside the stacked vector (and residual rows).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub dims: ProblemDims,
}

impl BlockLayout {
    pub fn new(dims: ProblemDims) -> Self {
        Self { dims }
    }

    pub fn total(&self) -> usize {
        self.dims.total()
    }

    pub fn x(&self) -> Range<usize> {
        0..self.dims.n
    }

    pub fn y(&self) -> Range<usize> {
        let s = self.dims.n;
        s..s + self.dims.m
    }

    pub fn z(&self) -> Range<usize> {
        let s = self.dims.n + self.dims.m;
        s..s + self.dims.m
    }

    pub fn u(&self) -> Range<usize> {
        let s = self.dims.n + 2 * self.dims.m;
        s..s + self.dims.p
    }

    pub fn v(&self) -> Range<usize> {
        let s = self.dims.n + 2 * self.dims.m + self.dims.p;
        s..s + self.dims.q
    }

    pub fn w(&self) -> Range<usize> {
        let s = self.dims.n + 2 * self.dims.m + self.dims.p + self.dims.q;
        s..s + self.dims.q
    }

    /// The six ranges in stacking order.
    pub fn blocks(&self) -> [Range<usize>; 6] {
        [self.x(), self.y(), self.z(), self.u(), self.v(), self.w()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualVector {
    pub layout: BlockLayout,
    pub values: DVector<f64>,
}

impl ResidualVector {
    pub fn grad_x(&self) -> &[f64] {
        &self.values.as_slice()[self.layout.x()]
    }
    pub fn grad_y(&self) -> &[f64] {
        &self.values.as_slice()[self.layout.y()]
    }
    pub fn grad_z(&self) -> &[f64] {
        &self.values.as_slice()[self.layout.z()]
    }
    pub fn comp_upper(&self) -> &[f64] {
        &self.values.as_slice()[self.layout.u()]
    }
    pub fn comp_lower_at_y(&self) -> &[f64] {
        &self.values.as_slice()[self.layout.v()]
    }
    pub fn comp_lower_at_z(&self) -> &[f64] {
        &self.values.as_slice()[self.layout.w()]
    }

    pub fn norm(&self) -> f64 {
        self.values.norm()
    }

    /// `½‖Φ‖²`.
    pub fn merit(&self) -> f64 {
        0.5 * self.values.norm_squared()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JacobianMatrix {
    pub layout: BlockLayout,
    pub matrix: DMatrix<f64>,
}

impl JacobianMatrix {
    /// Sub-matrix for row block `r` and column block `c` (indices into
    /// [`BlockLayout::blocks`]).
    pub fn block(&self, r: usize, c: usize) -> DMatrix<f64> {
        let b = self.layout.blocks();
        let (rr, cc) = (&b[r], &b[c]);
        self.matrix
            .view((rr.start, cc.start), (rr.len(), cc.len()))
            .into_owned()
    }
}

/// Which blocks of the Jacobian may be nonzero: `[row][col]`.
pub const JACOBIAN_PATTERN: [[bool; 6]; 6] = [
    [true, true, true, true, true, true],
    [true, true, false, true, true, false],
    [true, false, true, false, false, true],
    [true, true, false, true, false, false],
    [true, true, false, false, true, false],
    [true, false, true, false, false, true],
];

/// Values and `(x, y, z)` derivatives of the Lagrange-type functions.
#[derive(Debug, Clone, PartialEq)]
pub struct PenalizedLagrangians {
    /// `F + uᵀG + vᵀg + λf` at `(x, y)`.
    pub upper: f64,
    /// `f + wᵀg` at `(x, z)`.
    pub lower: f64,
    /// `upper − λ·lower`.
    pub total: f64,
    /// Gradient of `total` with respect to `(x, y, z)`.
    pub gradient: DVector<f64>,
    /// Hessian of `total` with respect to `(x, y, z)`.
    pub hessian: DMatrix<f64>,
    /// Hessian of `upper` with respect to `(x, y)`.
    pub upper_hessian: DMatrix<f64>,
    /// Hessian of `lower` with respect to `(x, z)`.
    pub lower_hessian: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JacobianOptions {
    pub kink_tol: f64,
    pub kink_element: PairCoefficients,
}

impl Default for JacobianOptions {
    fn default() -> Self {
        Self {
            kink_tol: DEFAULT_KINK_TOL,
            kink_element: PairCoefficients::SYMMETRIC_KINK,
        }
    }
}

impl JacobianOptions {
    pub fn with_kink_tol(kink_tol: f64) -> Self {
        Self {
            kink_tol,
            ..Self::default()
        }
    }
}

/// Problem data evaluated at `(x, y)` and `(x, z)` for one iterate.
#[derive(Debug, Clone)]
pub struct IterateEvaluation {
    pub at_xy: PointEvaluation,
    pub at_xz: LowerEvaluation,
}

fn check_penalty(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidPenalty(lambda))
    }
}

pub fn evaluate_iterate(problem: &BilevelProblem, zeta: &Iterate) -> Result<IterateEvaluation> {
    zeta.check(problem.dims())?;
    Ok(IterateEvaluation {
        at_xy: evaluate_all(problem, &zeta.x, &zeta.y)?,
        at_xz: evaluate_lower(problem, &zeta.x, &zeta.z)?,
    })
}

fn weighted_hessian(base: &DMatrix<f64>, parts: &[DMatrix<f64>], weights: &[f64]) -> DMatrix<f64> {
    let mut h = base.clone();
    for (hi, &wi) in parts.iter().zip(weights) {
        h += hi * wi;
    }
    h
}

fn lagrangians_from(
    dims: ProblemDims,
    ev: &IterateEvaluation,
    lambda: f64,
    zeta: &Iterate,
) -> PenalizedLagrangians {
    let (n, m) = (dims.n, dims.m);
    let xy = &ev.at_xy;
    let xz = &ev.at_xz;
    let u = DVector::from_column_slice(&zeta.u);
    let v = DVector::from_column_slice(&zeta.v);
    let w = DVector::from_column_slice(&zeta.w);

    let upper = xy.upper_objective.value
        + u.dot(&xy.upper_constraints.values)
        + v.dot(&xy.lower_constraints.values)
        + lambda * xy.lower_objective.value;
    let lower = xz.objective.value + w.dot(&xz.constraints.values);

    let grad_upper = &xy.upper_objective.gradient
        + xy.upper_constraints.jacobian.transpose() * &u
        + xy.lower_constraints.jacobian.transpose() * &v
        + &xy.lower_objective.gradient * lambda;
    let grad_lower = &xz.objective.gradient + xz.constraints.jacobian.transpose() * &w;

    let mut upper_hessian = weighted_hessian(
        &xy.upper_objective.hessian,
        &xy.upper_constraints.hessians,
        &zeta.u,
    );
    upper_hessian = weighted_hessian(&upper_hessian, &xy.lower_constraints.hessians, &zeta.v);
    upper_hessian += &xy.lower_objective.hessian * lambda;
    let lower_hessian = weighted_hessian(&xz.objective.hessian, &xz.constraints.hessians, &zeta.w);

    let k = n + 2 * m;
    let mut gradient = DVector::zeros(k);
    gradient.rows_mut(0, n + m).copy_from(&grad_upper);
    for i in 0..n {
        gradient[i] -= lambda * grad_lower[i];
    }
    for i in 0..m {
        gradient[n + m + i] = -lambda * grad_lower[n + i];
    }

    // (x, y, z) indices of the (x, z) Hessian.
    let xz_index = |i: usize| if i < n { i } else { i + m };
    let mut hessian = DMatrix::zeros(k, k);
    hessian
        .view_mut((0, 0), (n + m, n + m))
        .copy_from(&upper_hessian);
    for i in 0..n + m {
        for j in 0..n + m {
            hessian[(xz_index(i), xz_index(j))] -= lambda * lower_hessian[(i, j)];
        }
    }

    PenalizedLagrangians {
        upper,
        lower,
        total: upper - lambda * lower,
        gradient,
        hessian,
        upper_hessian,
        lower_hessian,
    }
}

pub fn penalized_lagrangians(
    problem: &BilevelProblem,
    lambda: f64,
    zeta: &Iterate,
) -> Result<PenalizedLagrangians> {
    check_penalty(lambda)?;
    let ev = evaluate_iterate(problem, zeta)?;
    Ok(lagrangians_from(problem.dims(), &ev, lambda, zeta))
}

fn residual_from(
    dims: ProblemDims,
    ev: &IterateEvaluation,
    lambda: f64,
    zeta: &Iterate,
) -> ResidualVector {
    let layout = BlockLayout::new(dims);
    let mut values = DVector::zeros(dims.total());
    let lag = lagrangians_from(dims, ev, lambda, zeta);
    let k = dims.n + 2 * dims.m;
    values.rows_mut(0, k).copy_from(&lag.gradient);

    let xy = &ev.at_xy;
    for (i, r) in layout.u().enumerate() {
        values[r] = fb(-xy.upper_constraints.values[i], zeta.u[i]);
    }
    for (j, r) in layout.v().enumerate() {
        values[r] = fb(-xy.lower_constraints.values[j], zeta.v[j]);
    }
    for (j, r) in layout.w().enumerate() {
        values[r] = fb(-ev.at_xz.constraints.values[j], zeta.w[j]);
    }
    ResidualVector { layout, values }
}

fn jacobian_from(
    dims: ProblemDims,
    ev: &IterateEvaluation,
    lambda: f64,
    zeta: &Iterate,
    opts: &JacobianOptions,
) -> JacobianMatrix {
    let layout = BlockLayout::new(dims);
    let (n, m) = (dims.n, dims.m);
    let nn = dims.total();
    let mut w = DMatrix::zeros(nn, nn);
    let lag = lagrangians_from(dims, ev, lambda, zeta);
    let k = n + 2 * m;
    w.view_mut((0, 0), (k, k)).copy_from(&lag.hessian);

    let jg_up = &ev.at_xy.upper_constraints.jacobian;
    let jg_xy = &ev.at_xy.lower_constraints.jacobian;
    let jg_xz = &ev.at_xz.constraints.jacobian;
    let (u0, v0, w0) = (layout.u().start, layout.v().start, layout.w().start);
    let z0 = layout.z().start;

    // Multiplier columns of the gradient rows.
    for i in 0..dims.p {
        for c in 0..n + m {
            w[(c, u0 + i)] = jg_up[(i, c)];
        }
    }
    for j in 0..dims.q {
        for c in 0..n + m {
            w[(c, v0 + j)] = jg_xy[(j, c)];
        }
        for c in 0..n {
            w[(c, w0 + j)] = -lambda * jg_xz[(j, c)];
        }
        for c in 0..m {
            w[(z0 + c, w0 + j)] = -lambda * jg_xz[(j, n + c)];
        }
    }

    // Complementarity rows.
    let coeffs = |c: f64, mult: f64| pair_coeffs_with(c, mult, opts.kink_tol, opts.kink_element);
    for i in 0..dims.p {
        let pc = coeffs(ev.at_xy.upper_constraints.values[i], zeta.u[i]);
        for c in 0..n + m {
            w[(u0 + i, c)] = pc.constraint * jg_up[(i, c)];
        }
        w[(u0 + i, u0 + i)] = pc.multiplier;
    }
    for j in 0..dims.q {
        let pc = coeffs(ev.at_xy.lower_constraints.values[j], zeta.v[j]);
        for c in 0..n + m {
            w[(v0 + j, c)] = pc.constraint * jg_xy[(j, c)];
        }
        w[(v0 + j, v0 + j)] = pc.multiplier;

        let pc = coeffs(ev.at_xz.constraints.values[j], zeta.w[j]);
        for c in 0..n {
            w[(w0 + j, c)] = pc.constraint * jg_xz[(j, c)];
        }
        for c in 0..m {
            w[(w0 + j, z0 + c)] = pc.constraint * jg_xz[(j, n + c)];
        }
        w[(w0 + j, w0 + j)] = pc.multiplier;
    }
    JacobianMatrix { layout, matrix: w }
}

pub fn assemble_residual(
    problem: &BilevelProblem,
    lambda: f64,
    zeta: &Iterate,
) -> Result<ResidualVector> {
    check_penalty(lambda)?;
    let ev = evaluate_iterate(problem, zeta)?;
    Ok(residual_from(problem.dims(), &ev, lambda, zeta))
}

pub fn assemble_jacobian(
    problem: &BilevelProblem,
    lambda: f64,
    zeta: &Iterate,
    kink_tol: f64,
) -> Result<JacobianMatrix> {
    assemble_jacobian_with(
        problem,
        lambda,
        zeta,
        &JacobianOptions::with_kink_tol(kink_tol),
    )
}

pub fn assemble_jacobian_with(
    problem: &BilevelProblem,
    lambda: f64,
    zeta: &Iterate,
    opts: &JacobianOptions,
) -> Result<JacobianMatrix> {
    check_penalty(lambda)?;
    let ev = evaluate_iterate(problem, zeta)?;
    Ok(jacobian_from(problem.dims(), &ev, lambda, zeta, opts))
}

/// `Ψ(ζ) = ½‖Φ(ζ)‖²`.
pub fn merit(problem: &BilevelProblem, lambda: f64, zeta: &Iterate) -> Result<f64> {
    Ok(assemble_residual(problem, lambda, zeta)?.merit())
}

/// `∇Ψ = WᵀΦ`.
pub fn merit_grad(
    problem: &BilevelProblem,
    lambda: f64,
    zeta: &Iterate,
    kink_tol: f64,
) -> Result<DVector<f64>> {
    Ok(linearize(
        problem,
        lambda,
        zeta,
        &JacobianOptions::with_kink_tol(kink_tol),
    )?
    .merit_gradient)
}

pub fn merit_grad_with(
    problem: &BilevelProblem,
    lambda: f64,
    zeta: &Iterate,
    opts: &JacobianOptions,
) -> Result<DVector<f64>> {
    Ok(linearize(problem, lambda, zeta, opts)?.merit_gradient)
}

/// Residual, Jacobian and merit gradient from a single problem evaluation.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub residual: ResidualVector,
    pub jacobian: JacobianMatrix,
    pub merit_gradient: DVector<f64>,
}

pub fn linearize(
    problem: &BilevelProblem,
    lambda: f64,
    zeta: &Iterate,
    opts: &JacobianOptions,
) -> Result<Linearization> {
    check_penalty(lambda)?;
    let ev = evaluate_iterate(problem, zeta)?;
    let dims = problem.dims();
    let residual = residual_from(dims, &ev, lambda, zeta);
    let jacobian = jacobian_from(dims, &ev, lambda, zeta, opts);
    let merit_gradient = jacobian.matrix.tr_mul(&residual.values);
    Ok(Linearization {
        residual,
        jacobian,
        merit_gradient,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench;

    fn it(dims: ProblemDims, parts: [&[f64]; 6]) -> Iterate {
        Iterate::new(
            dims,
            parts[0].to_vec(),
            parts[1].to_vec(),
            parts[2].to_vec(),
            parts[3].to_vec(),
            parts[4].to_vec(),
            parts[5].to_vec(),
        )
        .unwrap()
    }

    #[test]
    fn stacking_round_trips() {
        let p = bench::quadratic_projection();
        let d = p.dims();
        let z = it(
            d,
            [
                &[1.0],
                &[2.0, 3.0],
                &[4.0, 5.0],
                &[],
                &[6.0, 7.0],
                &[8.0, 9.0],
            ],
        );
        let s = z.to_stacked();
        assert_eq!(s.len(), d.total());
        assert_eq!(Iterate::from_stacked(d, s.as_slice()).unwrap(), z);
        assert!(Iterate::from_stacked(d, &[0.0; 3]).is_err());
    }

    #[test]
    fn layout_ranges_cover_total() {
        let l = BlockLayout::new(ProblemDims::new(2, 3, 1, 4).unwrap());
        let lens: usize = l.blocks().iter().map(|r| r.len()).sum();
        assert_eq!(lens, l.total());
        assert_eq!(l.w().end, l.total());
    }

    #[test]
    fn quadratic_projection_certified_point() {
        let p = bench::quadratic_projection();
        let z = it(
            p.dims(),
            [
                &[0.0],
                &[0.0, 0.0],
                &[0.0, 0.0],
                &[],
                &[2.0, 2.0],
                &[1.0, 1.0],
            ],
        );
        let r = assemble_residual(&p, 2.0, &z).unwrap();
        assert_eq!(r.values.len(), 9);
        assert!(r.norm() <= 1e-14, "{:?}", r.values);
    }

    #[test]
    fn xy_linear_residual_values() {
        let p = bench::xy_linear();
        let solved = it(p.dims(), [&[0.0], &[0.0], &[0.0], &[0.0], &[1.0], &[1.0]]);
        assert!(assemble_residual(&p, 1.0, &solved).unwrap().norm() <= 1e-14);

        let z = it(p.dims(), [&[1.0], &[1.0], &[1.0], &[0.0], &[0.0], &[0.0]]);
        let r = assemble_residual(&p, 1.0, &z).unwrap();
        assert_eq!(r.values.as_slice(), &[1.0, 2.0, -1.0, 0.0, 0.0, 0.0]);
        assert_eq!(r.grad_x(), &[1.0]);
        assert_eq!(r.grad_z(), &[-1.0]);
        assert_eq!(merit(&p, 1.0, &z).unwrap(), 3.0);
    }

    #[test]
    fn dempe_parabola_certified_point() {
        let p = bench::dempe_parabola();
        let z = it(p.dims(), [&[1.0], &[1.0], &[1.0], &[], &[3.0], &[2.0]]);
        assert!(assemble_residual(&p, 4.0, &z).unwrap().norm() <= 1e-14);
    }

    #[test]
    fn kink_rows_use_kink_element() {
        let p = bench::xy_linear();
        let z = it(p.dims(), [&[1.0], &[1.0], &[1.0], &[0.0], &[0.0], &[0.0]]);
        let j = assemble_jacobian(&p, 1.0, &z, DEFAULT_KINK_TOL).unwrap();
        let k = PairCoefficients::SYMMETRIC_KINK;
        // Rows 3..6 are comp_G, comp_g(x,y), comp_g(x,z); multiplier diagonals.
        for r in 3..6 {
            assert_eq!(j.matrix[(r, r)], k.multiplier);
        }
        // comp_G row: a·∇G = a·(1, 1) on (x, y).
        assert_eq!(j.matrix[(3, 0)], k.constraint);
        assert_eq!(j.matrix[(3, 1)], k.constraint);
        // comp_g(x,z) row: a·(1, −1) on (x, z).
        assert_eq!(j.matrix[(5, 0)], k.constraint);
        assert_eq!(j.matrix[(5, 2)], -k.constraint);
        assert_eq!(j.matrix[(5, 1)], 0.0);
    }

    #[test]
    fn rejects_non_positive_penalty() {
        let p = bench::xy_linear();
        let z = Iterate::zeros(p.dims());
        assert!(matches!(
            assemble_residual(&p, 0.0, &z),
            Err(Error::InvalidPenalty(_))
        ));
        assert!(matches!(
            assemble_residual(&p, -1.0, &z),
            Err(Error::InvalidPenalty(_))
        ));
    }

    #[test]
    fn lagrangian_identity() {
        let p = bench::dempe_parabola();
        let z = it(p.dims(), [&[0.3], &[-1.2], &[0.7], &[], &[0.4], &[1.5]]);
        for lambda in [0.5, 2.0, 9.0] {
            let l = penalized_lagrangians(&p, lambda, &z).unwrap();
            assert!((l.total - (l.upper - lambda * l.lower)).abs() <= 1e-12);
            let r = assemble_residual(&p, lambda, &z).unwrap();
            assert_eq!(l.gradient.as_slice(), &r.values.as_slice()[..3]);
        }
    }

    #[test]
    fn wrong_iterate_shape() {
        let p = bench::quadratic_projection();
        let mut z = Iterate::zeros(p.dims());
        z.v.pop();
        assert!(matches!(
            assemble_residual(&p, 1.0, &z),
            Err(Error::Dimension { .. })
        ));
    }
}
