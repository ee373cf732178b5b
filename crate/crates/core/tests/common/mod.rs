//! Finite-difference oracles and point generators shared by the integration tests.
#![allow(dead_code)]

use bilevel_ssn::bench;
use bilevel_ssn::system::assemble_residual;
use bilevel_ssn::{BilevelProblem, Iterate};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

fn residual_at(problem: &BilevelProblem, lambda: f64, s: &DVector<f64>) -> DVector<f64> {
    let z = Iterate::from_stacked(problem.dims(), s.as_slice()).unwrap();
    assemble_residual(problem, lambda, &z).unwrap().values
}

/// Central-difference Jacobian of the residual map.
pub fn fd_jacobian(problem: &BilevelProblem, lambda: f64, zeta: &Iterate) -> DMatrix<f64> {
    let s = zeta.to_stacked();
    let n = s.len();
    let mut j = DMatrix::zeros(n, n);
    for k in 0..n {
        let h = FD_STEP * s[k].abs().max(1.0);
        let mut p = s.clone();
        let mut m = s.clone();
        p[k] += h;
        m[k] -= h;
        let col = (residual_at(problem, lambda, &p) - residual_at(problem, lambda, &m)) / (2.0 * h);
        j.set_column(k, &col);
    }
    j
}

/// Central-difference gradient of `½‖Φ‖²`.
pub fn fd_merit_grad(problem: &BilevelProblem, lambda: f64, zeta: &Iterate) -> DVector<f64> {
    let s = zeta.to_stacked();
    let psi = |v: &DVector<f64>| 0.5 * residual_at(problem, lambda, v).norm_squared();
    DVector::from_fn(s.len(), |k, _| {
        let h = FD_STEP * s[k].abs().max(1.0);
        let mut p = s.clone();
        let mut m = s.clone();
        p[k] += h;
        m[k] -= h;
        (psi(&p) - psi(&m)) / (2.0 * h)
    })
}

pub fn rel_err_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / a.amax().max(1.0)
}

pub fn rel_err_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / a.amax().max(1.0)
}

pub fn random_iterate(problem: &BilevelProblem, rng: &mut ChaCha8Rng, radius: f64) -> Iterate {
    let n = problem.dims().total();
    let s: Vec<f64> = (0..n).map(|_| rng.gen_range(-radius..radius)).collect();
    Iterate::from_stacked(problem.dims(), &s).unwrap()
}

/// Random iterate with at least one complementarity pair exactly at `(0, 0)`.
pub fn kink_iterate(name: &str, problem: &BilevelProblem, rng: &mut ChaCha8Rng) -> Iterate {
    let mut z = random_iterate(problem, rng, 2.0);
    match name {
        bench::QUADRATIC_PROJECTION => {
            // g₁(x, y) = y₁ − y₂ and g₂(x, z) = −z₁ − z₂.
            z.y[1] = z.y[0];
            z.v[0] = 0.0;
            z.z[1] = -z.z[0];
            z.w[1] = 0.0;
        }
        bench::XY_LINEAR => {
            // g = x − y at both points.
            z.y[0] = z.x[0];
            z.z[0] = z.x[0];
            z.v[0] = 0.0;
            z.w[0] = 0.0;
        }
        bench::DEMPE_PARABOLA => {
            // g = −x + y².
            z.x[0] = z.y[0] * z.y[0];
            z.z[0] = -z.y[0];
            z.v[0] = 0.0;
            z.w[0] = 0.0;
        }
        other => panic!("no kink construction for {other}"),
    }
    z
}
