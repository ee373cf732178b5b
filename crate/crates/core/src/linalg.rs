//! Small dense kernels: LU with partial pivoting, cyclic Jacobi for
//! symmetric eigenproblems, and a column-pivoted QR null-space basis.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub const DEFAULT_PIVOT_TOL: f64 = 1e-12;
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// The factorization met a pivot below the singularity threshold.
#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("matrix is numerically singular (pivot {pivot:e} at column {column})")]
pub struct Singular {
    pub column: usize,
    pub pivot: f64,
}

fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// `P·A = L·U` with unit lower-triangular `L` stored below the diagonal.
#[derive(Debug, Clone)]
pub struct LuFactorization {
    factors: DMatrix<f64>,
    perm: Vec<usize>,
    min_pivot: f64,
    singular: Option<Singular>,
}

impl LuFactorization {
    /// Factors a square matrix. A pivot with magnitude `≤ pivot_tol · max|Aᵢⱼ|`
    /// marks the factorization singular; elimination stops there.
    pub fn new(a: &DMatrix<f64>, pivot_tol: f64) -> Self {
        assert!(a.is_square(), "LU needs a square matrix");
        let n = a.nrows();
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let threshold = pivot_tol * max_abs(a);
        let mut min_pivot = f64::INFINITY;
        let mut singular = None;

        for k in 0..n {
            let (mut p, mut best) = (k, lu[(k, k)].abs());
            for i in k + 1..n {
                let v = lu[(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            min_pivot = min_pivot.min(best);
            if best <= threshold || best == 0.0 {
                singular = Some(Singular {
                    column: k,
                    pivot: best,
                });
                break;
            }
            if p != k {
                lu.swap_rows(p, k);
                perm.swap(p, k);
            }
            let pivot = lu[(k, k)];
            for i in k + 1..n {
                let l = lu[(i, k)] / pivot;
                lu[(i, k)] = l;
                if l != 0.0 {
                    for j in k + 1..n {
                        lu[(i, j)] -= l * lu[(k, j)];
                    }
                }
            }
        }
        if n == 0 {
            min_pivot = 0.0;
        }

        Self {
            factors: lu,
            perm,
            min_pivot,
            singular,
        }
    }

    pub fn is_singular(&self) -> bool {
        self.singular.is_some()
    }

    pub fn min_pivot(&self) -> f64 {
        self.min_pivot
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn lower(&self) -> DMatrix<f64> {
        let n = self.factors.nrows();
        DMatrix::from_fn(n, n, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Greater => self.factors[(i, j)],
            std::cmp::Ordering::Equal => 1.0,
            std::cmp::Ordering::Less => 0.0,
        })
    }

    pub fn upper(&self) -> DMatrix<f64> {
        self.factors.upper_triangle()
    }

    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>, Singular> {
        if let Some(s) = self.singular {
            return Err(s);
        }
        let n = self.factors.nrows();
        assert_eq!(b.len(), n, "right-hand side length");
        let mut x = DVector::from_fn(n, |i, _| b[self.perm[i]]);
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.factors[(i, j)] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..n {
                s -= self.factors[(i, j)] * x[j];
            }
            x[i] = s / self.factors[(i, i)];
        }
        Ok(x)
    }
}

pub fn lu_solve(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    pivot_tol: f64,
) -> Result<DVector<f64>, Singular> {
    LuFactorization::new(a, pivot_tol).solve(b)
}

/// Eigenvalues (ascending) and matching orthonormal eigenvectors (columns)
/// of the symmetric part of `a`, by cyclic Jacobi rotations.
pub fn symmetric_eigen(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    assert!(a.is_square(), "eigenproblem needs a square matrix");
    let n = a.nrows();
    let mut m = (a + a.transpose()) * 0.5;
    let mut v = DMatrix::<f64>::identity(n, n);
    let scale = m.norm().max(f64::MIN_POSITIVE);

    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].total_cmp(&m[(j, j)]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| m[(i, i)]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &v.column(src));
    }
    (values, vectors)
}

/// Smallest eigenvalue of the symmetric part of `a`; `+∞` for an empty matrix.
pub fn sym_eig_min(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return f64::INFINITY;
    }
    symmetric_eigen(a).0[0]
}

/// Orthonormal basis (as columns) of `{d : A d = 0}` for an `r × k` matrix.
///
/// Runs Householder QR with column pivoting on `Aᵀ`; diagonal entries of
/// `R` at or below `rank_tol · |R₀₀|` are treated as zero.
pub fn null_space_basis(a: &DMatrix<f64>, rank_tol: f64) -> DMatrix<f64> {
    let k = a.ncols();
    let (rank, q) = match numerical_rank_and_q(a, rank_tol) {
        Some(v) => v,
        None => return DMatrix::identity(k, k),
    };
    q.columns(rank, k - rank).into_owned()
}

/// Numerical rank of `a` under the same rule as [`null_space_basis`].
pub fn numerical_rank(a: &DMatrix<f64>, rank_tol: f64) -> usize {
    numerical_rank_and_q(a, rank_tol).map_or(0, |(r, _)| r)
}

fn numerical_rank_and_q(a: &DMatrix<f64>, rank_tol: f64) -> Option<(usize, DMatrix<f64>)> {
    let (rows, k) = a.shape();
    if rows == 0 || k == 0 || max_abs(a) == 0.0 {
        return None;
    }
    // Work on M = Aᵀ (k × rows); its column space is the row space of A.
    let mut r = a.transpose();
    let mut q = DMatrix::<f64>::identity(k, k);
    let mut col_norms: Vec<f64> = (0..rows).map(|j| r.column(j).norm_squared()).collect();
    let steps = rows.min(k);
    let mut rank = 0;
    let mut lead = 0.0;

    for i in 0..steps {
        // Column pivoting on remaining norms.
        let (mut best, mut best_norm) = (i, -1.0);
        for (j, &nrm) in col_norms.iter().enumerate().skip(i) {
            if nrm > best_norm {
                best_norm = nrm;
                best = j;
            }
        }
        if best != i {
            r.swap_columns(i, best);
            col_norms.swap(i, best);
        }
        let x = r.view((i, i), (k - i, 1)).into_owned();
        let alpha = x.norm();
        if i == 0 {
            lead = alpha;
        }
        if alpha <= rank_tol * lead || alpha == 0.0 {
            break;
        }
        let sign = if x[0] >= 0.0 { 1.0 } else { -1.0 };
        let mut v = x.clone();
        v[0] += sign * alpha;
        let vnorm = v.norm();
        if vnorm > 0.0 {
            v /= vnorm;
            // R ← (I − 2vvᵀ) R on the trailing block.
            for j in i..rows {
                let dot: f64 = (0..k - i).map(|t| v[t] * r[(i + t, j)]).sum();
                for t in 0..k - i {
                    r[(i + t, j)] -= 2.0 * v[t] * dot;
                }
            }
            // Q ← Q (I − 2vvᵀ).
            for row in 0..k {
                let dot: f64 = (0..k - i).map(|t| q[(row, i + t)] * v[t]).sum();
                for t in 0..k - i {
                    q[(row, i + t)] -= 2.0 * dot * v[t];
                }
            }
        }
        rank += 1;
        for (j, nrm) in col_norms.iter_mut().enumerate().skip(i + 1) {
            *nrm -= r[(i, j)] * r[(i, j)];
            // Recompute when cancellation has eaten the estimate.
            if *nrm < 0.0 || *nrm <= 1e-12 * best_norm {
                *nrm = r.view((i + 1, j), (k - i - 1, 1)).norm_squared();
            }
        }
    }
    Some((rank, q))
}
