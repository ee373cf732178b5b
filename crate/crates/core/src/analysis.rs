//! Index-set classification and regularity checks at a stationary point.
//!
//! Every complementarity pair `(c, μ)` with `c ≤ 0 ≤ μ` lands in one of three
//! sets: `ν` (active, positive multiplier), `θ` (biactive) or `η` (inactive).
//! The superscripts 1, 2, 3 refer to the pairs `(G, u)`, `(g(x, y), v)` and
//! `(g(x, z), w)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fb::PairCoefficients;
use crate::linalg::{null_space_basis, sym_eig_min, DEFAULT_RANK_TOL};
use crate::problem::BilevelProblem;
use crate::system::{evaluate_iterate, penalized_lagrangians, Iterate};

pub const DEFAULT_ACTIVE_TOL: f64 = 1e-6;
pub const DEFAULT_MULT_TOL: f64 = 1e-6;
pub const DEFAULT_EIG_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisTolerances {
    pub active_tol: f64,
    pub mult_tol: f64,
    pub rank_tol: f64,
    pub eig_tol: f64,
}

impl Default for AnalysisTolerances {
    fn default() -> Self {
        Self {
            active_tol: DEFAULT_ACTIVE_TOL,
            mult_tol: DEFAULT_MULT_TOL,
            rank_tol: DEFAULT_RANK_TOL,
            eig_tol: DEFAULT_EIG_TOL,
        }
    }
}

/// Partition of one complementarity block. Indices are zero-based.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPartition {
    pub nu: Vec<usize>,
    pub theta: Vec<usize>,
    pub eta: Vec<usize>,
    /// Pairs that fit no set: infeasible or with a negative multiplier.
    pub inconsistent: Vec<usize>,
}

impl BlockPartition {
    /// `ν ∪ θ`.
    pub fn active(&self) -> Vec<usize> {
        let mut a: Vec<usize> = self.nu.iter().chain(&self.theta).copied().collect();
        a.sort_unstable();
        a
    }
}

pub fn classify_block(
    values: &[f64],
    mults: &[f64],
    active_tol: f64,
    mult_tol: f64,
) -> BlockPartition {
    let mut p = BlockPartition::default();
    for (i, (&c, &mu)) in values.iter().zip(mults).enumerate() {
        let active = c.abs() <= active_tol;
        if active && mu > mult_tol {
            p.nu.push(i);
        } else if active && mu.abs() <= mult_tol {
            p.theta.push(i);
        } else if c < -active_tol && mu.abs() <= mult_tol {
            p.eta.push(i);
        } else {
            p.inconsistent.push(i);
        }
    }
    p
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexSetPartition {
    pub upper: BlockPartition,
    pub lower_at_y: BlockPartition,
    pub lower_at_z: BlockPartition,
}

type BlockValues = (Vec<f64>, Vec<f64>, Vec<f64>);

fn constraint_values(problem: &BilevelProblem, zeta: &Iterate) -> Result<BlockValues> {
    let ev = evaluate_iterate(problem, zeta)?;
    Ok((
        ev.at_xy.upper_constraints.values.as_slice().to_vec(),
        ev.at_xy.lower_constraints.values.as_slice().to_vec(),
        ev.at_xz.constraints.values.as_slice().to_vec(),
    ))
}

/// Classifies all three blocks, failing when any pair is inconsistent.
pub fn classify(
    problem: &BilevelProblem,
    zeta: &Iterate,
    active_tol: f64,
    mult_tol: f64,
) -> Result<IndexSetPartition> {
    let (gu, gy, gz) = constraint_values(problem, zeta)?;
    let part = IndexSetPartition {
        upper: classify_block(&gu, &zeta.u, active_tol, mult_tol),
        lower_at_y: classify_block(&gy, &zeta.v, active_tol, mult_tol),
        lower_at_z: classify_block(&gz, &zeta.w, active_tol, mult_tol),
    };
    let mut bad = Vec::new();
    for (label, block) in [
        ("G", &part.upper),
        ("g(x,y)", &part.lower_at_y),
        ("g(x,z)", &part.lower_at_z),
    ] {
        bad.extend(block.inconsistent.iter().map(|i| format!("{label}[{i}]")));
    }
    if bad.is_empty() {
        Ok(part)
    } else {
        Err(Error::InconsistentPoint(bad))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankCheck {
    pub rows: usize,
    pub rank: usize,
}

impl RankCheck {
    fn of(a: &DMatrix<f64>, rank_tol: f64) -> Self {
        let z = null_space_basis(a, rank_tol);
        Self {
            rows: a.nrows(),
            rank: a.ncols() - z.ncols(),
        }
    }

    pub fn holds(&self) -> bool {
        self.rank == self.rows
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LicqReport {
    /// Active leader and follower gradients in `(x, y)`.
    pub upper: RankCheck,
    /// Active `∇₂g` at `(x, y)`.
    pub lower_at_y: RankCheck,
    /// Active `∇₂g` at `(x, z)`.
    pub lower_at_z: RankCheck,
}

impl LicqReport {
    pub fn lower_holds(&self) -> bool {
        self.lower_at_y.holds() && self.lower_at_z.holds()
    }
}

fn select_rows(a: &DMatrix<f64>, rows: &[usize], cols: std::ops::Range<usize>) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| a[(rows[i], cols.start + j)])
}

pub fn check_licq(
    problem: &BilevelProblem,
    zeta: &Iterate,
    partition: &IndexSetPartition,
    rank_tol: f64,
) -> Result<LicqReport> {
    let ev = evaluate_iterate(problem, zeta)?;
    let dims = problem.dims();
    let (n, nm) = (dims.n, dims.primal());
    let jg_upper = &ev.at_xy.upper_constraints.jacobian;
    let jg_y = &ev.at_xy.lower_constraints.jacobian;
    let jg_z = &ev.at_xz.constraints.jacobian;

    let a1 = select_rows(jg_upper, &partition.upper.active(), 0..nm);
    let a2 = select_rows(jg_y, &partition.lower_at_y.active(), 0..nm);
    let mut upper = DMatrix::zeros(a1.nrows() + a2.nrows(), nm);
    upper.view_mut((0, 0), a1.shape()).copy_from(&a1);
    upper.view_mut((a1.nrows(), 0), a2.shape()).copy_from(&a2);

    Ok(LicqReport {
        upper: RankCheck::of(&upper, rank_tol),
        lower_at_y: RankCheck::of(
            &select_rows(jg_y, &partition.lower_at_y.active(), n..nm),
            rank_tol,
        ),
        lower_at_z: RankCheck::of(
            &select_rows(jg_z, &partition.lower_at_z.active(), n..nm),
            rank_tol,
        ),
    })
}

/// `θ³ = ∅`.
pub fn check_lscc(partition: &IndexSetPartition) -> bool {
    partition.lower_at_z.theta.is_empty()
}

/// Minimum eigenvalue of `ZᵀMZ`, `None` when `Z` has no columns.
pub fn reduced_min_eig(m: &DMatrix<f64>, z: &DMatrix<f64>) -> Option<f64> {
    if z.ncols() == 0 {
        return None;
    }
    let r = z.transpose() * m * z;
    let sym = (&r + r.transpose()) * 0.5;
    Some(sym_eig_min(&sym))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsoscReport {
    /// Dimension of the critical subspace.
    pub subspace_dim: usize,
    pub min_eig: Option<f64>,
    pub holds: bool,
}

impl SsoscReport {
    fn from_eig(subspace_dim: usize, min_eig: Option<f64>, eig_tol: f64) -> Self {
        Self {
            subspace_dim,
            min_eig,
            holds: min_eig.is_none_or(|e| e > eig_tol),
        }
    }
}

/// Detailed second-order data shared by the strong and informational forms.
struct SecondOrder {
    z: DMatrix<f64>,
    hessian: DMatrix<f64>,
    upper_hessian: DMatrix<f64>,
    lower_hessian: DMatrix<f64>,
}

fn second_order(
    problem: &BilevelProblem,
    lambda: f64,
    zeta: &Iterate,
    partition: &IndexSetPartition,
    rank_tol: f64,
) -> Result<SecondOrder> {
    let ev = evaluate_iterate(problem, zeta)?;
    let lag = penalized_lagrangians(problem, lambda, zeta)?;
    let dims = problem.dims();
    let (n, m) = (dims.n, dims.m);
    let k = n + 2 * m;

    let nu1 = &partition.upper.nu;
    let nu2 = &partition.lower_at_y.nu;
    let nu3 = &partition.lower_at_z.nu;
    let mut q = DMatrix::zeros(nu1.len() + nu2.len() + nu3.len(), k);
    let mut row = 0;
    for (jac, set) in [
        (&ev.at_xy.upper_constraints.jacobian, nu1),
        (&ev.at_xy.lower_constraints.jacobian, nu2),
    ] {
        for &i in set {
            for c in 0..n + m {
                q[(row, c)] = jac[(i, c)];
            }
            row += 1;
        }
    }
    let jz = &ev.at_xz.constraints.jacobian;
    for &i in nu3 {
        for c in 0..n {
            q[(row, c)] = jz[(i, c)];
        }
        for c in 0..m {
            q[(row, n + m + c)] = jz[(i, n + c)];
        }
        row += 1;
    }

    Ok(SecondOrder {
        z: null_space_basis(&q, rank_tol),
        hessian: lag.hessian,
        upper_hessian: lag.upper_hessian,
        lower_hessian: lag.lower_hessian,
    })
}

/// Strong second-order condition on the kernel of the strictly active gradients.
pub fn check_ssosc(
    problem: &BilevelProblem,
    lambda: f64,
    zeta: &Iterate,
    partition: &IndexSetPartition,
    tol: &AnalysisTolerances,
) -> Result<SsoscReport> {
    let so = second_order(problem, lambda, zeta, partition, tol.rank_tol)?;
    Ok(SsoscReport::from_eig(
        so.z.ncols(),
        reduced_min_eig(&so.hessian, &so.z),
        tol.eig_tol,
    ))
}

/// Variant with the follower Hessian replaced by `[[ℓ₁₁, ℓ₁₂], [−ℓ₂₁, −ℓ₂₂]]`.
fn unperturbed_min_eig(so: &SecondOrder, n: usize, m: usize, lambda: f64) -> Option<f64> {
    let k = n + 2 * m;
    let xz_index = |i: usize| if i < n { i } else { i + m };
    let mut h = DMatrix::zeros(k, k);
    h.view_mut((0, 0), so.upper_hessian.shape())
        .copy_from(&so.upper_hessian);
    for i in 0..n + m {
        for j in 0..n + m {
            let sign = if i >= n { -1.0 } else { 1.0 };
            h[(xz_index(i), xz_index(j))] -= lambda * sign * so.lower_hessian[(i, j)];
        }
    }
    reduced_min_eig(&h, &so.z)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularityReport {
    pub lambda: f64,
    pub partition: IndexSetPartition,
    pub licq: LicqReport,
    pub lscc: bool,
    pub ssosc: SsoscReport,
    /// Second-order test with the sign-flipped follower Hessian block.
    pub ssosc_unperturbed: SsoscReport,
    /// Second-order test augmented by the biactive `g(x, z)` pairs, using the
    /// symmetric kink element.
    pub ssosc_augmented: SsoscReport,
}

impl RegularityReport {
    /// Upper and lower LICQ, LSCC and the strong second-order condition.
    pub fn all_hold(&self) -> bool {
        self.licq.upper.holds() && self.licq.lower_holds() && self.lscc && self.ssosc.holds
    }
}

pub fn diagnose(
    problem: &BilevelProblem,
    lambda: f64,
    zeta: &Iterate,
    tol: &AnalysisTolerances,
) -> Result<RegularityReport> {
    let partition = classify(problem, zeta, tol.active_tol, tol.mult_tol)?;
    let licq = check_licq(problem, zeta, &partition, tol.rank_tol)?;
    let lscc = check_lscc(&partition);
    let so = second_order(problem, lambda, zeta, &partition, tol.rank_tol)?;
    let dims = problem.dims();
    let dim = so.z.ncols();

    let base = reduced_min_eig(&so.hessian, &so.z);
    let ssosc = SsoscReport::from_eig(dim, base, tol.eig_tol);
    let ssosc_unperturbed = SsoscReport::from_eig(
        dim,
        unperturbed_min_eig(&so, dims.n, dims.m, lambda),
        tol.eig_tol,
    );

    let kink = PairCoefficients::SYMMETRIC_KINK;
    let extra = partition.lower_at_z.theta.len();
    let extra_eig = (extra > 0).then(|| -lambda * (-kink.multiplier / kink.constraint));
    let augmented = match (base, extra_eig) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    };
    let ssosc_augmented = SsoscReport::from_eig(dim + extra, augmented, tol.eig_tol);

    Ok(RegularityReport {
        lambda,
        partition,
        licq,
        lscc,
        ssosc,
        ssosc_unperturbed,
        ssosc_augmented,
    })
}
