//! Fischer–Burmeister complementarity function and the coefficient
//! selection used for its generalized Jacobian rows.

use serde::{Deserialize, Serialize};

/// Default radius below which a `(constraint, multiplier)` pair is treated
/// as sitting on the kink of `φ`.
pub const DEFAULT_KINK_TOL: f64 = 1e-12;

/// `φ(a, b) = √(a² + b²) − a − b`.
///
/// Vanishes exactly when `a ≥ 0`, `b ≥ 0` and `ab = 0`.
#[inline]
pub fn fb(a: f64, b: f64) -> f64 {
    a.hypot(b) - a - b
}

/// Row coefficients of `ζ ↦ φ(−c(ζ), μ)`: the Jacobian row is
/// `constraint · ∇c + multiplier · e_μ`.
///
/// Admissible pairs lie in the disc `(α − 1)² + (β + 1)² ≤ 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairCoefficients {
    pub constraint: f64,
    pub multiplier: f64,
}

impl PairCoefficients {
    /// Boundary point of the disc reached as `(−c, μ) → 0` along the
    /// diagonal: `(1 − √2/2, √2/2 − 1)`.
    pub const SYMMETRIC_KINK: Self = Self {
        constraint: 1.0 - std::f64::consts::FRAC_1_SQRT_2,
        multiplier: std::f64::consts::FRAC_1_SQRT_2 - 1.0,
    };

    /// Builds an explicit kink element, or `None` when it lies outside the disc.
    pub fn kink_element(constraint: f64, multiplier: f64) -> Option<Self> {
        let c = Self {
            constraint,
            multiplier,
        };
        c.in_disc().then_some(c)
    }

    pub fn disc_excess(&self) -> f64 {
        (self.constraint - 1.0).powi(2) + (self.multiplier + 1.0).powi(2) - 1.0
    }

    pub fn in_disc(&self) -> bool {
        self.disc_excess() <= 1e-12
    }
}

/// Coefficients for a pair `(c, μ)` using the symmetric kink element.
pub fn pair_coeffs(c: f64, mult: f64, kink_tol: f64) -> PairCoefficients {
    pair_coeffs_with(c, mult, kink_tol, PairCoefficients::SYMMETRIC_KINK)
}

/// Coefficients for a pair `(c, μ)`; `kink` is returned when
/// `√(c² + μ²) ≤ kink_tol`.
pub fn pair_coeffs_with(
    c: f64,
    mult: f64,
    kink_tol: f64,
    kink: PairCoefficients,
) -> PairCoefficients {
    let r = c.hypot(mult);
    if r <= kink_tol {
        return kink;
    }
    PairCoefficients {
        constraint: 1.0 + c / r,
        multiplier: mult / r - 1.0,
    }
}
