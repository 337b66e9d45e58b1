//! Barrier function machinery: the weighted norm, the barrier `psi` with its
//! gradient factor `psi_prime`, and a checker for the defining conditions.
//!
//! `psi(r) = r^2 / (c - r)` on `0 <= r < c`, and `psi_prime` is the derivative
//! of `psi` with respect to the squared norm `r^2`, which is what the update
//! laws scale by. `psi_prime(r) = (2c - r) / (2 (c - r)^2) >= 1/c`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Inside this fraction of the radius the barrier value is reported as the
/// infinity sentinel instead of a finite number that would overflow anyway.
pub const NEAR_BARRIER_FRACTION: f64 = 1e-12;

/// Threshold the barrier must exceed one part in 10^6 away from the radius
/// for the unboundedness condition to count as satisfied.
pub const UNBOUNDED_THRESHOLD: f64 = 1e5;

#[derive(Debug, Error)]
pub enum BarrierError {
    #[error("barrier radius must be positive and finite, got {c}")]
    InvalidRadius { c: f64 },
    #[error("norm argument {r} lies outside the barrier domain [0, {c})")]
    OutsideDomain { r: f64, c: f64 },
    #[error("weight matrix is not symmetric positive definite")]
    WeightNotSpd,
    #[error("vector length {len} does not match {rows}x{cols} weight")]
    DimensionMismatch { len: usize, rows: usize, cols: usize },
}

fn check_domain(r: f64, c: f64) -> Result<(), BarrierError> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(BarrierError::InvalidRadius { c });
    }
    if !(r >= 0.0) || !r.is_finite() || r >= c {
        return Err(BarrierError::OutsideDomain { r, c });
    }
    Ok(())
}

/// Barrier value `r^2 / (c - r)`. Returns `+inf` once `c - r < 1e-12 c`, and
/// an error outside `[0, c)`.
pub fn psi(r: f64, c: f64) -> Result<f64, BarrierError> {
    check_domain(r, c)?;
    if c - r < NEAR_BARRIER_FRACTION * c {
        return Ok(f64::INFINITY);
    }
    Ok(r * r / (c - r))
}

/// Derivative of the barrier with respect to the squared norm:
/// `(2c - r) / (2 (c - r)^2)`. Same domain and sentinel rules as [`psi`].
pub fn psi_prime(r: f64, c: f64) -> Result<f64, BarrierError> {
    check_domain(r, c)?;
    if c - r < NEAR_BARRIER_FRACTION * c {
        return Ok(f64::INFINITY);
    }
    let d = c - r;
    Ok((2.0 * c - r) / (2.0 * d * d))
}

/// Weighted norm `sqrt(eta^T M eta)` for SPD `M`.
pub fn weighted_norm(eta: &DVector<f64>, m: &DMatrix<f64>) -> Result<f64, BarrierError> {
    if eta.len() != m.nrows() || m.nrows() != m.ncols() {
        return Err(BarrierError::DimensionMismatch {
            len: eta.len(),
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    if !crate::numerics::is_spd(m) {
        return Err(BarrierError::WeightNotSpd);
    }
    // Rounding can push the quadratic form slightly negative at eta ~ 0.
    Ok((eta.dot(&(m * eta))).max(0.0).sqrt())
}

/// Outcome of one defining condition of the barrier function.
#[derive(Debug, Clone)]
pub struct BlfCondition {
    pub name: &'static str,
    pub pass: bool,
    /// Worst grid point and the value observed there, when meaningful.
    pub witness: Option<(f64, f64)>,
}

/// Grid check of the six defining conditions of a barrier function.
#[derive(Debug, Clone)]
pub struct BlfReport {
    pub c: f64,
    pub pass: bool,
    pub conditions: Vec<BlfCondition>,
}

/// Uniform grid of norm values on `[0, c (1 - 1e-6)]` suitable for
/// [`check_blf_conditions`].
pub fn blf_grid(c: f64, points: usize) -> Vec<f64> {
    let top = c * (1.0 - 1e-6);
    (0..points)
        .map(|i| top * i as f64 / (points - 1).max(1) as f64)
        .collect()
}

/// Evaluates the six defining conditions of the barrier on a grid of norm
/// values inside `[0, c)`: zero at the origin, positive elsewhere, unbounded
/// toward the radius, finite on the interior, positive gradient factor, and
/// positivity of `2 psi' r^2 - psi`.
pub fn check_blf_conditions(c: f64, grid: &[f64]) -> Result<BlfReport, BarrierError> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(BarrierError::InvalidRadius { c });
    }
    for &r in grid {
        check_domain(r, c)?;
    }

    let mut conditions = Vec::with_capacity(6);

    let at_zero = psi(0.0, c)?;
    conditions.push(BlfCondition {
        name: "zero at the origin",
        pass: at_zero == 0.0,
        witness: Some((0.0, at_zero)),
    });

    let mut pos_pass = true;
    let mut pos_witness = None;
    for &r in grid.iter().filter(|&&r| r > 0.0) {
        let value = psi(r, c)?;
        if value <= 0.0 {
            pos_pass = false;
            pos_witness = Some((r, value));
            break;
        }
    }
    conditions.push(BlfCondition {
        name: "positive away from the origin",
        pass: pos_pass,
        witness: pos_witness,
    });

    let near = c * (1.0 - 1e-6);
    let near_value = psi(near, c)?;
    conditions.push(BlfCondition {
        name: "unbounded toward the radius",
        pass: near_value > UNBOUNDED_THRESHOLD,
        witness: Some((near, near_value)),
    });

    let mut finite_pass = true;
    let mut finite_witness = None;
    for &r in grid {
        let value = psi(r, c)?;
        if !value.is_finite() {
            finite_pass = false;
            finite_witness = Some((r, value));
            break;
        }
    }
    conditions.push(BlfCondition {
        name: "finite on the interior grid",
        pass: finite_pass,
        witness: finite_witness,
    });

    let mut grad_pass = true;
    let mut grad_witness = None;
    for &r in grid {
        let value = psi_prime(r, c)?;
        if !(value > 0.0) {
            grad_pass = false;
            grad_witness = Some((r, value));
            break;
        }
    }
    conditions.push(BlfCondition {
        name: "positive gradient factor",
        pass: grad_pass,
        witness: grad_witness,
    });

    let mut margin_pass = true;
    let mut margin_witness = None;
    for &r in grid.iter().filter(|&&r| r > 0.0) {
        let value = 2.0 * psi_prime(r, c)? * r * r - psi(r, c)?;
        if !(value > 0.0) {
            margin_pass = false;
            margin_witness = Some((r, value));
            break;
        }
    }
    conditions.push(BlfCondition {
        name: "2 psi' r^2 - psi positive",
        pass: margin_pass,
        witness: margin_witness,
    });

    let pass = conditions.iter().all(|c| c.pass);
    Ok(BlfReport {
        c,
        pass,
        conditions,
    })
}
