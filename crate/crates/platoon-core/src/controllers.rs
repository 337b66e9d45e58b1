//! Control laws: ideal matching gains, the baseline spacing controller, and
//! the barrier-scaled adaptive updates for followers and the leader.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use thiserror::Error;

use crate::barrier::{self, BarrierError};
use crate::model::{self, ControllerGains, VehicleParams};

/// Residual bound the ideal gains must satisfy on their matching identities.
pub const MATCHING_RESIDUAL_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("{name} must be positive and finite, got {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("matching residual {residual:.3e} exceeds {tolerance:.3e}")]
    MatchingResidual { residual: f64, tolerance: f64 },
}

fn require_positive(name: &'static str, value: f64) -> Result<(), ControllerError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(ControllerError::InvalidParameter { name, value })
    }
}

/// Gain that maps a follower's open-loop dynamics onto the reference model:
/// only the acceleration row differs, so the first two components are zero.
///
/// `k = [0, 0, (tb - tau)/(lambda tb), (tau - lambda tb)/(lambda tb)]`.
pub fn ideal_follower_gain(
    tau: f64,
    lambda: f64,
    tau_bar: f64,
) -> Result<Vector4<f64>, ControllerError> {
    require_positive("tau", tau)?;
    require_positive("lambda", lambda)?;
    require_positive("tau_bar", tau_bar)?;
    let k = Vector4::new(
        0.0,
        0.0,
        (tau_bar - tau) / (lambda * tau_bar),
        (tau - lambda * tau_bar) / (lambda * tau_bar),
    );
    // The identity only involves the acceleration row; verify it directly.
    let theta = lambda / tau;
    let r1 = (-1.0 / tau_bar) - (-1.0 / tau + theta * k[2]);
    let r2 = (1.0 / tau_bar) - (lambda / tau + theta * k[3]);
    let residual = (r1 * r1 + r2 * r2).sqrt();
    if residual > MATCHING_RESIDUAL_TOL {
        return Err(ControllerError::MatchingResidual {
            residual,
            tolerance: MATCHING_RESIDUAL_TOL,
        });
    }
    Ok(k)
}

/// Two leader gains: the first maps the leader's open loop onto the reference
/// leader model, the second maps the reference leader model onto the stable
/// target dynamics parameterized by `(a_c_v, a_c_a, a_c_u)`.
pub fn ideal_leader_gains(
    tau: f64,
    lambda: f64,
    gains: &ControllerGains,
) -> Result<(Vector3<f64>, Vector3<f64>), ControllerError> {
    require_positive("tau", tau)?;
    require_positive("lambda", lambda)?;
    require_positive("tau_bar", gains.tau_bar)?;
    let tb = gains.tau_bar;
    let k_x = Vector3::new(
        0.0,
        (tb - tau) / (lambda * tb),
        (tau - lambda * tb) / (lambda * tb),
    );
    let k_xt = Vector3::new(
        tau * gains.a_c_v / lambda,
        (tb * gains.a_c_a + 1.0) * tau / (lambda * tb),
        (tb * gains.a_c_u - 1.0) * tau / (lambda * tb),
    );

    let params = VehicleParams {
        tau,
        lambda,
        ..VehicleParams::default()
    };
    let theta = params.theta();
    let b_u = model::b_u_reduced();
    let line1 =
        gains.a_m0_reduced() - (model::a_p_leader_reduced(&params, gains) + theta * b_u * k_x.transpose());
    let line2 = gains.a_c() - (gains.a_m0_reduced() + theta * b_u * k_xt.transpose());
    let residual = line1.norm().max(line2.norm());
    if residual > MATCHING_RESIDUAL_TOL {
        return Err(ControllerError::MatchingResidual {
            residual,
            tolerance: MATCHING_RESIDUAL_TOL,
        });
    }
    Ok((k_x, k_xt))
}

/// Baseline follower law: first-order lag driven by the spacing PD term and
/// the predecessor's baseline control.
pub fn baseline_follower_dudt(
    u_bl: f64,
    e: f64,
    e_dot: f64,
    u_bl_prev: f64,
    gains: &ControllerGains,
) -> f64 {
    (-u_bl + gains.k_p * e + gains.k_d * e_dot + u_bl_prev) / gains.h
}

/// Baseline leader law: first-order lag tracking the external command.
pub fn baseline_leader_dudt(u_bl: f64, u_in: f64, gains: &ControllerGains) -> f64 {
    (-u_bl + u_in) / gains.h
}

/// Follower adaptive term `k_hat^T x`.
pub fn follower_adaptive_input(k_hat: &Vector4<f64>, x: &Vector4<f64>) -> f64 {
    k_hat.dot(x)
}

/// Follower gain adaptation, scaled by the barrier gradient at the weighted
/// tracking-error norm: `-Gamma psi'(||xt||_P) x (xt^T P b_u)`.
///
/// Errors once the tracking error reaches the barrier radius.
pub fn follower_gain_update(
    x: &Vector4<f64>,
    x_tilde: &Vector4<f64>,
    p_m: &Matrix4<f64>,
    c: f64,
    gamma: &Matrix4<f64>,
) -> Result<Vector4<f64>, BarrierError> {
    let r = (x_tilde.dot(&(p_m * x_tilde))).max(0.0).sqrt();
    let slope = barrier::psi_prime(r, c)?;
    let projection = x_tilde.dot(&(p_m * model::b_u()));
    Ok(-(gamma * x) * (slope * projection))
}

/// Leader adaptive term `k_hat_x^T x0 + k_hat_xt^T xt0`.
pub fn leader_adaptive_input(
    k_hat_x: &Vector3<f64>,
    k_hat_xt: &Vector3<f64>,
    x0: &Vector3<f64>,
    x_tilde0: &Vector3<f64>,
) -> f64 {
    k_hat_x.dot(x0) + k_hat_xt.dot(x_tilde0)
}

/// Leader gain adaptation for both gains, sharing the barrier slope and the
/// projection `xt0^T P b_u` but regressing on `x0` and `xt0` respectively.
pub fn leader_gain_updates(
    x0: &Vector3<f64>,
    x_tilde0: &Vector3<f64>,
    p_m0: &Matrix3<f64>,
    c: f64,
    gamma_x: &Matrix3<f64>,
    gamma_xt: &Matrix3<f64>,
) -> Result<(Vector3<f64>, Vector3<f64>), BarrierError> {
    let r = (x_tilde0.dot(&(p_m0 * x_tilde0))).max(0.0).sqrt();
    let slope = barrier::psi_prime(r, c)?;
    let projection = x_tilde0.dot(&(p_m0 * model::b_u_reduced()));
    let d_x = -(gamma_x * x0) * (slope * projection);
    let d_xt = -(gamma_xt * x_tilde0) * (slope * projection);
    Ok((d_x, d_xt))
}
