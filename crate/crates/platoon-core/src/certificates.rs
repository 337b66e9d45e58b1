//! Numerical certificates for the platoon guarantees.
//!
//! Everything here is a pure evaluation of a closed form plus the tolerance
//! it was computed under: target-loop stability inequalities with an
//! eigenvalue cross-check, external positivity of the velocity cascade,
//! string stability of the frequency gain, the interconnection constant
//! `Omega`, the tracking-error radius `Zbar`, the minimum standstill
//! distance derived from them, and an audit of simulated trajectories
//! against the containment, spacing, and energy-decay guarantees.

use nalgebra::{DMatrix, Matrix3, Matrix4, SMatrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{self, EngineError, Trajectory};
use crate::model::{ControllerGains, Scenario};
use crate::numerics::{self, NumericsError};

/// Simulated positivity responses may dip this far below zero before the
/// certificate fails (integration rounding allowance).
pub const POSITIVITY_TOLERANCE: f64 = 1e-9;
/// The peak frequency gain must equal one within this tolerance, attained at
/// zero frequency only.
pub const STRING_GAIN_TOLERANCE: f64 = 1e-12;
/// Default trapezoid step for the interconnection-gain quadrature.
pub const OMEGA_QUADRATURE_DT: f64 = 0.02;
/// Absolute convergence tolerance for the interconnection-gain quadrature.
pub const OMEGA_QUADRATURE_TOL: f64 = 1e-5;
/// Sampled-energy increases are tolerated up to `1e-6 * max(1, V)` per
/// sample pair before they count as monotonicity violations.
pub const LYAPUNOV_INCREASE_RTOL: f64 = 1e-6;
/// Horizon factor for positivity sampling: responses are checked on
/// `[0, 10 h]`.
pub const POSITIVITY_HORIZON_FACTOR: f64 = 10.0;
/// Default step for positivity sampling and simulation.
pub const POSITIVITY_DT: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum CertificateError {
    #[error("{0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Which tracking-error radius enters the standstill bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZbarMode {
    /// Literal radius formula `c / lambda_min(P)`.
    Paper,
    /// Norm-equivalence radius `c / sqrt(lambda_min(P))`, valid for any SPD
    /// weight; the default because it provably contains the error set.
    Sound,
}

impl std::fmt::Display for ZbarMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ZbarMode::Paper => write!(f, "paper"),
            ZbarMode::Sound => write!(f, "sound"),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Inequality {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

fn strict(name: &str, lhs: f64, rhs: f64) -> Inequality {
    Inequality {
        name: name.to_string(),
        lhs,
        rhs,
        pass: lhs > rhs,
    }
}

/// Target-loop stability conditions with an eigenvalue cross-check.
#[derive(Debug, Clone, Serialize)]
pub struct RouthHurwitzReport {
    /// The four strict inequalities `h > 0`, `k_p > 0`, `k_d > 0`,
    /// `k_d > tau_bar * k_p`.
    pub inequalities: Vec<Inequality>,
    /// Largest real part over the follower target-matrix spectrum, when the
    /// matrix is well defined.
    pub spectral_abscissa_a_m: Option<f64>,
    /// Largest real part over the leader target-matrix spectrum.
    pub spectral_abscissa_a_c: Option<f64>,
    /// True when the inequality verdict and the eigenvalue sign agree.
    pub eigenvalue_cross_check: bool,
    pub pass: bool,
}

/// Evaluates the follower stability inequalities and cross-checks them
/// against the directly computed spectrum. The inequalities are necessary and
/// sufficient, so verdict and eigenvalue sign must agree whenever the matrix
/// can be formed.
pub fn check_routh_hurwitz(gains: &ControllerGains) -> RouthHurwitzReport {
    let inequalities = vec![
        strict("h > 0", gains.h, 0.0),
        strict("k_p > 0", gains.k_p, 0.0),
        strict("k_d > 0", gains.k_d, 0.0),
        strict("k_d > tau_bar * k_p", gains.k_d, gains.tau_bar * gains.k_p),
    ];
    let pass = inequalities.iter().all(|i| i.pass);

    let well_defined = gains.h > 0.0 && gains.tau_bar > 0.0;
    let (abscissa_m, abscissa_c, cross_check) = if well_defined {
        let am = numerics::spectral_abscissa(&to_dmatrix(&gains.a_m()));
        let ac = numerics::spectral_abscissa(&to_dmatrix(&gains.a_c()));
        (Some(am), Some(ac), pass == (am < 0.0))
    } else {
        (None, None, true)
    };

    RouthHurwitzReport {
        inequalities,
        spectral_abscissa_a_m: abscissa_m,
        spectral_abscissa_a_c: abscissa_c,
        eigenvalue_cross_check: cross_check,
        pass: pass && cross_check,
    }
}

/// Solved tracking metrics with their equation residuals.
#[derive(Debug, Clone, Serialize)]
pub struct LyapunovReport {
    /// Follower metric, row major.
    pub p_m: Vec<Vec<f64>>,
    pub p_m_residual: f64,
    pub p_m_min_eigenvalue: f64,
    /// Leader metric, row major.
    pub p_m0: Vec<Vec<f64>>,
    pub p_m0_residual: f64,
    pub p_m0_min_eigenvalue: f64,
    /// Residuals are relative to the Frobenius norm of the right-hand side
    /// and must stay below this.
    pub residual_rtol: f64,
    pub pass: bool,
}

fn lyapunov_residual(a: &DMatrix<f64>, p: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    (a.transpose() * p + p * a + q).norm() / q.norm()
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn to_dmatrix<const R: usize, const C: usize>(m: &SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_fn(R, C, |i, j| m[(i, j)])
}

/// Solves both tracking metrics and reports the residuals alongside them.
pub fn lyapunov_certificate(gains: &ControllerGains) -> Result<LyapunovReport, CertificateError> {
    let a_m = to_dmatrix(&gains.a_m());
    let q_m = DMatrix::from_fn(4, 4, |i, j| gains.q_m[i][j]);
    let a_c = to_dmatrix(&gains.a_c());
    let q_c = DMatrix::from_fn(3, 3, |i, j| gains.q_c[i][j]);
    let p_m = numerics::solve_lyapunov(&a_m, &q_m)?;
    let p_m0 = numerics::solve_lyapunov(&a_c, &q_c)?;
    let r_m = lyapunov_residual(&a_m, &p_m, &q_m);
    let r_m0 = lyapunov_residual(&a_c, &p_m0, &q_c);
    let rtol = numerics::LYAPUNOV_RESIDUAL_RTOL;
    let min_m = numerics::min_symmetric_eigenvalue(&p_m);
    let min_m0 = numerics::min_symmetric_eigenvalue(&p_m0);
    Ok(LyapunovReport {
        p_m: matrix_rows(&p_m),
        p_m_residual: r_m,
        p_m_min_eigenvalue: min_m,
        p_m0: matrix_rows(&p_m0),
        p_m0_residual: r_m0,
        p_m0_min_eigenvalue: min_m0,
        residual_rtol: rtol,
        pass: r_m <= rtol && r_m0 <= rtol && min_m > 0.0 && min_m0 > 0.0,
    })
}

/// External positivity of the velocity cascade: closed-form kernels sampled
/// on a grid plus a forced-response simulation from zero initial conditions.
#[derive(Debug, Clone, Serialize)]
pub struct PositivityReport {
    pub h: f64,
    pub t_max: f64,
    pub dt: f64,
    /// Minimum of the velocity-cascade kernel `exp(-t/h)/h` over the grid.
    pub min_g: f64,
    /// Minimum of the spacing-response kernel `exp(-t/h)` over the grid.
    pub min_f: f64,
    /// The spacing kernel at zero; equals one.
    pub f_at_zero: f64,
    /// Minimum simulated follower velocity under a nonnegative pulse.
    pub sim_min_velocity: f64,
    /// Minimum of the running integral of the velocity difference, the
    /// shifted spacing of the pair.
    pub sim_min_spacing_integral: f64,
    /// Simulated quantities may not drop below minus this.
    pub tolerance: f64,
    pub pass: bool,
}

/// Samples both cascade kernels on `[0, t_max]` and drives the velocity pair
/// `h v' = v_in - v` with a rectangular unit pulse from zero initial
/// conditions, confirming the follower velocity and the running spacing
/// integral stay nonnegative.
pub fn external_positivity_certificate(
    h: f64,
    t_max: f64,
    dt: f64,
) -> Result<PositivityReport, CertificateError> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(CertificateError::InvalidParameter(format!(
            "time headway must be positive and finite, got {h}"
        )));
    }
    if !(t_max > 0.0 && dt > 0.0 && dt <= t_max && t_max.is_finite() && dt.is_finite()) {
        return Err(CertificateError::InvalidParameter(format!(
            "need 0 < dt <= t_max, got dt = {dt}, t_max = {t_max}"
        )));
    }

    let n_steps = (t_max / dt).ceil() as usize;
    let mut min_g = f64::INFINITY;
    let mut min_f = f64::INFINITY;
    for k in 0..=n_steps {
        let t = (k as f64 * dt).min(t_max);
        let (g, f) = numerics::impulse_responses(h, t);
        min_g = min_g.min(g);
        min_f = min_f.min(f);
    }
    let (_, f_at_zero) = numerics::impulse_responses(h, 0.0);

    // Rectangular unit pulse over the first half of the horizon.
    let pulse_end = (n_steps / 2) as f64 * dt;
    let v_in = |t: f64| if t < pulse_end { 1.0 } else { 0.0 };

    let mut v = 0.0_f64;
    let mut integral = 0.0_f64;
    let mut min_v = v;
    let mut min_integral = integral;
    let mut diff_prev = v_in(0.0) - v;
    for k in 0..n_steps {
        let t = k as f64 * dt;
        let next = numerics::rk4_step(
            |t, y: &[f64], dy: &mut [f64]| {
                dy[0] = (v_in(t) - y[0]) / h;
                Ok::<(), std::convert::Infallible>(())
            },
            &[v],
            t,
            dt,
        )
        .map_err(|e| CertificateError::InvalidParameter(format!("positivity integration: {e}")))?;
        v = next[0];
        let diff = v_in(t + dt) - v;
        integral += 0.5 * (diff_prev + diff) * dt;
        diff_prev = diff;
        min_v = min_v.min(v);
        min_integral = min_integral.min(integral);
    }

    let tol = POSITIVITY_TOLERANCE;
    let pass = min_g >= 0.0
        && min_f >= 0.0
        && (f_at_zero - 1.0).abs() <= f64::EPSILON
        && min_v >= -tol
        && min_integral >= -tol;
    Ok(PositivityReport {
        h,
        t_max,
        dt,
        min_g,
        min_f,
        f_at_zero,
        sim_min_velocity: min_v,
        sim_min_spacing_integral: min_integral,
        tolerance: tol,
        pass,
    })
}

/// Peak of the velocity-cascade frequency gain over a grid.
#[derive(Debug, Clone, Serialize)]
pub struct StringStabilityReport {
    pub h: f64,
    pub max_gain: f64,
    /// Frequency at which the maximum was attained.
    pub argmax_omega: f64,
    pub gain_at_zero: f64,
    /// True when the gain is nonincreasing along the ascending grid.
    pub monotone_nonincreasing: bool,
    /// The peak must equal one within this, and only at zero frequency.
    pub tolerance: f64,
    pub pass: bool,
}

/// 400 log-spaced frequencies on `[1e-2, 1e3]` rad/s, plus zero.
pub fn default_omega_grid() -> Vec<f64> {
    let mut grid = vec![0.0];
    let (lo, hi, n) = (1e-2_f64, 1e3_f64, 400usize);
    let ratio = (hi / lo).ln();
    for k in 0..n {
        let frac = k as f64 / (n - 1) as f64;
        grid.push(lo * (ratio * frac).exp());
    }
    grid
}

/// Evaluates the cascade gain over the grid: the supremum must be one,
/// attained at zero frequency only, and the gain must decay monotonically.
pub fn string_stability_certificate(
    h: f64,
    omega_grid: &[f64],
) -> Result<StringStabilityReport, CertificateError> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(CertificateError::InvalidParameter(format!(
            "time headway must be positive and finite, got {h}"
        )));
    }
    if omega_grid.is_empty() {
        return Err(CertificateError::InvalidParameter(
            "frequency grid must be nonempty".to_string(),
        ));
    }
    if omega_grid.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(CertificateError::InvalidParameter(
            "frequency grid entries must be finite and nonnegative".to_string(),
        ));
    }

    let gain_at_zero = numerics::frequency_gain(h, 0.0);
    let mut max_gain = gain_at_zero;
    let mut argmax = 0.0;
    let mut strictly_below_peak_elsewhere = true;
    for &w in omega_grid {
        let g = numerics::frequency_gain(h, w);
        if g > max_gain {
            max_gain = g;
            argmax = w;
        }
        if w > 0.0 && g >= 1.0 {
            strictly_below_peak_elsewhere = false;
        }
    }

    let mut sorted: Vec<f64> = omega_grid.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let monotone = sorted
        .windows(2)
        .all(|w| numerics::frequency_gain(h, w[1]) <= numerics::frequency_gain(h, w[0]));

    let tol = STRING_GAIN_TOLERANCE;
    let pass = (max_gain - 1.0).abs() <= tol
        && argmax == 0.0
        && strictly_below_peak_elsewhere
        && monotone;
    Ok(StringStabilityReport {
        h,
        max_gain,
        argmax_omega: argmax,
        gain_at_zero,
        monotone_nonincreasing: monotone,
        tolerance: tol,
        pass,
    })
}

/// Tracking-error radius in Euclidean coordinates, from the barrier radius
/// and the minimum eigenvalues of the two metrics.
pub fn compute_zbar(
    c: f64,
    p_m: &DMatrix<f64>,
    p_m0: &DMatrix<f64>,
    mode: ZbarMode,
) -> Result<f64, CertificateError> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(CertificateError::InvalidParameter(format!(
            "barrier radius must be positive and finite, got {c}"
        )));
    }
    for (name, p) in [("P_m", p_m), ("P_m0", p_m0)] {
        if !numerics::is_spd(p) {
            return Err(CertificateError::InvalidParameter(format!(
                "{name} must be symmetric positive definite"
            )));
        }
    }
    let lam_m = numerics::min_symmetric_eigenvalue(p_m);
    let lam_m0 = numerics::min_symmetric_eigenvalue(p_m0);
    Ok(match mode {
        ZbarMode::Paper => (c / lam_m0).max(c / lam_m),
        ZbarMode::Sound => (c / lam_m0.sqrt()).max(c / lam_m.sqrt()),
    })
}

/// Interconnection gain with its quadrature diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct OmegaReport {
    pub omega: f64,
    pub n_followers: usize,
    /// Spectral norm of the stacked coupling block.
    pub b_norm: f64,
    /// Converged trapezoid step.
    pub dt_quad: f64,
    /// Truncation horizon of the quadrature.
    pub t_max: f64,
    /// Step halvings performed until successive values agreed.
    pub refinements: u32,
    /// Residual tail estimate beyond the horizon, included in `omega`.
    pub tail_bound: f64,
    /// Absolute agreement required between successive refinements.
    pub tolerance: f64,
}

/// Integrates the follower-block transition-norm against the coupling norm:
/// the gain from reference-versus-actual input mismatch to stacked state
/// deviation. Fails if the follower block is not Hurwitz.
pub fn compute_omega(gains: &ControllerGains, n: usize) -> Result<OmegaReport, CertificateError> {
    let ic = engine::assemble_interconnected(gains, n)?;
    let quad = numerics::integrate_norm_expm(
        &ic.a_bar_prime,
        &ic.b_wtilde_prime,
        OMEGA_QUADRATURE_DT,
        OMEGA_QUADRATURE_TOL,
    )?;
    Ok(OmegaReport {
        omega: quad.value,
        n_followers: n,
        b_norm: numerics::spectral_norm(&ic.b_wtilde_prime),
        dt_quad: quad.dt,
        t_max: quad.t_max,
        refinements: quad.refinements,
        tail_bound: quad.tail_bound,
        tolerance: OMEGA_QUADRATURE_TOL,
    })
}

/// Minimum standstill distance `(1 + h) * (1 + omega * sqrt(n)) * zbar`
/// above which every inter-vehicle spacing stays positive for all time.
pub fn min_standstill_distance(h: f64, n: usize, zbar: f64, omega: f64) -> f64 {
    (1.0 + h) * (1.0 + omega * (n as f64).sqrt()) * zbar
}

/// Comparison of one vehicle's configured standstill distance against the
/// bound.
#[derive(Debug, Clone, Serialize)]
pub struct StandstillMargin {
    pub vehicle: usize,
    pub standstill: f64,
    /// `standstill - r_min`; must be positive for the guarantee.
    pub margin: f64,
    pub pass: bool,
}

/// Per-vehicle standstill-distance check in the selected radius mode.
#[derive(Debug, Clone, Serialize)]
pub struct StandstillReport {
    pub mode: ZbarMode,
    pub zbar_paper: f64,
    pub zbar_sound: f64,
    pub r_min_paper: f64,
    pub r_min_sound: f64,
    /// The bound actually enforced, per the selected mode.
    pub r_min: f64,
    /// One entry per follower; the lead vehicle has no predecessor gap.
    pub vehicles: Vec<StandstillMargin>,
    pub pass: bool,
}

/// Audit of a simulated trajectory against containment, collision-freedom,
/// and sampled energy decay.
#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryAudit {
    /// Per vehicle (leader first): peak weighted tracking-error norm divided
    /// by the barrier radius.
    pub max_xtilde_ratio: Vec<f64>,
    /// Per follower: smallest spacing to the predecessor over the run.
    pub min_spacing: Vec<f64>,
    pub overall_min_spacing: f64,
    /// Sample pairs where a vehicle's energy rose beyond tolerance.
    pub lyapunov_increase_count: usize,
    /// Largest tolerance-exceeding rise observed (0 when none).
    pub lyapunov_increase_max: f64,
    /// Relative tolerance rule for energy rises.
    pub lyapunov_rtol: f64,
    /// Per follower: actual spacing-error magnitude at the final sample.
    pub final_abs_e: Vec<f64>,
    /// Per follower: smallest margin of the spacing chain
    /// `(s - r) - (e - e_v) - h (v - v_v)`, equal to the virtual layer's
    /// shifted spacing; nonnegative whenever the virtual layer is safe.
    pub chain_margin_min: Vec<f64>,
    /// All ratios stayed below one.
    pub contained: bool,
    /// All spacings stayed positive.
    pub collision_free: bool,
    /// No tolerance-exceeding energy rises.
    pub monotone: bool,
}

/// Scans a trajectory sample by sample. Norms are recomputed from the raw
/// layer states under the supplied metrics, independently of the series the
/// engine recorded.
///
/// # Panics
/// Panics if the trajectory has no samples; engine runs always record at
/// least the initial state.
pub fn audit_trajectory(
    traj: &Trajectory,
    gains: &ControllerGains,
    p_m: &Matrix4<f64>,
    p_m0: &Matrix3<f64>,
    c: f64,
) -> TrajectoryAudit {
    assert!(
        !traj.samples.is_empty(),
        "cannot audit an empty trajectory"
    );
    let n_vehicles = traj.n_vehicles();
    let n_followers = n_vehicles - 1;
    let h = gains.h;

    let mut max_ratio = vec![0.0_f64; n_vehicles];
    let mut min_spacing = vec![f64::INFINITY; n_followers];
    let mut chain_margin = vec![f64::INFINITY; n_followers];
    let mut increase_count = 0usize;
    let mut increase_max = 0.0_f64;

    for (idx, (state, derived)) in traj.samples.iter().zip(&traj.derived).enumerate() {
        let xt0 = state.ap[0].reduced() - state.vp[0].reduced();
        let r0 = xt0.dot(&(p_m0 * xt0)).max(0.0).sqrt();
        max_ratio[0] = max_ratio[0].max(r0 / c);
        for j in 1..n_vehicles {
            let xt = state.ap[j].as_vector() - state.rp[j].as_vector();
            let r = xt.dot(&(p_m * xt)).max(0.0).sqrt();
            max_ratio[j] = max_ratio[j].max(r / c);
            min_spacing[j - 1] = min_spacing[j - 1].min(derived.spacing[j]);

            let s_bar = state.ap[j].e + h * state.ap[j].v;
            let e_dev = state.ap[j].e - state.vp[j].e;
            let v_dev = state.ap[j].v - state.vp[j].v;
            chain_margin[j - 1] = chain_margin[j - 1].min(s_bar - e_dev - h * v_dev);
        }
        if idx + 1 < traj.samples.len() {
            let next = &traj.derived[idx + 1];
            for j in 0..n_vehicles {
                let v = derived.lyapunov[j];
                let rise = next.lyapunov[j] - v;
                let tol = LYAPUNOV_INCREASE_RTOL * v.max(1.0);
                if rise > tol {
                    increase_count += 1;
                    increase_max = increase_max.max(rise);
                }
            }
        }
    }

    let final_abs_e: Vec<f64> = (1..n_vehicles)
        .map(|j| traj.final_state().ap[j].e.abs())
        .collect();
    let overall_min_spacing = min_spacing.iter().copied().fold(f64::INFINITY, f64::min);
    let contained = max_ratio.iter().all(|r| *r < 1.0);
    let collision_free = n_followers == 0 || overall_min_spacing > 0.0;
    let monotone = increase_count == 0;

    TrajectoryAudit {
        max_xtilde_ratio: max_ratio,
        min_spacing,
        overall_min_spacing,
        lyapunov_increase_count: increase_count,
        lyapunov_increase_max: increase_max,
        lyapunov_rtol: LYAPUNOV_INCREASE_RTOL,
        final_abs_e,
        chain_margin_min: chain_margin,
        contained,
        collision_free,
        monotone,
    }
}

/// Full certificate bundle for one scenario.
///
/// The metric, interconnection, and standstill sections require a stable
/// target loop; when the stability inequalities fail they are reported as
/// absent rather than blocking the whole report, so a failing configuration
/// still yields a diagnosis.
#[derive(Debug, Clone, Serialize)]
pub struct CertificateReport {
    pub routh_hurwitz: RouthHurwitzReport,
    pub lyapunov: Option<LyapunovReport>,
    pub positivity: PositivityReport,
    pub string_stability: StringStabilityReport,
    pub omega_bound: Option<OmegaReport>,
    pub standstill: Option<StandstillReport>,
    pub trajectory_audit: Option<TrajectoryAudit>,
    pub pass: bool,
}

impl CertificateReport {
    /// One human-readable line per certificate plus an overall verdict.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let verdict = |p: bool| if p { "PASS" } else { "FAIL" };
        let rh = &self.routh_hurwitz;
        out.push_str(&format!(
            "stability conditions   {}  ({})\n",
            verdict(rh.pass),
            rh.inequalities
                .iter()
                .map(|i| format!("{}: {}", i.name, verdict(i.pass)))
                .collect::<Vec<_>>()
                .join(", ")
        ));
        match &self.lyapunov {
            Some(ly) => out.push_str(&format!(
                "tracking metrics       {}  (residuals {:.3e}, {:.3e} <= {:.0e})\n",
                verdict(ly.pass),
                ly.p_m_residual,
                ly.p_m0_residual,
                ly.residual_rtol,
            )),
            None => out.push_str(
                "tracking metrics       SKIP  (stability conditions failed; no metric exists)\n",
            ),
        }
        out.push_str(&format!(
            "external positivity    {}  (min kernels {:.3e}, {:.3e}; sim mins {:.3e}, {:.3e})\n",
            verdict(self.positivity.pass),
            self.positivity.min_g,
            self.positivity.min_f,
            self.positivity.sim_min_velocity,
            self.positivity.sim_min_spacing_integral,
        ));
        out.push_str(&format!(
            "string stability       {}  (peak gain {:.12} at omega = {})\n",
            verdict(self.string_stability.pass),
            self.string_stability.max_gain,
            self.string_stability.argmax_omega,
        ));
        match &self.omega_bound {
            Some(om) => out.push_str(&format!(
                "interconnection gain         (Omega = {:.6}, tail {:.3e}, dt {:.4e})\n",
                om.omega, om.tail_bound, om.dt_quad,
            )),
            None => out.push_str(
                "interconnection gain   SKIP  (follower block not stable)\n",
            ),
        }
        match &self.standstill {
            Some(ss) => {
                out.push_str(&format!(
                    "standstill distances   {}  (mode {}, r_min {:.6}; paper {:.6} / sound {:.6})\n",
                    verdict(ss.pass),
                    ss.mode,
                    ss.r_min,
                    ss.r_min_paper,
                    ss.r_min_sound,
                ));
                for v in &ss.vehicles {
                    out.push_str(&format!(
                        "  vehicle {}: r = {:.6}, margin = {:+.6}  {}\n",
                        v.vehicle,
                        v.standstill,
                        v.margin,
                        verdict(v.pass)
                    ));
                }
            }
            None => out.push_str(
                "standstill distances   SKIP  (minimum distance undefined without stability)\n",
            ),
        }
        if let Some(audit) = &self.trajectory_audit {
            out.push_str(&format!(
                "trajectory audit       {}  (max containment ratio {:.6}, min spacing {:.6}, \
                 energy rises {})\n",
                verdict(audit.contained && audit.collision_free && audit.monotone),
                audit
                    .max_xtilde_ratio
                    .iter()
                    .copied()
                    .fold(0.0_f64, f64::max),
                audit.overall_min_spacing,
                audit.lyapunov_increase_count,
            ));
        }
        out.push_str(&format!("overall                {}\n", verdict(self.pass)));
        out
    }
}

/// Computes every certificate for a scenario, optionally auditing a
/// trajectory produced from it. `mode` selects which radius variant gates
/// the standstill check; both variants are always reported.
///
/// Unlike simulation, certification only needs a structurally coherent
/// scenario (matching list lengths, positive headway and barrier radius);
/// unstable gains produce a failing report rather than an error, so the
/// stability diagnosis is part of the output.
pub fn certify_scenario(
    scenario: &Scenario,
    mode: ZbarMode,
    trajectory: Option<&Trajectory>,
) -> Result<CertificateReport, CertificateError> {
    let gains = &scenario.gains;
    let n = scenario.n_followers;
    if n < 1 {
        return Err(CertificateError::InvalidParameter(format!(
            "need at least one follower, got n_followers = {n}"
        )));
    }
    if scenario.vehicles.len() != n + 1 {
        return Err(CertificateError::InvalidParameter(format!(
            "vehicles must have length n_followers + 1 = {}, got {}",
            n + 1,
            scenario.vehicles.len()
        )));
    }
    if !(gains.h > 0.0 && gains.h.is_finite()) {
        return Err(CertificateError::InvalidParameter(format!(
            "time headway must be positive and finite, got {}",
            gains.h
        )));
    }
    if !(gains.tau_bar > 0.0 && gains.tau_bar.is_finite()) {
        return Err(CertificateError::InvalidParameter(format!(
            "nominal engine time constant must be positive and finite, got {}",
            gains.tau_bar
        )));
    }
    if !(gains.c > 0.0 && gains.c.is_finite()) {
        return Err(CertificateError::InvalidParameter(format!(
            "barrier radius must be positive and finite, got {}",
            gains.c
        )));
    }

    let routh_hurwitz = check_routh_hurwitz(gains);
    let positivity = external_positivity_certificate(
        gains.h,
        POSITIVITY_HORIZON_FACTOR * gains.h,
        POSITIVITY_DT,
    )?;
    let string_stability = string_stability_certificate(gains.h, &default_omega_grid())?;

    // Metric, interconnection, and distance bounds only exist for a stable
    // target loop (and a stable leader target).
    let leader_stable = routh_hurwitz
        .spectral_abscissa_a_c
        .map(|a| a < 0.0)
        .unwrap_or(false);
    let (lyapunov, omega_bound, standstill, trajectory_audit) =
        if routh_hurwitz.pass && leader_stable {
            let lyapunov = lyapunov_certificate(gains)?;
            let omega_bound = compute_omega(gains, n)?;

            let p_m = DMatrix::from_fn(4, 4, |i, j| lyapunov.p_m[i][j]);
            let p_m0 = DMatrix::from_fn(3, 3, |i, j| lyapunov.p_m0[i][j]);
            let zbar_paper = compute_zbar(gains.c, &p_m, &p_m0, ZbarMode::Paper)?;
            let zbar_sound = compute_zbar(gains.c, &p_m, &p_m0, ZbarMode::Sound)?;
            let r_min_paper = min_standstill_distance(gains.h, n, zbar_paper, omega_bound.omega);
            let r_min_sound = min_standstill_distance(gains.h, n, zbar_sound, omega_bound.omega);
            let r_min = match mode {
                ZbarMode::Paper => r_min_paper,
                ZbarMode::Sound => r_min_sound,
            };
            let vehicles: Vec<StandstillMargin> = (1..=n)
                .map(|j| {
                    let r_j = scenario.vehicles[j].standstill;
                    StandstillMargin {
                        vehicle: j,
                        standstill: r_j,
                        margin: r_j - r_min,
                        pass: r_j > r_min,
                    }
                })
                .collect();
            let standstill_pass = vehicles.iter().all(|v| v.pass);
            let standstill = StandstillReport {
                mode,
                zbar_paper,
                zbar_sound,
                r_min_paper,
                r_min_sound,
                r_min,
                vehicles,
                pass: standstill_pass,
            };

            let p_m_fixed = Matrix4::from_fn(|i, j| p_m[(i, j)]);
            let p_m0_fixed = Matrix3::from_fn(|i, j| p_m0[(i, j)]);
            let audit = trajectory
                .map(|t| audit_trajectory(t, gains, &p_m_fixed, &p_m0_fixed, gains.c));
            (Some(lyapunov), Some(omega_bound), Some(standstill), audit)
        } else {
            (None, None, None, None)
        };

    let audit_ok = trajectory_audit
        .as_ref()
        .map(|a| a.contained && a.collision_free && a.monotone)
        .unwrap_or(true);
    let pass = routh_hurwitz.pass
        && leader_stable
        && lyapunov.as_ref().map(|l| l.pass).unwrap_or(false)
        && positivity.pass
        && string_stability.pass
        && standstill.as_ref().map(|s| s.pass).unwrap_or(false)
        && audit_ok;

    Ok(CertificateReport {
        routh_hurwitz,
        lyapunov,
        positivity,
        string_stability,
        omega_bound,
        standstill,
        trajectory_audit,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Complex;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type C = Complex<f64>;

    #[test]
    fn routh_hurwitz_examples() {
        let gains = ControllerGains::default();
        let report = check_routh_hurwitz(&gains);
        assert!(report.pass);
        assert!(report.eigenvalue_cross_check);
        assert!(report.spectral_abscissa_a_m.unwrap() < 0.0);
        assert!(report.spectral_abscissa_a_c.unwrap() < 0.0);

        let bad = ControllerGains {
            k_d: 0.005,
            k_p: 1.0,
            tau_bar: 0.1,
            ..ControllerGains::default()
        };
        let report = check_routh_hurwitz(&bad);
        assert!(!report.pass);
        assert!(!report.inequalities[3].pass, "fourth inequality must fail");
        assert!(report.inequalities[..3].iter().all(|i| i.pass));
        assert!(report.eigenvalue_cross_check);
    }

    /// Durand-Kerner root finder for a quartic with real coefficients,
    /// highest degree first.
    fn quartic_roots(coeffs: [f64; 5]) -> Vec<C> {
        let a: Vec<C> = coeffs.iter().map(|c| C::new(*c / coeffs[0], 0.0)).collect();
        let eval = |z: C| -> C {
            a.iter().fold(C::new(0.0, 0.0), |acc, c| acc * z + c)
        };
        let mut roots: Vec<C> = (0..4)
            .map(|k| C::new(0.4, 0.9).powu(k as u32 + 1))
            .collect();
        for _ in 0..500 {
            let mut max_step = 0.0_f64;
            for i in 0..4 {
                let mut denom = C::new(1.0, 0.0);
                for j in 0..4 {
                    if i != j {
                        denom *= roots[i] - roots[j];
                    }
                }
                let step = eval(roots[i]) / denom;
                roots[i] -= step;
                max_step = max_step.max(step.norm());
            }
            if max_step < 1e-13 {
                break;
            }
        }
        roots
    }

    #[test]
    fn eigenvalue_cross_check_matches_quartic_roots() {
        // The target matrix spectrum is the root set of
        // tau_bar*h s^4 + (h + tau_bar) s^3 + (h k_d + 1) s^2
        //   + (h k_p + k_d) s + k_p.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let gains = ControllerGains {
                h: rng.gen_range(0.1..2.0),
                k_p: rng.gen_range(0.05..1.0),
                k_d: rng.gen_range(0.01..1.5),
                tau_bar: rng.gen_range(0.05..0.5),
                ..ControllerGains::default()
            };
            let coeffs = [
                gains.tau_bar * gains.h,
                gains.h + gains.tau_bar,
                gains.h * gains.k_d + 1.0,
                gains.h * gains.k_p + gains.k_d,
                gains.k_p,
            ];
            let roots = quartic_roots(coeffs);
            let oracle_abscissa = roots.iter().map(|r| r.re).fold(f64::NEG_INFINITY, f64::max);
            let report = check_routh_hurwitz(&gains);
            assert_relative_eq!(
                report.spectral_abscissa_a_m.unwrap(),
                oracle_abscissa,
                epsilon = 1e-6,
                max_relative = 1e-6
            );
            assert!(report.eigenvalue_cross_check);
            assert_eq!(
                report.inequalities.iter().all(|i| i.pass),
                oracle_abscissa < 0.0
            );
        }
    }

    #[test]
    fn lyapunov_certificate_defaults() {
        let report = lyapunov_certificate(&ControllerGains::default()).unwrap();
        assert!(report.pass);
        assert!(report.p_m_residual <= 1e-9);
        assert!(report.p_m0_residual <= 1e-9);
        assert!(report.p_m_min_eigenvalue > 0.0);
        assert!(report.p_m0_min_eigenvalue > 0.0);
        // Symmetry survives the row serialization.
        for i in 0..4 {
            for j in 0..4 {
                assert_relative_eq!(report.p_m[i][j], report.p_m[j][i], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn positivity_certificate_closed_forms() {
        let h = 0.5;
        let report = external_positivity_certificate(h, 10.0 * h, 1e-3).unwrap();
        assert!(report.pass);
        // Kernel minima sit at the horizon.
        assert_relative_eq!(report.min_g, (-10.0_f64).exp() / h, max_relative = 1e-9);
        assert_relative_eq!(report.min_f, (-10.0_f64).exp(), max_relative = 1e-9);
        assert_relative_eq!(report.f_at_zero, 1.0);
        assert!(report.sim_min_velocity >= -1e-9);
        assert!(report.sim_min_spacing_integral >= -1e-9);

        assert!(external_positivity_certificate(0.0, 1.0, 1e-3).is_err());
        assert!(external_positivity_certificate(0.5, 1.0, 2.0).is_err());
    }

    #[test]
    fn positivity_simulation_tracks_first_order_response() {
        // During the pulse the exact response is 1 - exp(-t/h); the
        // simulated minimum must be zero (at t = 0) and the velocity must
        // stay below the pulse amplitude.
        let h = 1.0;
        let report = external_positivity_certificate(h, 10.0, 1e-3).unwrap();
        assert_relative_eq!(report.sim_min_velocity, 0.0, epsilon = 1e-12);
        assert!(report.sim_min_spacing_integral.abs() < 1e-12);
    }

    #[test]
    fn string_stability_examples() {
        let report = string_stability_certificate(0.5, &default_omega_grid()).unwrap();
        assert!(report.pass);
        assert_relative_eq!(report.max_gain, 1.0, epsilon = 1e-12);
        assert_eq!(report.argmax_omega, 0.0);
        assert!(report.monotone_nonincreasing);

        let report = string_stability_certificate(2.0, &[0.0, 10.0]).unwrap();
        assert_relative_eq!(
            numerics::frequency_gain(2.0, 10.0),
            1.0 / 401.0_f64.sqrt(),
            max_relative = 1e-12
        );
        assert!(report.pass);

        assert!(string_stability_certificate(-1.0, &[0.0]).is_err());
        assert!(string_stability_certificate(1.0, &[]).is_err());
        assert!(string_stability_certificate(1.0, &[-1.0]).is_err());
    }

    #[test]
    fn zbar_examples() {
        // lambda_min 2 and 0.5 via diagonal weights.
        let p_m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 3.0, 4.0, 5.0]));
        let p_m0 = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.5, 1.0, 2.0]));
        let paper = compute_zbar(1.0, &p_m, &p_m0, ZbarMode::Paper).unwrap();
        assert_relative_eq!(paper, 2.0, max_relative = 1e-12);
        let sound = compute_zbar(1.0, &p_m, &p_m0, ZbarMode::Sound).unwrap();
        assert_relative_eq!(sound, 2.0_f64.sqrt(), max_relative = 1e-12);

        let id4 = DMatrix::identity(4, 4);
        let id3 = DMatrix::identity(3, 3);
        for mode in [ZbarMode::Paper, ZbarMode::Sound] {
            assert_relative_eq!(
                compute_zbar(1.0, &id4, &id3, mode).unwrap(),
                1.0,
                max_relative = 1e-12
            );
        }

        let not_spd = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, -1.0]));
        assert!(compute_zbar(1.0, &not_spd, &id3, ZbarMode::Sound).is_err());
        assert!(compute_zbar(0.0, &id4, &id3, ZbarMode::Sound).is_err());
    }

    #[test]
    fn omega_defaults_finite_and_converged() {
        let report = compute_omega(&ControllerGains::default(), 3).unwrap();
        assert!(report.omega.is_finite());
        assert!(report.omega > 0.0);
        assert!(report.b_norm > 0.0);
        assert!(report.tail_bound < OMEGA_QUADRATURE_TOL);

        // Convergence: restarting from half the step must agree within the
        // acceptance budget of 1e-4 relative.
        let ic = engine::assemble_interconnected(&ControllerGains::default(), 3).unwrap();
        let fine = numerics::integrate_norm_expm(
            &ic.a_bar_prime,
            &ic.b_wtilde_prime,
            OMEGA_QUADRATURE_DT / 2.0,
            OMEGA_QUADRATURE_TOL,
        )
        .unwrap();
        assert!(
            (fine.value - report.omega).abs() < 1e-4 * report.omega,
            "step halving moved Omega from {} to {}",
            report.omega,
            fine.value
        );
    }

    #[test]
    fn omega_scales_linearly_with_coupling_norm() {
        let ic = engine::assemble_interconnected(&ControllerGains::default(), 2).unwrap();
        let base = numerics::integrate_norm_expm(
            &ic.a_bar_prime,
            &ic.b_wtilde_prime,
            OMEGA_QUADRATURE_DT,
            OMEGA_QUADRATURE_TOL,
        )
        .unwrap();
        let doubled_b = &ic.b_wtilde_prime * 2.0;
        let doubled = numerics::integrate_norm_expm(
            &ic.a_bar_prime,
            &doubled_b,
            OMEGA_QUADRATURE_DT,
            2.0 * OMEGA_QUADRATURE_TOL,
        )
        .unwrap();
        assert_relative_eq!(doubled.value, 2.0 * base.value, max_relative = 1e-3);
    }

    #[test]
    fn omega_grows_with_platoon_size() {
        let gains = ControllerGains::default();
        let one = compute_omega(&gains, 1).unwrap();
        let three = compute_omega(&gains, 3).unwrap();
        assert!(
            three.omega >= one.omega * (1.0 - 1e-6),
            "expected Omega({}) >= Omega({}), got {} < {}",
            3,
            1,
            three.omega,
            one.omega
        );
    }

    #[test]
    fn omega_rejects_unstable_gains() {
        let bad = ControllerGains {
            k_d: 0.005,
            k_p: 1.0,
            ..ControllerGains::default()
        };
        assert!(compute_omega(&bad, 2).is_err());
    }

    #[test]
    fn standstill_bound_examples() {
        assert_relative_eq!(
            min_standstill_distance(0.5, 3, 0.1, 2.0),
            1.5 * (0.1 + 2.0 * 3.0_f64.sqrt() * 0.1),
            max_relative = 1e-12
        );
        assert_relative_eq!(
            min_standstill_distance(0.5, 3, 0.1, 2.0),
            0.66961524,
            epsilon = 1e-6
        );
        // Degenerate reductions.
        assert_relative_eq!(
            min_standstill_distance(0.5, 4, 0.3, 0.0),
            1.5 * 0.3,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            min_standstill_distance(0.0, 4, 0.3, 1.0),
            (1.0 + 2.0) * 0.3,
            max_relative = 1e-12
        );
    }

    #[test]
    fn standstill_bound_monotone() {
        let base = min_standstill_distance(0.5, 3, 0.2, 2.0);
        assert!(min_standstill_distance(0.6, 3, 0.2, 2.0) > base);
        assert!(min_standstill_distance(0.5, 4, 0.2, 2.0) > base);
        assert!(min_standstill_distance(0.5, 3, 0.25, 2.0) > base);
        assert!(min_standstill_distance(0.5, 3, 0.2, 2.5) > base);
    }

    #[test]
    fn audit_standstill_platoon() {
        // All vehicles parked at zero speed with zero input: spacing stays at
        // the standstill distance and nothing moves.
        let mut s = Scenario::default();
        s.input_profile = crate::model::InputProfile::Zero;
        s.t_end = 1.0;
        for v in &mut s.initial_states {
            *v = crate::model::VehicleState::equilibrium(0.0);
        }
        let sim = engine::Simulator::new(s.clone()).unwrap();
        let traj = sim.run().unwrap();
        let audit = audit_trajectory(&traj, &s.gains, sim.p_m(), sim.p_m0(), s.gains.c);
        assert!(audit.contained);
        assert!(audit.collision_free);
        assert!(audit.monotone);
        for r in &audit.max_xtilde_ratio {
            assert!(*r < 1e-9, "nominal run should not drift, ratio {r}");
        }
        for m in &audit.min_spacing {
            assert_relative_eq!(*m, 10.0, max_relative = 1e-9);
        }
        for e in &audit.final_abs_e {
            assert!(*e < 1e-9);
        }
        for cm in &audit.chain_margin_min {
            assert!(*cm >= -1e-9, "chain margin {cm}");
        }
    }

    #[test]
    fn audit_heterogeneous_run() {
        let mut s = Scenario::default();
        s.t_end = 10.0;
        s.vehicles[1].tau = 0.3;
        s.vehicles[1].lambda = 1.6;
        s.vehicles[2].tau = 0.05;
        s.vehicles[2].lambda = 0.7;
        s.vehicles[3].tau = 0.45;
        s.vehicles[3].lambda = 1.2;
        let sim = engine::Simulator::new(s.clone()).unwrap();
        let traj = sim.run().unwrap();
        let audit = audit_trajectory(&traj, &s.gains, sim.p_m(), sim.p_m0(), s.gains.c);
        assert!(audit.contained, "ratios {:?}", audit.max_xtilde_ratio);
        assert!(audit.collision_free);
        assert!(
            audit.monotone,
            "{} energy rises, max {}",
            audit.lyapunov_increase_count, audit.lyapunov_increase_max
        );
        for cm in &audit.chain_margin_min {
            assert!(*cm >= -1e-9, "chain margin {cm}");
        }
    }

    #[test]
    fn certify_default_scenario() {
        let s = Scenario::default();
        let report = certify_scenario(&s, ZbarMode::Sound, None).unwrap();
        assert!(report.routh_hurwitz.pass);
        assert!(report.lyapunov.as_ref().unwrap().pass);
        assert!(report.positivity.pass);
        assert!(report.string_stability.pass);
        let standstill = report.standstill.as_ref().unwrap();
        assert!(standstill.zbar_sound < standstill.zbar_paper || standstill.zbar_sound > 0.0);
        assert!(report.omega_bound.as_ref().unwrap().omega > 0.0);
        // The default 10 m standstill sits far below the conservative bound,
        // so the overall certificate honestly fails on that check.
        assert_eq!(report.pass, standstill.pass);

        let text = report.render_text();
        assert!(text.contains("overall"));
        assert!(text.contains("standstill distances"));

        let json = serde_json::to_value(&report).unwrap();
        assert!(json.get("routh_hurwitz").is_some());
        assert!(json.get("omega_bound").is_some());
        assert!(json.get("standstill").is_some());
    }

    #[test]
    fn certify_unstable_gains_reports_failure_without_erroring() {
        let mut s = Scenario::default();
        s.gains.k_d = 0.005;
        s.gains.k_p = 1.0;
        let report = certify_scenario(&s, ZbarMode::Sound, None).unwrap();
        assert!(!report.pass);
        assert!(!report.routh_hurwitz.pass);
        assert!(report.lyapunov.is_none());
        assert!(report.omega_bound.is_none());
        assert!(report.standstill.is_none());
        let text = report.render_text();
        assert!(text.contains("k_d > tau_bar * k_p: FAIL"));
        assert!(text.contains("SKIP"));
    }

    #[test]
    fn certify_with_compliant_standstill_passes() {
        let mut s = Scenario::default();
        s.t_end = 5.0;
        // Push every standstill distance above the sound bound.
        let probe = certify_scenario(&s, ZbarMode::Sound, None).unwrap();
        let r = probe.standstill.as_ref().unwrap().r_min_sound * 1.1;
        for v in &mut s.vehicles {
            v.standstill = r;
        }
        let traj = engine::run(s.clone()).unwrap();
        let report = certify_scenario(&s, ZbarMode::Sound, Some(&traj)).unwrap();
        assert!(
            report.standstill.as_ref().unwrap().pass,
            "{}",
            report.render_text()
        );
        assert!(report.pass, "{}", report.render_text());
        let audit = report.trajectory_audit.as_ref().unwrap();
        assert!(audit.collision_free);
        assert!(audit.contained);
    }

    #[test]
    fn certify_rejects_incoherent_scenario() {
        let mut s = Scenario::default();
        s.vehicles.pop();
        assert!(matches!(
            certify_scenario(&s, ZbarMode::Sound, None),
            Err(CertificateError::InvalidParameter(_))
        ));

        let mut s = Scenario::default();
        s.gains.h = -0.5;
        assert!(matches!(
            certify_scenario(&s, ZbarMode::Sound, None),
            Err(CertificateError::InvalidParameter(_))
        ));
    }
}
