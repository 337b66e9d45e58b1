//! Vehicle and controller parameter types, scenario descriptions with their
//! JSON schema, validation, and the system matrices built from them.
//!
//! State convention for followers is `(e, v, a, u_bl)`: spacing error,
//! velocity, acceleration, baseline control. Leaders carry no spacing error
//! and use the reduced triple `(v, a, u_bl)`.

use nalgebra::{DMatrix, Matrix3, Matrix4, Matrix4x2, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::numerics;

/// Default cruise speed used for omitted initial states, m/s.
pub const DEFAULT_CRUISE_SPEED: f64 = 20.0;

/// Longitudinal parameters of a single vehicle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "VehicleParamsFile")]
pub struct VehicleParams {
    /// Drivetrain lag time constant, seconds. Unknown to the controller.
    pub tau: f64,
    /// Control effectiveness multiplier; 1 is nominal.
    pub lambda: f64,
    /// Body length, meters.
    pub length: f64,
    /// Standstill distance added to the headway-based spacing, meters.
    pub standstill: f64,
}

impl VehicleParams {
    /// Effective input gain `lambda / tau` of the drivetrain lag.
    pub fn theta(&self) -> f64 {
        self.lambda / self.tau
    }
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            tau: 0.1,
            lambda: 1.0,
            length: 4.5,
            standstill: 10.0,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct VehicleParamsFile {
    tau: Option<f64>,
    lambda: Option<f64>,
    length: Option<f64>,
    standstill: Option<f64>,
}

impl From<VehicleParamsFile> for VehicleParams {
    fn from(f: VehicleParamsFile) -> Self {
        let d = VehicleParams::default();
        Self {
            tau: f.tau.unwrap_or(d.tau),
            lambda: f.lambda.unwrap_or(d.lambda),
            length: f.length.unwrap_or(d.length),
            standstill: f.standstill.unwrap_or(d.standstill),
        }
    }
}

/// Diagonal matrix `s * I` in the nested-array form the gain fields use.
pub fn scaled_identity<const N: usize>(s: f64) -> [[f64; N]; N] {
    let mut m = [[0.0; N]; N];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = s;
    }
    m
}

/// Shared controller design: spacing policy, baseline gains, reference lag,
/// barrier radius, adaptation gains, and the leader reference pole placement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "GainsFile")]
pub struct ControllerGains {
    /// Time headway of the constant time headway spacing policy, seconds.
    pub h: f64,
    /// Proportional spacing-error gain of the baseline controller.
    pub k_p: f64,
    /// Derivative spacing-error gain of the baseline controller.
    pub k_d: f64,
    /// Nominal drivetrain lag used by the reference model, seconds.
    pub tau_bar: f64,
    /// Barrier radius: tracking errors are confined to weighted norm below c.
    pub c: f64,
    /// Adaptation gain for the follower update law, SPD 4x4.
    pub gamma_follower: [[f64; 4]; 4],
    /// Adaptation gain for the leader state-feedback update law, SPD 3x3.
    pub gamma_leader_x: [[f64; 3]; 3],
    /// Adaptation gain for the leader tracking-error update law, SPD 3x3.
    pub gamma_leader_xt: [[f64; 3]; 3],
    /// Right-hand side of the follower Lyapunov equation, SPD 4x4.
    pub q_m: [[f64; 4]; 4],
    /// Right-hand side of the leader Lyapunov equation, SPD 3x3.
    pub q_c: [[f64; 3]; 3],
    /// Velocity coefficient of the leader reference acceleration row; < 0.
    pub a_c_v: f64,
    /// Acceleration coefficient of the leader reference acceleration row; < 0.
    pub a_c_a: f64,
    /// Baseline-control coefficient of the leader reference acceleration row.
    pub a_c_u: f64,
}

impl Default for ControllerGains {
    fn default() -> Self {
        Self {
            h: 0.5,
            k_p: 0.2,
            k_d: 0.7,
            tau_bar: 0.1,
            c: 1.0,
            gamma_follower: scaled_identity(10.0),
            gamma_leader_x: scaled_identity(10.0),
            gamma_leader_xt: scaled_identity(10.0),
            q_m: scaled_identity(1.0),
            q_c: scaled_identity(1.0),
            a_c_v: -1.0,
            a_c_a: -2.0,
            a_c_u: 0.0,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GainsFile {
    h: Option<f64>,
    k_p: Option<f64>,
    k_d: Option<f64>,
    tau_bar: Option<f64>,
    c: Option<f64>,
    gamma_follower: Option<[[f64; 4]; 4]>,
    gamma_leader_x: Option<[[f64; 3]; 3]>,
    gamma_leader_xt: Option<[[f64; 3]; 3]>,
    q_m: Option<[[f64; 4]; 4]>,
    q_c: Option<[[f64; 3]; 3]>,
    a_c_v: Option<f64>,
    a_c_a: Option<f64>,
    a_c_u: Option<f64>,
}

impl From<GainsFile> for ControllerGains {
    fn from(f: GainsFile) -> Self {
        let d = ControllerGains::default();
        Self {
            h: f.h.unwrap_or(d.h),
            k_p: f.k_p.unwrap_or(d.k_p),
            k_d: f.k_d.unwrap_or(d.k_d),
            tau_bar: f.tau_bar.unwrap_or(d.tau_bar),
            c: f.c.unwrap_or(d.c),
            gamma_follower: f.gamma_follower.unwrap_or(d.gamma_follower),
            gamma_leader_x: f.gamma_leader_x.unwrap_or(d.gamma_leader_x),
            gamma_leader_xt: f.gamma_leader_xt.unwrap_or(d.gamma_leader_xt),
            q_m: f.q_m.unwrap_or(d.q_m),
            q_c: f.q_c.unwrap_or(d.q_c),
            a_c_v: f.a_c_v.unwrap_or(d.a_c_v),
            a_c_a: f.a_c_a.unwrap_or(d.a_c_a),
            a_c_u: f.a_c_u.unwrap_or(d.a_c_u),
        }
    }
}

fn mat4(a: &[[f64; 4]; 4]) -> Matrix4<f64> {
    Matrix4::from_fn(|i, j| a[i][j])
}

fn mat3(a: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| a[i][j])
}

impl ControllerGains {
    /// Follower reference matrix: baseline closed loop with the nominal lag.
    pub fn a_m(&self) -> Matrix4<f64> {
        let (h, k_p, k_d, tb) = (self.h, self.k_p, self.k_d, self.tau_bar);
        Matrix4::new(
            0.0,       -1.0,      -h,        0.0,
            0.0,       0.0,       1.0,       0.0,
            0.0,       0.0,       -1.0 / tb, 1.0 / tb,
            k_p / h,   -k_d / h,  -k_d,      -1.0 / h,
        )
    }

    /// Coupling of a follower to its predecessor's `(v, u_bl)`.
    pub fn b_w(&self) -> Matrix4x2<f64> {
        Matrix4x2::new(
            1.0,            0.0,
            0.0,            0.0,
            0.0,            0.0,
            self.k_d / self.h, 1.0 / self.h,
        )
    }

    /// Leader reference matrix in the full 4-state view; first row is zero so
    /// the fictitious spacing error stays identically zero.
    pub fn a_m0_full(&self) -> Matrix4<f64> {
        let tb = self.tau_bar;
        Matrix4::new(
            0.0, 0.0, 0.0,       0.0,
            0.0, 0.0, 1.0,       0.0,
            0.0, 0.0, -1.0 / tb, 1.0 / tb,
            0.0, 0.0, 0.0,       -1.0 / self.h,
        )
    }

    /// Leader reference matrix on the reduced `(v, a, u_bl)` coordinates.
    pub fn a_m0_reduced(&self) -> Matrix3<f64> {
        let tb = self.tau_bar;
        Matrix3::new(
            0.0, 1.0,       0.0,
            0.0, -1.0 / tb, 1.0 / tb,
            0.0, 0.0,       -1.0 / self.h,
        )
    }

    /// External input vector of the leader in the full 4-state view.
    pub fn b_r_full(&self) -> Vector4<f64> {
        Vector4::new(0.0, 0.0, 0.0, 1.0 / self.h)
    }

    /// External input vector of the leader on reduced coordinates.
    pub fn b_r_reduced(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, 1.0 / self.h)
    }

    /// Exponentially stable leader target dynamics used by the adaptive
    /// leader; Hurwitz exactly when `a_c_v < 0` and `a_c_a < 0`.
    pub fn a_c(&self) -> Matrix3<f64> {
        Matrix3::new(
            0.0,        1.0,        0.0,
            self.a_c_v, self.a_c_a, self.a_c_u,
            0.0,        0.0,        -1.0 / self.h,
        )
    }

    pub fn gamma_follower_matrix(&self) -> Matrix4<f64> {
        mat4(&self.gamma_follower)
    }

    pub fn gamma_leader_x_matrix(&self) -> Matrix3<f64> {
        mat3(&self.gamma_leader_x)
    }

    pub fn gamma_leader_xt_matrix(&self) -> Matrix3<f64> {
        mat3(&self.gamma_leader_xt)
    }

    pub fn q_m_matrix(&self) -> Matrix4<f64> {
        mat4(&self.q_m)
    }

    pub fn q_c_matrix(&self) -> Matrix3<f64> {
        mat3(&self.q_c)
    }
}

/// Adaptive input direction for followers: the control enters through the
/// acceleration row.
pub fn b_u() -> Vector4<f64> {
    Vector4::new(0.0, 0.0, 1.0, 0.0)
}

/// Adaptive input direction for the leader on reduced coordinates.
pub fn b_u_reduced() -> Vector3<f64> {
    Vector3::new(0.0, 1.0, 0.0)
}

/// Open-loop matrix of an actual follower: like the reference but with the
/// vehicle's own lag and effectiveness in the acceleration row.
pub fn a_p_follower(params: &VehicleParams, gains: &ControllerGains) -> Matrix4<f64> {
    let mut a = gains.a_m();
    a[(2, 2)] = -1.0 / params.tau;
    a[(2, 3)] = params.lambda / params.tau;
    a
}

/// Open-loop matrix of the actual leader on reduced coordinates.
pub fn a_p_leader_reduced(params: &VehicleParams, gains: &ControllerGains) -> Matrix3<f64> {
    Matrix3::new(
        0.0, 1.0,               0.0,
        0.0, -1.0 / params.tau, params.lambda / params.tau,
        0.0, 0.0,               -1.0 / gains.h,
    )
}

/// State of one vehicle. Serialized as the 4-array `[e, v, a, u_bl]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct VehicleState {
    pub e: f64,
    pub v: f64,
    pub a: f64,
    pub u_bl: f64,
}

impl From<[f64; 4]> for VehicleState {
    fn from(x: [f64; 4]) -> Self {
        Self {
            e: x[0],
            v: x[1],
            a: x[2],
            u_bl: x[3],
        }
    }
}

impl From<VehicleState> for [f64; 4] {
    fn from(s: VehicleState) -> Self {
        [s.e, s.v, s.a, s.u_bl]
    }
}

impl VehicleState {
    pub fn as_vector(&self) -> Vector4<f64> {
        Vector4::new(self.e, self.v, self.a, self.u_bl)
    }

    pub fn from_vector(x: &Vector4<f64>) -> Self {
        Self {
            e: x[0],
            v: x[1],
            a: x[2],
            u_bl: x[3],
        }
    }

    /// Reduced leader coordinates `(v, a, u_bl)`.
    pub fn reduced(&self) -> Vector3<f64> {
        Vector3::new(self.v, self.a, self.u_bl)
    }

    /// Lifts reduced leader coordinates back to the 4-state view with `e = 0`.
    pub fn from_reduced(x: &Vector3<f64>) -> Self {
        Self {
            e: 0.0,
            v: x[0],
            a: x[1],
            u_bl: x[2],
        }
    }

    /// Steady cruise at velocity `v`: zero spacing error, zero acceleration,
    /// zero baseline control.
    pub fn equilibrium(v: f64) -> Self {
        Self {
            e: 0.0,
            v,
            a: 0.0,
            u_bl: 0.0,
        }
    }

    /// Signals a follower reads from its predecessor: `(v, u_bl)`.
    pub fn coupling(&self) -> Vector2<f64> {
        Vector2::new(self.v, self.u_bl)
    }

    pub fn is_finite(&self) -> bool {
        self.e.is_finite() && self.v.is_finite() && self.a.is_finite() && self.u_bl.is_finite()
    }
}

/// Exogenous acceleration command fed to the platoon leader. All families
/// eventually return to zero except a piecewise profile ending off zero,
/// which validation flags with a warning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputProfile {
    Zero,
    /// `amplitude` on `[t_start, t_stop)`, zero elsewhere.
    Step {
        amplitude: f64,
        t_start: f64,
        t_stop: f64,
    },
    /// `amplitude` on `[t_start, t_start + duration)`, zero elsewhere.
    Pulse {
        amplitude: f64,
        t_start: f64,
        duration: f64,
    },
    /// Linear interpolation through `(t, u)` points, clamped outside.
    PiecewiseLinear { points: Vec<(f64, f64)> },
}

impl InputProfile {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            InputProfile::Zero => 0.0,
            InputProfile::Step {
                amplitude,
                t_start,
                t_stop,
            } => {
                if t >= *t_start && t < *t_stop {
                    *amplitude
                } else {
                    0.0
                }
            }
            InputProfile::Pulse {
                amplitude,
                t_start,
                duration,
            } => {
                if t >= *t_start && t < *t_start + *duration {
                    *amplitude
                } else {
                    0.0
                }
            }
            InputProfile::PiecewiseLinear { points } => {
                if points.is_empty() {
                    return 0.0;
                }
                if t <= points[0].0 {
                    return points[0].1;
                }
                let last = points[points.len() - 1];
                if t >= last.0 {
                    return last.1;
                }
                for w in points.windows(2) {
                    let (t0, u0) = w[0];
                    let (t1, u1) = w[1];
                    if t >= t0 && t < t1 {
                        let frac = (t - t0) / (t1 - t0);
                        return u0 + frac * (u1 - u0);
                    }
                }
                last.1
            }
        }
    }

    /// Value approached from the left, `lim_{s -> t^-} eval(s)`. Differs
    /// from [`InputProfile::eval`] only at the jump instants of the
    /// piecewise-constant profiles.
    pub fn eval_left_limit(&self, t: f64) -> f64 {
        match self {
            InputProfile::Step {
                amplitude,
                t_start,
                t_stop,
            } => {
                if t > *t_start && t <= *t_stop {
                    *amplitude
                } else {
                    0.0
                }
            }
            InputProfile::Pulse {
                amplitude,
                t_start,
                duration,
            } => {
                if t > *t_start && t <= *t_start + *duration {
                    *amplitude
                } else {
                    0.0
                }
            }
            InputProfile::Zero | InputProfile::PiecewiseLinear { .. } => self.eval(t),
        }
    }

    /// Value the profile holds as `t -> inf`.
    pub fn final_value(&self) -> f64 {
        match self {
            InputProfile::Zero | InputProfile::Step { .. } | InputProfile::Pulse { .. } => 0.0,
            InputProfile::PiecewiseLinear { points } => {
                points.last().map(|p| p.1).unwrap_or(0.0)
            }
        }
    }

    fn params_finite(&self) -> bool {
        match self {
            InputProfile::Zero => true,
            InputProfile::Step {
                amplitude,
                t_start,
                t_stop,
            } => amplitude.is_finite() && t_start.is_finite() && t_stop.is_finite(),
            InputProfile::Pulse {
                amplitude,
                t_start,
                duration,
            } => amplitude.is_finite() && t_start.is_finite() && duration.is_finite(),
            InputProfile::PiecewiseLinear { points } => {
                points.iter().all(|(t, u)| t.is_finite() && u.is_finite())
            }
        }
    }
}

impl Default for InputProfile {
    fn default() -> Self {
        InputProfile::Step {
            amplitude: 1.0,
            t_start: 1.0,
            t_stop: 6.0,
        }
    }
}

/// Complete simulation description. Index 0 is the leader throughout.
///
/// `initial_states` seed the actual platoon; the reference and virtual layers
/// start from the same values unless `vp_initial_states` overrides them,
/// which is an in-memory facility only and never part of the file schema.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(from = "ScenarioFile")]
pub struct Scenario {
    pub n_followers: usize,
    pub vehicles: Vec<VehicleParams>,
    pub gains: ControllerGains,
    pub initial_states: Vec<VehicleState>,
    pub input_profile: InputProfile,
    pub t_end: f64,
    pub dt: f64,
    #[serde(skip)]
    pub vp_initial_states: Option<Vec<VehicleState>>,
}

impl Default for Scenario {
    fn default() -> Self {
        let n = 3;
        Self {
            n_followers: n,
            vehicles: vec![VehicleParams::default(); n + 1],
            gains: ControllerGains::default(),
            initial_states: vec![VehicleState::equilibrium(DEFAULT_CRUISE_SPEED); n + 1],
            input_profile: InputProfile::default(),
            t_end: 60.0,
            dt: 1e-3,
            vp_initial_states: None,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    n_followers: Option<usize>,
    vehicles: Option<Vec<VehicleParams>>,
    gains: Option<ControllerGains>,
    initial_states: Option<Vec<VehicleState>>,
    input_profile: Option<InputProfile>,
    t_end: Option<f64>,
    dt: Option<f64>,
}

impl From<ScenarioFile> for Scenario {
    fn from(f: ScenarioFile) -> Self {
        let d = Scenario::default();
        let n_followers = f
            .n_followers
            .or_else(|| f.vehicles.as_ref().map(|v| v.len().saturating_sub(1)))
            .or_else(|| f.initial_states.as_ref().map(|v| v.len().saturating_sub(1)))
            .unwrap_or(d.n_followers);
        let vehicles = f
            .vehicles
            .unwrap_or_else(|| vec![VehicleParams::default(); n_followers + 1]);
        let initial_states = f.initial_states.unwrap_or_else(|| {
            vec![VehicleState::equilibrium(DEFAULT_CRUISE_SPEED); n_followers + 1]
        });
        Self {
            n_followers,
            vehicles,
            gains: f.gains.unwrap_or(d.gains),
            initial_states,
            input_profile: f.input_profile.unwrap_or(d.input_profile),
            t_end: f.t_end.unwrap_or(d.t_end),
            dt: f.dt.unwrap_or(d.dt),
            vp_initial_states: None,
        }
    }
}

impl Scenario {
    /// Initial states of the virtual layer: the override when present,
    /// otherwise the actual initial states.
    pub fn vp_initials(&self) -> &[VehicleState] {
        self.vp_initial_states
            .as_deref()
            .unwrap_or(&self.initial_states)
    }

    /// Number of integration steps implied by `t_end` and `dt`.
    pub fn n_steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }
}

/// Inter-vehicle distance reconstructed from a follower state: spacing error
/// plus standstill distance plus headway times velocity.
pub fn spacing_from_state(state: &VehicleState, params: &VehicleParams, gains: &ControllerGains) -> f64 {
    state.e + params.standstill + gains.h * state.v
}

fn spd_violation(name: &str, m: DMatrix<f64>, out: &mut Vec<String>) {
    if !numerics::is_spd(&m) {
        out.push(format!("{name} must be symmetric positive definite"));
    }
}

/// Checks every structural invariant of the scenario. An empty result means
/// the scenario is well formed; each entry names the failed condition.
pub fn validate_scenario(s: &Scenario) -> Vec<String> {
    let mut v = Vec::new();
    let n = s.n_followers;
    if n < 1 {
        v.push(format!("n_followers >= 1 fails: got {n}"));
    }
    if s.vehicles.len() != n + 1 {
        v.push(format!(
            "vehicles must have length n_followers + 1 = {}, got {}",
            n + 1,
            s.vehicles.len()
        ));
    }
    if s.initial_states.len() != n + 1 {
        v.push(format!(
            "initial_states must have length n_followers + 1 = {}, got {}",
            n + 1,
            s.initial_states.len()
        ));
    }
    if let Some(vp) = &s.vp_initial_states {
        if vp.len() != n + 1 {
            v.push(format!(
                "vp_initial_states must have length n_followers + 1 = {}, got {}",
                n + 1,
                vp.len()
            ));
        }
    }

    for (j, p) in s.vehicles.iter().enumerate() {
        for (name, value) in [
            ("tau", p.tau),
            ("lambda", p.lambda),
            ("length", p.length),
            ("standstill", p.standstill),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                v.push(format!("vehicle {j}: {name} > 0 fails: got {value}"));
            }
        }
    }

    let g = &s.gains;
    for (name, value) in [
        ("h", g.h),
        ("k_p", g.k_p),
        ("k_d", g.k_d),
        ("tau_bar", g.tau_bar),
        ("c", g.c),
    ] {
        if !(value > 0.0 && value.is_finite()) {
            v.push(format!("gains: {name} > 0 fails: got {value}"));
        }
    }
    if g.k_d <= g.tau_bar * g.k_p {
        v.push(format!(
            "gains: k_d > tau_bar * k_p fails: k_d = {}, tau_bar * k_p = {}",
            g.k_d,
            g.tau_bar * g.k_p
        ));
    }
    if !(g.a_c_v < 0.0 && g.a_c_v.is_finite()) {
        v.push(format!("gains: a_c_v < 0 fails: got {}", g.a_c_v));
    }
    if !(g.a_c_a < 0.0 && g.a_c_a.is_finite()) {
        v.push(format!("gains: a_c_a < 0 fails: got {}", g.a_c_a));
    }
    if !g.a_c_u.is_finite() {
        v.push(format!("gains: a_c_u must be finite: got {}", g.a_c_u));
    }
    spd_violation(
        "gains: gamma_follower",
        DMatrix::from_fn(4, 4, |i, j| g.gamma_follower[i][j]),
        &mut v,
    );
    spd_violation(
        "gains: gamma_leader_x",
        DMatrix::from_fn(3, 3, |i, j| g.gamma_leader_x[i][j]),
        &mut v,
    );
    spd_violation(
        "gains: gamma_leader_xt",
        DMatrix::from_fn(3, 3, |i, j| g.gamma_leader_xt[i][j]),
        &mut v,
    );
    spd_violation("gains: q_m", DMatrix::from_fn(4, 4, |i, j| g.q_m[i][j]), &mut v);
    spd_violation("gains: q_c", DMatrix::from_fn(3, 3, |i, j| g.q_c[i][j]), &mut v);

    for (j, st) in s.initial_states.iter().enumerate() {
        if !st.is_finite() {
            v.push(format!("initial state {j} must be finite"));
        }
    }
    if let Some(leader) = s.initial_states.first() {
        if leader.e != 0.0 {
            v.push(format!(
                "leader initial e must be exactly 0, got {}",
                leader.e
            ));
        }
    }
    if let Some(vp) = &s.vp_initial_states {
        for (j, st) in vp.iter().enumerate() {
            if !st.is_finite() {
                v.push(format!("vp initial state {j} must be finite"));
            }
        }
        if let Some(leader) = vp.first() {
            if leader.e != 0.0 {
                v.push(format!(
                    "vp leader initial e must be exactly 0, got {}",
                    leader.e
                ));
            }
        }
    }

    // Nonnegative starting velocities and pseudo-spacings on the virtual
    // layer; the collision-avoidance argument needs both.
    let vp = s.vp_initials();
    for (j, st) in vp.iter().enumerate().take(n + 1) {
        if st.v < 0.0 {
            v.push(format!(
                "virtual layer initial velocity must be nonnegative: vehicle {j} has v = {}",
                st.v
            ));
        }
        if j >= 1 {
            let pseudo = st.e + g.h * st.v;
            if pseudo < 0.0 {
                v.push(format!(
                    "virtual layer initial pseudo-spacing e + h*v must be nonnegative: \
                     vehicle {j} has {pseudo}"
                ));
            }
        }
    }

    if !(s.dt > 0.0 && s.dt.is_finite()) {
        v.push(format!("dt > 0 fails: got {}", s.dt));
    }
    if !(s.t_end >= 0.0 && s.t_end.is_finite()) {
        v.push(format!("t_end >= 0 fails: got {}", s.t_end));
    }

    if !s.input_profile.params_finite() {
        v.push("input profile parameters must be finite".into());
    }
    if let InputProfile::PiecewiseLinear { points } = &s.input_profile {
        if points.windows(2).any(|w| w[1].0 <= w[0].0) {
            v.push("piecewise-linear input times must be strictly increasing".into());
        }
    }

    // A virtual-layer override must start inside the barrier set; containment
    // at t = 0 is a standing hypothesis of the tracking guarantee.
    if s.vp_initial_states.is_some() && v.is_empty() {
        if let (Ok(p_m), Ok(p_m0)) = (
            numerics::solve_lyapunov(
                &DMatrix::from_fn(4, 4, |i, j| g.a_m()[(i, j)]),
                &DMatrix::from_fn(4, 4, |i, j| g.q_m[i][j]),
            ),
            numerics::solve_lyapunov(
                &DMatrix::from_fn(3, 3, |i, j| g.a_c()[(i, j)]),
                &DMatrix::from_fn(3, 3, |i, j| g.q_c[i][j]),
            ),
        ) {
            for j in 0..=n.min(s.initial_states.len().saturating_sub(1)) {
                let ap = &s.initial_states[j];
                let rp = &vp[j];
                let norm = if j == 0 {
                    let d = ap.reduced() - rp.reduced();
                    let dd = DMatrix::from_fn(3, 1, |i, _| d[i]);
                    (dd.transpose() * &p_m0 * &dd)[(0, 0)].sqrt()
                } else {
                    let d = ap.as_vector() - rp.as_vector();
                    let dd = DMatrix::from_fn(4, 1, |i, _| d[i]);
                    (dd.transpose() * &p_m * &dd)[(0, 0)].sqrt()
                };
                if norm >= g.c {
                    v.push(format!(
                        "initial tracking offset of vehicle {j} has weighted norm {norm} >= c = {}",
                        g.c
                    ));
                }
            }
        }
    }

    v
}

/// Conditions that do not invalidate a scenario but deserve attention:
/// nonpositive initial actual spacings and input profiles that never return
/// to zero.
pub fn scenario_warnings(s: &Scenario) -> Vec<String> {
    let mut w = Vec::new();
    for j in 1..s.initial_states.len().min(s.vehicles.len()) {
        let spacing = spacing_from_state(&s.initial_states[j], &s.vehicles[j], &s.gains);
        if spacing <= 0.0 {
            w.push(format!(
                "initial spacing of vehicle {j} is nonpositive ({spacing:.6}); \
                 the run starts collided"
            ));
        }
    }
    if s.input_profile.final_value() != 0.0 {
        w.push(format!(
            "input profile does not settle to zero (final value {}); \
             convergence guarantees assume a vanishing input",
            s.input_profile.final_value()
        ));
    }
    w
}
