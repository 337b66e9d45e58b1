//! Dense numerical kernels: Lyapunov equations, matrix exponentials, fixed-step
//! integration, operator norms, and the closed-form cascade responses.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Relative residual bound enforced by [`solve_lyapunov`].
pub const LYAPUNOV_RESIDUAL_RTOL: f64 = 1e-9;

const MAX_QUADRATURE_REFINEMENTS: u32 = 20;
const MAX_QUADRATURE_STEPS: usize = 20_000_000;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: {context}")]
    DimensionMismatch { context: String },
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("matrix is not Hurwitz (spectral abscissa {abscissa:.6e})")]
    NotHurwitz { abscissa: f64 },
    #[error("matrix is not symmetric positive definite: {reason}")]
    NotSymmetricPositiveDefinite { reason: String },
    #[error("Lyapunov residual {residual:.3e} exceeds tolerance {tolerance:.3e}")]
    LyapunovResidual { residual: f64, tolerance: f64 },
    #[error("linear solve failed: system is numerically singular")]
    SingularSystem,
    #[error("quadrature did not settle within {max_refinements} step halvings")]
    QuadratureDiverged { max_refinements: u32 },
    #[error("quadrature horizon exceeded {max_steps} steps before the tail resolved")]
    HorizonExceeded { max_steps: usize },
}

/// Runge-Kutta step failure. `E` is the error type of the derivative closure.
#[derive(Debug, Error)]
pub enum Rk4Error<E: std::fmt::Debug + std::fmt::Display> {
    #[error("derivative evaluation failed: {0}")]
    Derivative(E),
    #[error("non-finite derivative at component {index} (t = {t})")]
    NonFinite { index: usize, t: f64 },
}

fn ensure_square(a: &DMatrix<f64>) -> Result<(), NumericsError> {
    if a.nrows() != a.ncols() {
        return Err(NumericsError::NotSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    Ok(())
}

fn ensure_finite(a: &DMatrix<f64>) -> Result<(), NumericsError> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(NumericsError::NonFinite)
    }
}

/// Largest real part over the eigenvalues of `a`.
pub fn spectral_abscissa(a: &DMatrix<f64>) -> f64 {
    a.clone()
        .complex_eigenvalues()
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// True when every eigenvalue of `a` has strictly negative real part.
pub fn is_hurwitz(a: &DMatrix<f64>) -> bool {
    a.nrows() == a.ncols() && spectral_abscissa(a) < 0.0
}

/// Frobenius norm of `M - M^T`, zero for symmetric matrices.
pub fn symmetry_defect(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).norm()
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Symmetric positive definite up to a small symmetry defect.
pub fn is_spd(m: &DMatrix<f64>) -> bool {
    if m.nrows() != m.ncols() || m.is_empty() {
        return false;
    }
    let scale = m.norm().max(1.0);
    symmetry_defect(m) <= 1e-10 * scale && min_symmetric_eigenvalue(m) > 0.0
}

/// Solves `A^T P + P A = -Q` for Hurwitz `A` and SPD `Q` by Kronecker
/// vectorization: `(I (x) A^T + A^T (x) I) vec(P) = -vec(Q)`, dense LU.
///
/// The returned `P` is symmetrized and satisfies
/// `||A^T P + P A + Q||_F <= 1e-9 ||Q||_F`; it is SPD for any valid input.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>, NumericsError> {
    ensure_square(a)?;
    ensure_square(q)?;
    ensure_finite(a)?;
    ensure_finite(q)?;
    let n = a.nrows();
    if q.nrows() != n {
        return Err(NumericsError::DimensionMismatch {
            context: format!("A is {n}x{n} but Q is {}x{}", q.nrows(), q.ncols()),
        });
    }
    let abscissa = spectral_abscissa(a);
    if abscissa >= 0.0 {
        return Err(NumericsError::NotHurwitz { abscissa });
    }
    if !is_spd(q) {
        return Err(NumericsError::NotSymmetricPositiveDefinite {
            reason: "Q must be SPD".into(),
        });
    }

    let at = a.transpose();
    let eye = DMatrix::<f64>::identity(n, n);
    let kron = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = DVector::from_column_slice(q.as_slice()) * -1.0;
    let sol = kron.lu().solve(&rhs).ok_or(NumericsError::SingularSystem)?;
    let p = DMatrix::from_column_slice(n, n, sol.as_slice());
    let p = (&p + p.transpose()) * 0.5;

    let residual = (a.transpose() * &p + &p * a + q).norm();
    let tolerance = LYAPUNOV_RESIDUAL_RTOL * q.norm();
    if residual > tolerance {
        return Err(NumericsError::LyapunovResidual {
            residual,
            tolerance,
        });
    }
    if min_symmetric_eigenvalue(&p) <= 0.0 {
        return Err(NumericsError::NotSymmetricPositiveDefinite {
            reason: "computed P is not positive definite".into(),
        });
    }
    Ok(p)
}

fn l1_norm(a: &DMatrix<f64>) -> f64 {
    (0..a.ncols())
        .map(|j| a.column(j).iter().map(|x| x.abs()).sum())
        .fold(0.0_f64, f64::max)
}

// Pade numerator coefficients for the scaling-and-squaring ladder, with the
// L1-norm thresholds from Higham's 2005 analysis.
const THETA_3: f64 = 1.495585217958292e-2;
const THETA_5: f64 = 2.539398330063230e-1;
const THETA_7: f64 = 9.504178996162932e-1;
const THETA_9: f64 = 2.097847961257068;
const THETA_13: f64 = 5.371920351148152;

type UV = (DMatrix<f64>, DMatrix<f64>);

fn pade3(a: &DMatrix<f64>) -> UV {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    let u = a * (&a2 + &eye * 60.0);
    let v = &a2 * 12.0 + &eye * 120.0;
    (u, v)
}

fn pade5(a: &DMatrix<f64>) -> UV {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let u = a * (&a4 + &a2 * 420.0 + &eye * 15120.0);
    let v = &a4 * 30.0 + &a2 * 3360.0 + &eye * 30240.0;
    (u, v)
}

fn pade7(a: &DMatrix<f64>) -> UV {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let u = a * (&a6 + &a4 * 1512.0 + &a2 * 277_200.0 + &eye * 8_648_640.0);
    let v = &a6 * 56.0 + &a4 * 25_200.0 + &a2 * 1_995_840.0 + &eye * 17_297_280.0;
    (u, v)
}

fn pade9(a: &DMatrix<f64>) -> UV {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let a8 = &a4 * &a4;
    let u = a * (&a8 + &a6 * 3960.0 + &a4 * 2_162_160.0 + &a2 * 302_702_400.0
        + &eye * 8_821_612_800.0);
    let v = &a8 * 90.0 + &a6 * 110_880.0 + &a4 * 30_270_240.0 + &a2 * 2_075_673_600.0
        + &eye * 17_643_225_600.0;
    (u, v)
}

fn pade13(a: &DMatrix<f64>) -> UV {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let u_inner = &a6 * (&a6 + &a4 * 16_380.0 + &a2 * 40_840_800.0)
        + &a6 * 33_522_128_640.0
        + &a4 * 10_559_470_521_600.0
        + &a2 * 1_187_353_796_428_800.0
        + &eye * 32_382_376_266_240_000.0;
    let u = a * u_inner;
    let v = &a6 * (&a6 * 182.0 + &a4 * 960_960.0 + &a2 * 1_323_241_920.0)
        + &a6 * 670_442_572_800.0
        + &a4 * 129_060_195_264_000.0
        + &a2 * 7_771_770_303_897_600.0
        + &eye * 64_764_752_532_480_000.0;
    (u, v)
}

fn expm_dense(a: &DMatrix<f64>) -> Result<DMatrix<f64>, NumericsError> {
    let norm = l1_norm(a);
    let mut squarings = 0u32;
    let (u, v) = if norm <= THETA_3 {
        pade3(a)
    } else if norm <= THETA_5 {
        pade5(a)
    } else if norm <= THETA_7 {
        pade7(a)
    } else if norm <= THETA_9 {
        pade9(a)
    } else {
        squarings = (norm / THETA_13).log2().ceil().max(0.0) as u32;
        let scaled = a.map(|x| x / 2f64.powi(squarings as i32));
        pade13(&scaled)
    };
    let mut r = (&v - &u)
        .lu()
        .solve(&(&v + &u))
        .ok_or(NumericsError::SingularSystem)?;
    for _ in 0..squarings {
        r = &r * &r;
    }
    Ok(r)
}

/// Computes `exp(A t)` by scaling and squaring with Pade approximants.
/// `exp(0) = I` holds exactly.
pub fn matrix_exponential(a: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>, NumericsError> {
    ensure_square(a)?;
    ensure_finite(a)?;
    if !t.is_finite() {
        return Err(NumericsError::NonFinite);
    }
    expm_dense(&(a * t))
}

/// One classical fourth-order Runge-Kutta step of size `dt` from `(t, x)`.
///
/// The derivative closure writes `dx/dt` into its output slice. Every stage is
/// checked for non-finite components so blowups are reported at the offending
/// index instead of propagating NaNs.
pub fn rk4_step<F, E>(mut f: F, x: &[f64], t: f64, dt: f64) -> Result<Vec<f64>, Rk4Error<E>>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), E>,
    E: std::fmt::Debug + std::fmt::Display,
{
    let n = x.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut stage = vec![0.0; n];

    let check = |k: &[f64], t: f64| -> Result<(), Rk4Error<E>> {
        match k.iter().position(|x| !x.is_finite()) {
            Some(index) => Err(Rk4Error::NonFinite { index, t }),
            None => Ok(()),
        }
    };

    f(t, x, &mut k1).map_err(Rk4Error::Derivative)?;
    check(&k1, t)?;
    for i in 0..n {
        stage[i] = x[i] + 0.5 * dt * k1[i];
    }
    f(t + 0.5 * dt, &stage, &mut k2).map_err(Rk4Error::Derivative)?;
    check(&k2, t + 0.5 * dt)?;
    for i in 0..n {
        stage[i] = x[i] + 0.5 * dt * k2[i];
    }
    f(t + 0.5 * dt, &stage, &mut k3).map_err(Rk4Error::Derivative)?;
    check(&k3, t + 0.5 * dt)?;
    for i in 0..n {
        stage[i] = x[i] + dt * k3[i];
    }
    f(t + dt, &stage, &mut k4).map_err(Rk4Error::Derivative)?;
    check(&k4, t + dt)?;

    let mut next = vec![0.0; n];
    for i in 0..n {
        next[i] = x[i] + dt * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) / 6.0;
    }
    Ok(next)
}

/// Largest singular value of `m`.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values()
        .iter()
        .copied()
        .fold(0.0_f64, f64::max)
}

/// Result of [`integrate_norm_expm`] with its quadrature diagnostics.
#[derive(Debug, Clone)]
pub struct QuadratureResult {
    /// Converged value of `int_0^inf ||exp(A s)|| ds * ||B||`.
    pub value: f64,
    /// Final trapezoid step after refinement.
    pub dt: f64,
    /// Truncation horizon of the finite part.
    pub t_max: f64,
    /// Envelope constant of the tail bound `||exp(A s)|| <= kappa exp(-beta s)`.
    pub kappa: f64,
    /// Tail decay rate, 0.9 times the stability margin of `A`.
    pub beta: f64,
    /// Number of step halvings performed.
    pub refinements: u32,
    /// Tail estimate added beyond `t_max` (already included in `value`).
    pub tail_bound: f64,
}

fn quadrature_pass(
    a: &DMatrix<f64>,
    dt: f64,
    beta: f64,
    b_norm: f64,
    tail_tol: f64,
) -> Result<(f64, f64, f64, f64), NumericsError> {
    let n = a.nrows();
    let step = matrix_exponential(a, dt)?;
    let mut m = DMatrix::<f64>::identity(n, n);
    let mut phi_prev = 1.0;
    let mut integral = 0.0;
    let mut kappa = 1.0_f64;
    let mut t = 0.0;
    let min_t = 10.0 / beta;
    for _ in 0..MAX_QUADRATURE_STEPS {
        m = &m * &step;
        t += dt;
        let phi = spectral_norm(&m);
        integral += 0.5 * (phi_prev + phi) * dt;
        phi_prev = phi;
        kappa = kappa.max(phi * (beta * t).exp());
        let tail = b_norm * kappa * (-beta * t).exp() / beta;
        if t >= min_t && tail < 0.5 * tail_tol {
            return Ok((integral, kappa, t, tail));
        }
    }
    Err(NumericsError::HorizonExceeded {
        max_steps: MAX_QUADRATURE_STEPS,
    })
}

/// Evaluates `int_0^inf ||exp(A s)|| ds * ||B||` in the spectral norm for
/// Hurwitz `A`: composite trapezoid on `[0, t_max]` plus an exponential tail
/// bound, with the step halved until successive estimates differ by less than
/// `tail_tol`.
pub fn integrate_norm_expm(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    dt_quad: f64,
    tail_tol: f64,
) -> Result<QuadratureResult, NumericsError> {
    ensure_square(a)?;
    ensure_finite(a)?;
    ensure_finite(b)?;
    if b.nrows() != a.nrows() {
        return Err(NumericsError::DimensionMismatch {
            context: format!(
                "A is {}x{} but B has {} rows",
                a.nrows(),
                a.ncols(),
                b.nrows()
            ),
        });
    }
    if !(dt_quad > 0.0 && dt_quad.is_finite() && tail_tol > 0.0 && tail_tol.is_finite()) {
        return Err(NumericsError::NonFinite);
    }
    let abscissa = spectral_abscissa(a);
    if abscissa >= 0.0 {
        return Err(NumericsError::NotHurwitz { abscissa });
    }
    let beta = 0.9 * (-abscissa);
    let b_norm = spectral_norm(b);

    let mut dt = dt_quad;
    let mut prev: Option<f64> = None;
    for refinements in 0..=MAX_QUADRATURE_REFINEMENTS {
        let (integral, kappa, t_max, tail) = quadrature_pass(a, dt, beta, b_norm, tail_tol)?;
        let value = integral * b_norm + tail;
        if let Some(p) = prev {
            if (value - p).abs() < tail_tol {
                return Ok(QuadratureResult {
                    value,
                    dt,
                    t_max,
                    kappa,
                    beta,
                    refinements,
                    tail_bound: tail,
                });
            }
        }
        prev = Some(value);
        dt *= 0.5;
    }
    Err(NumericsError::QuadratureDiverged {
        max_refinements: MAX_QUADRATURE_REFINEMENTS,
    })
}

/// Velocity-to-velocity cascade gain `1 / sqrt(h^2 w^2 + 1)`.
pub fn frequency_gain(h: f64, omega: f64) -> f64 {
    assert!(h > 0.0, "time headway must be positive");
    1.0 / (h * h * omega * omega + 1.0).sqrt()
}

/// Impulse responses of the velocity cascade and of the spacing response:
/// `g(t) = exp(-t/h)/h` and `f(t) = exp(-t/h)`.
pub fn impulse_responses(h: f64, t: f64) -> (f64, f64) {
    assert!(h > 0.0, "time headway must be positive");
    assert!(t >= 0.0, "impulse responses are defined for t >= 0");
    let decay = (-t / h).exp();
    (decay / h, decay)
}
