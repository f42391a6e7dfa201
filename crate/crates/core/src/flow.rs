//! Saddle-point vector fields obtained from PID feedback on the multiplier.
//!
//! With `ξ = k_i ∫ h(x) dt` the closed loop becomes
//!
//! ```text
//! M(x) ẋ = −∇f(x) − J_h(x)ᵀ ξ − k_p J_h(x)ᵀ h(x),   M(x) = I + k_d J_hᵀ J_h
//!      ξ̇ = k_i h(x)
//! ```
//!
//! i.e. a Riemannian gradient flow on the augmented Lagrangian
//! `f + ξᵀh + (k_p/2)‖h‖²`. The multiplier itself is never integrated; it is
//! recovered as `λ = ξ + k_p h(x) + k_d J_h(x) ẋ`.

use std::sync::Arc;

use thiserror::Error;

use crate::linalg::{self, Matrix};
use crate::problem::{AffineConstraint, ConstraintMap, Objective, Problem};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("invalid gains: {0}")]
    Gains(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, FlowError>;

/// Proportional, integral and derivative gains on the multiplier.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Gains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

impl Gains {
    /// `ki` must be strictly positive; `kp` and `kd` non-negative.
    pub fn new(kp: f64, ki: f64, kd: f64) -> Result<Self> {
        let g = Self { kp, ki, kd };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ki > 0.0 && self.ki.is_finite()) {
            return Err(FlowError::Gains(format!("ki must be > 0, got {}", self.ki)));
        }
        if !(self.kp >= 0.0 && self.kp.is_finite()) {
            return Err(FlowError::Gains(format!(
                "kp must be >= 0, got {}",
                self.kp
            )));
        }
        if !(self.kd >= 0.0 && self.kd.is_finite()) {
            return Err(FlowError::Gains(format!(
                "kd must be >= 0, got {}",
                self.kd
            )));
        }
        Ok(())
    }

    /// Short file-name friendly tag, e.g. `kp15_ki100_kd4`.
    pub fn label(&self) -> String {
        format!("kp{}_ki{}_kd{}", self.kp, self.ki, self.kd)
    }
}

/// Primal and dual state `z = (x, ξ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaddleState {
    pub x: Vec<f64>,
    pub xi: Vec<f64>,
}

impl SaddleState {
    pub fn new(x: Vec<f64>, xi: Vec<f64>) -> Self {
        Self { x, xi }
    }

    pub fn zeros(n: usize, m: usize) -> Self {
        Self::new(vec![0.0; n], vec![0.0; m])
    }

    pub fn from_stacked(z: &[f64], n: usize) -> Self {
        let (x, xi) = z.split_at(n);
        Self::new(x.to_vec(), xi.to_vec())
    }

    pub fn stacked(&self) -> Vec<f64> {
        let mut z = self.x.clone();
        z.extend_from_slice(&self.xi);
        z
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.x.len(), self.xi.len())
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(&self.xi).all(|v| v.is_finite())
    }
}

/// Per-state quantities reported alongside trajectories.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowDiagnostics {
    /// `‖h(x)‖₂`
    pub constraint_violation: f64,
    pub lagrangian_aug: f64,
    /// Reconstructed multiplier `λ`.
    pub multiplier: Vec<f64>,
}

fn check_dims(problem: &Problem, x: &[f64], dual: &[f64]) -> Result<()> {
    if x.len() != problem.n() || dual.len() != problem.m() {
        return Err(FlowError::Dimension(format!(
            "state ({}, {}) for a problem with n = {}, m = {}",
            x.len(),
            dual.len(),
            problem.n(),
            problem.m()
        )));
    }
    Ok(())
}

/// Constraint value, optionally perturbed: `h(x) + w`.
fn measured_constraint(problem: &Problem, x: &[f64], w: Option<&[f64]>) -> Vec<f64> {
    let mut h = problem.constraint().value(x);
    if let Some(w) = w {
        linalg::axpy(1.0, w, &mut h);
    }
    h
}

/// Open-loop plant `ẋ = −∇f(x) − J_h(x)ᵀλ`.
pub fn open_loop_rhs(problem: &Problem, x: &[f64], lambda: &[f64]) -> Result<Vec<f64>> {
    check_dims(problem, x, lambda)?;
    let mut dx = problem.objective().gradient(x);
    let jac = problem.constraint().jacobian(x);
    linalg::axpy(1.0, &jac.tr_matvec(lambda), &mut dx);
    Ok(linalg::scaled(&dx, -1.0))
}

/// How `M(x)⁻¹g` is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricSolve {
    /// Woodbury when `m <= n/2`, dense Cholesky otherwise.
    Auto,
    /// `g − k_d Jᵀ(I_m + k_d J Jᵀ)⁻¹ J g`
    Woodbury,
    /// Cholesky factorization of the `n×n` metric.
    Dense,
}

/// `M(x) = I + k_d J_h(x)ᵀ J_h(x)`
pub fn metric(jacobian: &Matrix, kd: f64) -> Matrix {
    let n = jacobian.cols();
    Matrix::identity(n).add(&jacobian.gram_cols().scale(kd))
}

fn metric_solve_with_jacobian(jac: &Matrix, kd: f64, g: &[f64], how: MetricSolve) -> Vec<f64> {
    if kd == 0.0 {
        return g.to_vec();
    }
    let (m, n) = jac.shape();
    let how = match how {
        MetricSolve::Auto if 2 * m <= n => MetricSolve::Woodbury,
        MetricSolve::Auto => MetricSolve::Dense,
        other => other,
    };
    match how {
        MetricSolve::Woodbury => {
            let small = Matrix::identity(m).add(&jac.gram_rows().scale(kd));
            let r = linalg::cholesky(&small).expect("I + kd J Jᵀ is positive definite");
            let t = linalg::cholesky_solve(&r, &jac.matvec(g));
            let mut out = g.to_vec();
            linalg::axpy(-kd, &jac.tr_matvec(&t), &mut out);
            out
        }
        _ => {
            let r = linalg::cholesky(&metric(jac, kd)).expect("I + kd JᵀJ is positive definite");
            linalg::cholesky_solve(&r, g)
        }
    }
}

/// `M(x)⁻¹ g` with the default strategy.
pub fn metric_apply_inverse(problem: &Problem, gains: &Gains, x: &[f64], g: &[f64]) -> Vec<f64> {
    metric_apply_inverse_with(problem, gains, x, g, MetricSolve::Auto)
}

pub fn metric_apply_inverse_with(
    problem: &Problem,
    gains: &Gains,
    x: &[f64],
    g: &[f64],
    how: MetricSolve,
) -> Vec<f64> {
    let jac = problem.constraint().jacobian(x);
    metric_solve_with_jacobian(&jac, gains.kd, g, how)
}

/// Value and gradients of `f(x) + ξᵀh(x) + (k_p/2)‖h(x)‖²`.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedLagrangian {
    pub value: f64,
    pub grad_x: Vec<f64>,
    pub grad_xi: Vec<f64>,
}

pub fn augmented_lagrangian(
    problem: &Problem,
    gains: &Gains,
    x: &[f64],
    xi: &[f64],
) -> Result<AugmentedLagrangian> {
    check_dims(problem, x, xi)?;
    Ok(augmented_lagrangian_perturbed(problem, gains, x, xi, None))
}

/// Same as [`augmented_lagrangian`], with `h` replaced by `h + w` in the
/// gradient (the value always uses the true `h`).
fn augmented_lagrangian_perturbed(
    problem: &Problem,
    gains: &Gains,
    x: &[f64],
    xi: &[f64],
    w: Option<&[f64]>,
) -> AugmentedLagrangian {
    let h = problem.constraint().value(x);
    let value =
        problem.objective().value(x) + linalg::dot(xi, &h) + 0.5 * gains.kp * linalg::dot(&h, &h);
    let h_meas = match w {
        Some(w) => linalg::add(&h, w),
        None => h,
    };
    let jac = problem.constraint().jacobian(x);
    let mut coupling = xi.to_vec();
    linalg::axpy(gains.kp, &h_meas, &mut coupling);
    let mut grad_x = problem.objective().gradient(x);
    linalg::axpy(1.0, &jac.tr_matvec(&coupling), &mut grad_x);
    AugmentedLagrangian {
        value,
        grad_x,
        grad_xi: h_meas,
    }
}

/// PID saddle-point flow, `(ẋ, ξ̇) = (−M(x)⁻¹∇ₓL_aug, k_i h(x))`.
pub fn pid_spf_rhs(
    problem: &Problem,
    gains: &Gains,
    state: &SaddleState,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dims(problem, &state.x, &state.xi)?;
    Ok(pid_spf_eval(problem, gains, state, None))
}

fn pid_spf_eval(
    problem: &Problem,
    gains: &Gains,
    state: &SaddleState,
    w: Option<&[f64]>,
) -> (Vec<f64>, Vec<f64>) {
    let lag = augmented_lagrangian_perturbed(problem, gains, &state.x, &state.xi, w);
    let neg = linalg::scaled(&lag.grad_x, -1.0);
    let dx = metric_apply_inverse(problem, gains, &state.x, &neg);
    let dxi = linalg::scaled(&lag.grad_xi, gains.ki);
    (dx, dxi)
}

/// Primal velocity from the metric form: assembles
/// `−∇f − J_hᵀξ − k_p J_hᵀh` term by term and solves against a dense
/// factorization of `M(x)`. Used to cross-check [`pid_spf_rhs`].
pub fn pid_spf_primal_metric_form(
    problem: &Problem,
    gains: &Gains,
    state: &SaddleState,
) -> Result<Vec<f64>> {
    check_dims(problem, &state.x, &state.xi)?;
    let x = &state.x;
    let jac = problem.constraint().jacobian(x);
    let h = problem.constraint().value(x);
    let mut rhs = linalg::scaled(&problem.objective().gradient(x), -1.0);
    linalg::axpy(-1.0, &jac.tr_matvec(&state.xi), &mut rhs);
    linalg::axpy(-gains.kp, &jac.tr_matvec(&h), &mut rhs);
    Ok(metric_solve_with_jacobian(
        &jac,
        gains.kd,
        &rhs,
        MetricSolve::Dense,
    ))
}

/// PI-controlled multiplier dynamics in the original coordinates (no
/// derivative action): `ẋ = −∇f − J_hᵀλ`, `λ̇ = k_i h + k_p J_h ẋ`.
pub fn pi_cmo_rhs(
    problem: &Problem,
    gains: &Gains,
    x: &[f64],
    lambda: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if gains.kd != 0.0 {
        return Err(FlowError::Unsupported(
            "PID-CMO with kd > 0 has second-order coupling; integrate the saddle-point form".into(),
        ));
    }
    let dx = open_loop_rhs(problem, x, lambda)?;
    Ok(pi_cmo_eval(problem, gains, x, dx, None))
}

fn pi_cmo_eval(
    problem: &Problem,
    gains: &Gains,
    x: &[f64],
    dx: Vec<f64>,
    w: Option<&[f64]>,
) -> (Vec<f64>, Vec<f64>) {
    let h = measured_constraint(problem, x, w);
    let jac = problem.constraint().jacobian(x);
    let mut dlambda = linalg::scaled(&h, gains.ki);
    linalg::axpy(gains.kp, &jac.matvec(&dx), &mut dlambda);
    (dx, dlambda)
}

/// `T(x, λ) = (x, λ − k_p h(x))`
pub fn transform_t(gains: &Gains, problem: &Problem, x: &[f64], lambda: &[f64]) -> SaddleState {
    let h = problem.constraint().value(x);
    let mut xi = lambda.to_vec();
    linalg::axpy(-gains.kp, &h, &mut xi);
    SaddleState::new(x.to_vec(), xi)
}

/// `T⁻¹(x, ξ) = (x, ξ + k_p h(x))`
pub fn transform_t_inverse(
    gains: &Gains,
    problem: &Problem,
    state: &SaddleState,
) -> (Vec<f64>, Vec<f64>) {
    let h = problem.constraint().value(&state.x);
    let mut lambda = state.xi.clone();
    linalg::axpy(gains.kp, &h, &mut lambda);
    (state.x.clone(), lambda)
}

/// `λ = ξ + k_p h(x) + k_d J_h(x) ẋ` for the current velocity `dx`.
pub fn reconstruct_multiplier(
    problem: &Problem,
    gains: &Gains,
    state: &SaddleState,
    dx: &[f64],
) -> Vec<f64> {
    let h = problem.constraint().value(&state.x);
    let mut lambda = state.xi.clone();
    linalg::axpy(gains.kp, &h, &mut lambda);
    if gains.kd != 0.0 {
        let jac = problem.constraint().jacobian(&state.x);
        linalg::axpy(gains.kd, &jac.matvec(dx), &mut lambda);
    }
    lambda
}

pub fn diagnostics(
    problem: &Problem,
    gains: &Gains,
    state: &SaddleState,
    dx: &[f64],
) -> FlowDiagnostics {
    let h = problem.constraint().value(&state.x);
    let lag = augmented_lagrangian_perturbed(problem, gains, &state.x, &state.xi, None);
    FlowDiagnostics {
        constraint_violation: linalg::norm2(&h),
        lagrangian_aug: lag.value,
        multiplier: reconstruct_multiplier(problem, gains, state, dx),
    }
}

// ---- vector fields for the integrator ----

/// Autonomous vector field on `(x, dual)` pairs. `perturbation`, when given,
/// is added to every use of the constraint value `h(x)`.
pub trait VectorField: Send + Sync {
    fn dims(&self) -> (usize, usize);

    fn eval(&self, state: &SaddleState, perturbation: Option<&[f64]>) -> (Vec<f64>, Vec<f64>);

    /// Unperturbed `h(x)`.
    fn constraint_value(&self, x: &[f64]) -> Vec<f64>;

    /// Lagrange multiplier estimate carried by `state` with velocity `dx`.
    fn multiplier(&self, state: &SaddleState, dx: &[f64]) -> Vec<f64>;
}

/// Generic PID saddle-point flow over any [`Problem`].
#[derive(Clone, Debug)]
pub struct PidSpf {
    pub problem: Problem,
    pub gains: Gains,
}

impl PidSpf {
    pub fn new(problem: Problem, gains: Gains) -> Result<Self> {
        gains.validate()?;
        Ok(Self { problem, gains })
    }
}

impl VectorField for PidSpf {
    fn dims(&self) -> (usize, usize) {
        (self.problem.n(), self.problem.m())
    }

    fn eval(&self, state: &SaddleState, w: Option<&[f64]>) -> (Vec<f64>, Vec<f64>) {
        pid_spf_eval(&self.problem, &self.gains, state, w)
    }

    fn constraint_value(&self, x: &[f64]) -> Vec<f64> {
        self.problem.constraint().value(x)
    }

    fn multiplier(&self, state: &SaddleState, dx: &[f64]) -> Vec<f64> {
        reconstruct_multiplier(&self.problem, &self.gains, state, dx)
    }
}

/// PID saddle-point flow for `h(x) = Ax − b`, with `(I + k_d AᵀA)⁻¹`
/// computed once.
#[derive(Clone)]
pub struct AffinePidSpf {
    objective: Arc<dyn Objective>,
    constraint: AffineConstraint,
    gains: Gains,
    metric_inverse: Matrix,
}

impl std::fmt::Debug for AffinePidSpf {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AffinePidSpf")
            .field("gains", &self.gains)
            .field("constraint", &self.constraint)
            .finish()
    }
}

impl AffinePidSpf {
    pub fn new(
        objective: Arc<dyn Objective>,
        constraint: AffineConstraint,
        gains: Gains,
    ) -> Result<Self> {
        gains.validate()?;
        if objective.dim() != constraint.a().cols() {
            return Err(FlowError::Dimension(format!(
                "objective dimension {} vs constraint columns {}",
                objective.dim(),
                constraint.a().cols()
            )));
        }
        let metric_inverse = linalg::spd_inverse(&metric(constraint.a(), gains.kd))
            .expect("I + kd AᵀA is positive definite");
        Ok(Self {
            objective,
            constraint,
            gains,
            metric_inverse,
        })
    }

    /// Builds the fast path from a problem whose constraint is affine.
    pub fn from_problem(problem: &Problem, gains: Gains) -> Result<Self> {
        let affine = problem
            .affine()
            .ok_or_else(|| FlowError::Unsupported("constraint is not affine".into()))?
            .clone();
        Self::new(problem_objective(problem), affine, gains)
    }

    pub fn gains(&self) -> &Gains {
        &self.gains
    }

    pub fn constraint(&self) -> &AffineConstraint {
        &self.constraint
    }

    pub fn metric_inverse(&self) -> &Matrix {
        &self.metric_inverse
    }
}

fn problem_objective(problem: &Problem) -> Arc<dyn Objective> {
    struct Borrowed(Problem);
    impl Objective for Borrowed {
        fn dim(&self) -> usize {
            self.0.n()
        }
        fn value(&self, x: &[f64]) -> f64 {
            self.0.objective().value(x)
        }
        fn gradient(&self, x: &[f64]) -> Vec<f64> {
            self.0.objective().gradient(x)
        }
        fn hessian(&self, x: &[f64]) -> Option<Matrix> {
            self.0.objective().hessian(x)
        }
        fn strong_convexity(&self) -> Option<f64> {
            self.0.objective().strong_convexity()
        }
        fn smoothness(&self) -> Option<f64> {
            self.0.objective().smoothness()
        }
    }
    Arc::new(Borrowed(problem.clone()))
}

/// Fast-path evaluation of the affine PID saddle-point flow.
pub fn affine_pid_spf_rhs(field: &AffinePidSpf, state: &SaddleState) -> (Vec<f64>, Vec<f64>) {
    field.eval(state, None)
}

impl VectorField for AffinePidSpf {
    fn dims(&self) -> (usize, usize) {
        (self.constraint.a().cols(), self.constraint.a().rows())
    }

    fn eval(&self, state: &SaddleState, w: Option<&[f64]>) -> (Vec<f64>, Vec<f64>) {
        let a = self.constraint.a();
        let mut h = self.constraint.value(&state.x);
        if let Some(w) = w {
            linalg::axpy(1.0, w, &mut h);
        }
        let mut coupling = state.xi.clone();
        linalg::axpy(self.gains.kp, &h, &mut coupling);
        let mut g = self.objective.gradient(&state.x);
        linalg::axpy(1.0, &a.tr_matvec(&coupling), &mut g);
        let dx = linalg::scaled(&self.metric_inverse.matvec(&g), -1.0);
        let dxi = linalg::scaled(&h, self.gains.ki);
        (dx, dxi)
    }

    fn constraint_value(&self, x: &[f64]) -> Vec<f64> {
        self.constraint.value(x)
    }

    fn multiplier(&self, state: &SaddleState, dx: &[f64]) -> Vec<f64> {
        let mut lambda = state.xi.clone();
        linalg::axpy(self.gains.kp, &self.constraint.value(&state.x), &mut lambda);
        linalg::axpy(self.gains.kd, &self.constraint.a().matvec(dx), &mut lambda);
        lambda
    }
}

/// PI-CMO dynamics as a vector field; the dual slot of the state carries
/// `λ` rather than `ξ`.
#[derive(Clone, Debug)]
pub struct PiCmo {
    pub problem: Problem,
    pub gains: Gains,
}

impl PiCmo {
    pub fn new(problem: Problem, gains: Gains) -> Result<Self> {
        gains.validate()?;
        if gains.kd != 0.0 {
            return Err(FlowError::Unsupported("PI-CMO requires kd = 0".into()));
        }
        Ok(Self { problem, gains })
    }
}

impl VectorField for PiCmo {
    fn dims(&self) -> (usize, usize) {
        (self.problem.n(), self.problem.m())
    }

    fn eval(&self, state: &SaddleState, w: Option<&[f64]>) -> (Vec<f64>, Vec<f64>) {
        let mut dx = self.problem.objective().gradient(&state.x);
        let jac = self.problem.constraint().jacobian(&state.x);
        linalg::axpy(1.0, &jac.tr_matvec(&state.xi), &mut dx);
        let dx = linalg::scaled(&dx, -1.0);
        pi_cmo_eval(&self.problem, &self.gains, &state.x, dx, w)
    }

    fn constraint_value(&self, x: &[f64]) -> Vec<f64> {
        self.problem.constraint().value(x)
    }

    fn multiplier(&self, state: &SaddleState, _dx: &[f64]) -> Vec<f64> {
        state.xi.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{self, generate_qp, kkt_solve, QuadraticObjective};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// f = ½x², h = x − 1
    fn scalar_problem() -> Problem {
        let f = QuadraticObjective::new(Matrix::from_diag(&[0.5])).unwrap();
        let h = AffineConstraint::new(Matrix::from_diag(&[1.0]), vec![1.0]).unwrap();
        Problem::new(Arc::new(f), Arc::new(h)).unwrap()
    }

    /// Nonlinear constraint used to exercise the generic path.
    struct Circle;
    impl ConstraintMap for Circle {
        fn input_dim(&self) -> usize {
            3
        }
        fn output_dim(&self) -> usize {
            1
        }
        fn value(&self, x: &[f64]) -> Vec<f64> {
            vec![x[0] * x[0] + x[1] * x[1] + 0.5 * x[2] - 1.0]
        }
        fn jacobian(&self, x: &[f64]) -> Matrix {
            Matrix::row_vector(&[2.0 * x[0], 2.0 * x[1], 0.5])
        }
    }

    fn circle_problem() -> Problem {
        let f = QuadraticObjective::new(Matrix::from_diag(&[1.0, 2.0, 0.5])).unwrap();
        Problem::new(Arc::new(f), Arc::new(Circle)).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn gains_validation() {
        assert!(Gains::new(0.0, 1.0, 0.0).is_ok());
        assert!(Gains::new(1.0, 0.0, 0.0).is_err());
        assert!(Gains::new(-1.0, 1.0, 0.0).is_err());
        assert!(Gains::new(1.0, 1.0, -0.1).is_err());
        assert!(Gains::new(1.0, f64::NAN, 0.0).is_err());
        assert_eq!(
            Gains::new(15.0, 100.0, 4.0).unwrap().label(),
            "kp15_ki100_kd4"
        );
    }

    #[test]
    fn open_loop_examples() {
        let p = scalar_problem();
        assert_eq!(open_loop_rhs(&p, &[2.0], &[3.0]).unwrap(), vec![-5.0]);
        assert_eq!(open_loop_rhs(&p, &[2.0], &[0.0]).unwrap(), vec![-2.0]);
        assert!(open_loop_rhs(&p, &[2.0, 1.0], &[0.0]).is_err());

        let qp = generate_qp(10, 2, 3.0, 4.0, 3).unwrap();
        let (x, l) = kkt_solve(&qp).unwrap();
        let r = open_loop_rhs(&qp.problem(), &x, &l).unwrap();
        assert!(linalg::norm2(&r) <= 1e-9);
    }

    #[test]
    fn metric_inverse_examples() {
        let p = scalar_problem();
        let g0 = Gains::new(0.0, 1.0, 0.0).unwrap();
        assert_eq!(metric_apply_inverse(&p, &g0, &[0.3], &[10.0]), vec![10.0]);

        let f = QuadraticObjective::new(Matrix::from_diag(&[0.5])).unwrap();
        let h = AffineConstraint::new(Matrix::from_diag(&[2.0]), vec![0.0]).unwrap();
        let p = Problem::new(Arc::new(f), Arc::new(h)).unwrap();
        let g1 = Gains::new(0.0, 1.0, 1.0).unwrap();
        let r = metric_apply_inverse(&p, &g1, &[0.0], &[10.0]);
        assert_abs_diff_eq!(r[0], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn woodbury_matches_direct_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let qp = generate_qp(10, 2, 3.0, 4.0, 8).unwrap();
        let p = qp.problem();
        for kd in [0.5, 4.0, 100.0] {
            let gains = Gains::new(1.0, 1.0, kd).unwrap();
            let x = random_vec(&mut rng, 10);
            let g = random_vec(&mut rng, 10);
            let w = metric_apply_inverse_with(&p, &gains, &x, &g, MetricSolve::Woodbury);
            // independent route: LU on the assembled metric
            let direct = linalg::lu_solve(&metric(qp.a(), kd), &g).unwrap();
            for (a, b) in w.iter().zip(&direct) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-10);
            }
            let m = metric(qp.a(), kd);
            let res = linalg::sub(&m.matvec(&w), &g);
            assert!(linalg::norm2(&res) <= 1e-9 * linalg::norm2(&g).max(1.0));
        }
    }

    #[test]
    fn augmented_lagrangian_examples() {
        let p = circle_problem();
        let g = Gains::new(0.0, 1.0, 0.0).unwrap();
        let x = [0.3, -0.2, 1.1];
        let lag = augmented_lagrangian(&p, &g, &x, &[0.0]).unwrap();
        assert_abs_diff_eq!(lag.value, p.objective().value(&x));

        let feasible = [0.6, 0.8, 0.0];
        let g2 = Gains::new(7.0, 1.0, 0.0).unwrap();
        let lag = augmented_lagrangian(&p, &g2, &feasible, &[3.5]).unwrap();
        assert_abs_diff_eq!(lag.value, p.objective().value(&feasible), epsilon = 1e-14);
    }

    #[test]
    fn augmented_lagrangian_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let qp = generate_qp(10, 2, 3.0, 4.0, 4).unwrap();
        for (p, n, m) in [(circle_problem(), 3, 1), (qp.problem(), 10, 2)] {
            let g = Gains::new(2.5, 1.0, 0.0).unwrap();
            for _ in 0..20 {
                let x = random_vec(&mut rng, n);
                let xi = random_vec(&mut rng, m);
                let lag = augmented_lagrangian(&p, &g, &x, &xi).unwrap();
                let fd = problem::fd_jacobian(
                    |y| vec![augmented_lagrangian(&p, &g, y, &xi).unwrap().value],
                    &x,
                );
                let err = linalg::norm2(&linalg::sub(fd.row(0), &lag.grad_x))
                    / linalg::norm2(&lag.grad_x).max(1.0);
                assert!(err <= 1e-5, "err = {err}");
                assert_eq!(lag.grad_xi, p.constraint().value(&x));
            }
        }
    }

    #[test]
    fn pid_spf_scalar_by_hand() {
        let p = scalar_problem();
        let g = Gains::new(0.0, 1.0, 0.0).unwrap();
        let (dx, dxi) = pid_spf_rhs(&p, &g, &SaddleState::new(vec![0.0], vec![0.0])).unwrap();
        assert_eq!(dx, vec![0.0]);
        assert_eq!(dxi, vec![-1.0]);
    }

    #[test]
    fn pid_spf_vanishes_at_kkt() {
        for seed in 0..5 {
            let qp = generate_qp(10, 2, 3.0, 4.0, seed).unwrap();
            let (x, l) = kkt_solve(&qp).unwrap();
            for kd in [0.0, 4.0, 8.0] {
                let g = Gains::new(15.0, 100.0, kd).unwrap();
                let (dx, dxi) =
                    pid_spf_rhs(&qp.problem(), &g, &SaddleState::new(x.clone(), l.clone()))
                        .unwrap();
                assert!(linalg::norm2(&dx) <= 1e-9);
                assert!(linalg::norm2(&dxi) <= 1e-9);
            }
        }
    }

    #[test]
    fn two_forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in [
            circle_problem(),
            generate_qp(6, 4, 1.0, 2.0, 1).unwrap().problem(),
        ] {
            let (n, m) = (p.n(), p.m());
            for kd in [0.0, 0.7, 12.0] {
                let g = Gains::new(3.0, 5.0, kd).unwrap();
                for _ in 0..10 {
                    let s = SaddleState::new(random_vec(&mut rng, n), random_vec(&mut rng, m));
                    let (dx, _) = pid_spf_rhs(&p, &g, &s).unwrap();
                    let alt = pid_spf_primal_metric_form(&p, &g, &s).unwrap();
                    let scale = linalg::norm2(&dx).max(1.0);
                    assert!(linalg::norm2(&linalg::sub(&dx, &alt)) <= 1e-12 * scale);
                }
            }
        }
    }

    #[test]
    fn affine_fast_path_matches_generic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let qp = generate_qp(10, 2, 3.0, 4.0, 9).unwrap();
        let p = qp.problem();
        for kd in [0.0, 4.0, 8.0] {
            let g = Gains::new(15.0, 100.0, kd).unwrap();
            let fast = AffinePidSpf::from_problem(&p, g).unwrap();
            for _ in 0..20 {
                let s = SaddleState::new(random_vec(&mut rng, 10), random_vec(&mut rng, 2));
                let (dx, dxi) = affine_pid_spf_rhs(&fast, &s);
                let (gx, gxi) = pid_spf_rhs(&p, &g, &s).unwrap();
                let scale = linalg::norm2(&gx).max(1.0);
                assert!(linalg::norm2(&linalg::sub(&dx, &gx)) <= 1e-12 * scale);
                assert!(linalg::norm2(&linalg::sub(&dxi, &gxi)) <= 1e-12 * scale);
            }
        }
        assert!(
            AffinePidSpf::from_problem(&circle_problem(), Gains::new(0.0, 1.0, 0.0).unwrap())
                .is_err()
        );
    }

    #[test]
    fn affine_identity_metric_and_dual() {
        let qp = generate_qp(5, 2, 1.0, 2.0, 2).unwrap();
        let g = Gains::new(2.0, 3.0, 0.0).unwrap();
        let fast = AffinePidSpf::from_problem(&qp.problem(), g).unwrap();
        let s = SaddleState::new(vec![0.1, 0.2, -0.3, 0.4, 0.5], vec![1.0, -1.0]);
        let (dx, dxi) = affine_pid_spf_rhs(&fast, &s);
        let h = qp.constraint.value(&s.x);
        let mut expect = qp.hessian().matvec(&s.x);
        linalg::axpy(1.0, &qp.a().tr_matvec(&s.xi), &mut expect);
        linalg::axpy(2.0, &qp.a().tr_matvec(&h), &mut expect);
        for (a, b) in dx.iter().zip(&expect) {
            assert_abs_diff_eq!(*a, -b, epsilon = 1e-13);
        }
        assert_eq!(dxi, linalg::scaled(&h, 3.0));

        let (x, _) = kkt_solve(&qp).unwrap();
        let (_, dxi) = affine_pid_spf_rhs(&fast, &SaddleState::new(x, vec![0.0, 0.0]));
        assert!(linalg::norm2(&dxi) < 1e-12);
    }

    #[test]
    fn pi_cmo_examples() {
        let p = scalar_problem();
        let g = Gains::new(2.0, 1.0, 0.0).unwrap();
        let (dx, dl) = pi_cmo_rhs(&p, &g, &[1.0], &[0.0]).unwrap();
        assert_eq!(dx, vec![-1.0]);
        assert_eq!(dl, vec![-2.0]);

        // kp = 0 is the Arrow-Hurwicz-Uzawa flow
        let g0 = Gains::new(0.0, 1.5, 0.0).unwrap();
        let (_, dl) = pi_cmo_rhs(&p, &g0, &[3.0], &[0.7]).unwrap();
        assert_eq!(dl, vec![1.5 * 2.0]);

        let qp = generate_qp(10, 2, 3.0, 4.0, 1).unwrap();
        let (x, l) = kkt_solve(&qp).unwrap();
        let (dx, dl) = pi_cmo_rhs(
            &qp.problem(),
            &Gains::new(15.0, 100.0, 0.0).unwrap(),
            &x,
            &l,
        )
        .unwrap();
        assert!(linalg::norm2(&dx) <= 1e-9 && linalg::norm2(&dl) <= 1e-9);

        let gd = Gains::new(1.0, 1.0, 0.5).unwrap();
        assert!(matches!(
            pi_cmo_rhs(&p, &gd, &[1.0], &[0.0]),
            Err(FlowError::Unsupported(_))
        ));
        assert!(PiCmo::new(p, gd).is_err());
    }

    #[test]
    fn transform_examples_and_round_trip() {
        let f = QuadraticObjective::new(Matrix::from_diag(&[1.0])).unwrap();
        let h = AffineConstraint::new(Matrix::from_diag(&[1.0]), vec![0.0]).unwrap();
        let p = Problem::new(Arc::new(f), Arc::new(h)).unwrap();
        let g = Gains::new(2.0, 1.0, 0.0).unwrap();
        let s = transform_t(&g, &p, &[1.0], &[3.0]);
        assert_eq!(s, SaddleState::new(vec![1.0], vec![1.0]));
        assert_eq!(transform_t_inverse(&g, &p, &s), (vec![1.0], vec![3.0]));

        let g0 = Gains::new(0.0, 1.0, 0.0).unwrap();
        assert_eq!(transform_t(&g0, &p, &[5.0], &[-2.0]).xi, vec![-2.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cp = circle_problem();
        let g = Gains::new(15.0, 1.0, 0.0).unwrap();
        for _ in 0..50 {
            let x = random_vec(&mut rng, 3);
            let l = random_vec(&mut rng, 1);
            let (x2, l2) = transform_t_inverse(&g, &cp, &transform_t(&g, &cp, &x, &l));
            assert_eq!(x2, x);
            assert!((l2[0] - l[0]).abs() <= 1e-12);
        }
    }

    #[test]
    fn multiplier_reconstruction() {
        let qp = generate_qp(6, 2, 1.0, 2.0, 3).unwrap();
        let p = qp.problem();
        let (x, l) = kkt_solve(&qp).unwrap();
        let g = Gains::new(4.0, 2.0, 3.0).unwrap();
        let eq = SaddleState::new(x, l.clone());
        let lam = reconstruct_multiplier(&p, &g, &eq, &[0.0; 6]);
        for (a, b) in lam.iter().zip(&l) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }

        let g0 = Gains::new(0.0, 2.0, 0.0).unwrap();
        let s = SaddleState::new(vec![0.3; 6], vec![0.1, -0.2]);
        assert_eq!(reconstruct_multiplier(&p, &g0, &s, &[1.0; 6]), s.xi);

        // With kd = 0, feeding λ back into the plant reproduces ẋ.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cp = circle_problem();
        let g = Gains::new(3.0, 2.0, 0.0).unwrap();
        for _ in 0..20 {
            let s = SaddleState::new(random_vec(&mut rng, 3), random_vec(&mut rng, 1));
            let (dx, _) = pid_spf_rhs(&cp, &g, &s).unwrap();
            let lam = reconstruct_multiplier(&cp, &g, &s, &dx);
            let again = open_loop_rhs(&cp, &s.x, &lam).unwrap();
            assert!(linalg::norm2(&linalg::sub(&again, &dx)) <= 1e-12);
        }

        // With kd > 0: M(x)ẋ = −∇f − J_hᵀ(ξ + k_p h), so the plant driven by
        // λ returns ẋ exactly.
        let g = Gains::new(3.0, 2.0, 1.7).unwrap();
        for _ in 0..20 {
            let s = SaddleState::new(random_vec(&mut rng, 3), random_vec(&mut rng, 1));
            let (dx, _) = pid_spf_rhs(&cp, &g, &s).unwrap();
            let lam = reconstruct_multiplier(&cp, &g, &s, &dx);
            let again = open_loop_rhs(&cp, &s.x, &lam).unwrap();
            assert!(linalg::norm2(&linalg::sub(&again, &dx)) <= 1e-10);
        }
    }

    #[test]
    fn diagnostics_report_violation() {
        let p = scalar_problem();
        let g = Gains::new(1.0, 1.0, 0.0).unwrap();
        let s = SaddleState::new(vec![4.0], vec![0.5]);
        let d = diagnostics(&p, &g, &s, &[0.0]);
        assert_eq!(d.constraint_violation, 3.0);
        assert_abs_diff_eq!(d.lagrangian_aug, 8.0 + 1.5 + 4.5);
        assert_eq!(d.multiplier, vec![3.5]);
    }
}
