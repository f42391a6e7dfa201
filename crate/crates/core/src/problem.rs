//! Equality-constrained problem instances: `min f(x) s.t. h(x) = 0`.
//!
//! A [`Problem`] pairs an [`Objective`] oracle with a [`ConstraintMap`]
//! oracle. Concrete instances are the random quadratic programs
//! ([`QpInstance`]) and the bilevel problem rewritten through the follower's
//! first-order condition ([`BilevelInstance`]).

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix, SpectralBounds};
use crate::rng::{self, Purpose};

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("KKT system is singular: {0}")]
    Rank(LinalgError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("instance document: {0}")]
    Document(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ProblemError>;

/// Differentiable objective oracle.
pub trait Objective: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;

    fn hessian(&self, _x: &[f64]) -> Option<Matrix> {
        None
    }

    /// Declared strong-convexity modulus, if known.
    fn strong_convexity(&self) -> Option<f64> {
        None
    }

    /// Declared Lipschitz constant of the gradient, if known.
    fn smoothness(&self) -> Option<f64> {
        None
    }
}

/// Differentiable constraint map `h: R^n -> R^m`.
pub trait ConstraintMap: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> Vec<f64>;
    fn jacobian(&self, x: &[f64]) -> Matrix;

    fn as_affine(&self) -> Option<&AffineConstraint> {
        None
    }
}

/// `f(x) = xᵀQx` with symmetric `Q`.
#[derive(Clone, Debug)]
pub struct QuadraticObjective {
    q: Matrix,
    rho: Option<f64>,
    lsmooth: Option<f64>,
}

impl QuadraticObjective {
    pub fn new(q: Matrix) -> Result<Self> {
        if !q.is_square() {
            return Err(ProblemError::Dimension("Q must be square".into()));
        }
        if q.asymmetry() > 1e-10 * q.max_abs().max(1.0) {
            return Err(ProblemError::Model("Q must be symmetric".into()));
        }
        Ok(Self {
            q: q.symmetrize(),
            rho: None,
            lsmooth: None,
        })
    }

    pub fn with_constants(mut self, rho: f64, lsmooth: f64) -> Self {
        self.rho = Some(rho);
        self.lsmooth = Some(lsmooth);
        self
    }

    pub fn q(&self) -> &Matrix {
        &self.q
    }
}

impl Objective for QuadraticObjective {
    fn dim(&self) -> usize {
        self.q.rows()
    }

    fn value(&self, x: &[f64]) -> f64 {
        linalg::dot(x, &self.q.matvec(x))
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        linalg::scaled(&self.q.matvec(x), 2.0)
    }

    fn hessian(&self, _x: &[f64]) -> Option<Matrix> {
        Some(self.q.scale(2.0))
    }

    fn strong_convexity(&self) -> Option<f64> {
        self.rho
    }

    fn smoothness(&self) -> Option<f64> {
        self.lsmooth
    }
}

/// `h(x) = Ax - b` with `A` of full row rank.
#[derive(Clone, Debug)]
pub struct AffineConstraint {
    a: Matrix,
    b: Vec<f64>,
    gram: SpectralBounds,
}

impl AffineConstraint {
    pub fn new(a: Matrix, b: Vec<f64>) -> Result<Self> {
        if a.rows() != b.len() {
            return Err(ProblemError::Dimension(format!(
                "A has {} rows but b has {} entries",
                a.rows(),
                b.len()
            )));
        }
        if a.rows() == 0 {
            return Err(ProblemError::Dimension(
                "at least one constraint is required".into(),
            ));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite.into());
        }
        let gram = linalg::spectral_bounds_gram(&a)?;
        Ok(Self { a, b, gram })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    /// Extreme eigenvalues of `AAᵀ`.
    pub fn gram_bounds(&self) -> SpectralBounds {
        self.gram
    }
}

impl ConstraintMap for AffineConstraint {
    fn input_dim(&self) -> usize {
        self.a.cols()
    }

    fn output_dim(&self) -> usize {
        self.a.rows()
    }

    fn value(&self, x: &[f64]) -> Vec<f64> {
        linalg::sub(&self.a.matvec(x), &self.b)
    }

    fn jacobian(&self, _x: &[f64]) -> Matrix {
        self.a.clone()
    }

    fn as_affine(&self) -> Option<&AffineConstraint> {
        Some(self)
    }
}

/// Objective and constraint oracles sharing one decision variable.
#[derive(Clone)]
pub struct Problem {
    objective: Arc<dyn Objective>,
    constraint: Arc<dyn ConstraintMap>,
}

impl std::fmt::Debug for Problem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Problem")
            .field("n", &self.n())
            .field("m", &self.m())
            .field("affine", &self.constraint.as_affine().is_some())
            .finish()
    }
}

impl Problem {
    pub fn new(objective: Arc<dyn Objective>, constraint: Arc<dyn ConstraintMap>) -> Result<Self> {
        let n = objective.dim();
        if constraint.input_dim() != n {
            return Err(ProblemError::Dimension(format!(
                "objective has dimension {n}, constraint expects {}",
                constraint.input_dim()
            )));
        }
        let m = constraint.output_dim();
        if m == 0 {
            return Err(ProblemError::Dimension(
                "unconstrained problems are not supported".into(),
            ));
        }
        if m > n {
            return Err(ProblemError::Dimension(format!(
                "{m} constraints on {n} variables"
            )));
        }
        Ok(Self {
            objective,
            constraint,
        })
    }

    pub fn n(&self) -> usize {
        self.objective.dim()
    }

    pub fn m(&self) -> usize {
        self.constraint.output_dim()
    }

    pub fn objective(&self) -> &dyn Objective {
        self.objective.as_ref()
    }

    pub fn constraint(&self) -> &dyn ConstraintMap {
        self.constraint.as_ref()
    }

    pub fn affine(&self) -> Option<&AffineConstraint> {
        self.constraint.as_affine()
    }
}

// ---- random quadratic programs ----

/// `min xᵀQx s.t. Ax = b` with `ρI ⪯ 2Q ⪯ LI`.
#[derive(Clone, Debug)]
pub struct QpInstance {
    pub q: Matrix,
    pub constraint: AffineConstraint,
    pub rho: f64,
    pub lsmooth: f64,
}

impl QpInstance {
    pub fn new(q: Matrix, constraint: AffineConstraint, rho: f64, lsmooth: f64) -> Result<Self> {
        if q.rows() != constraint.input_dim() {
            return Err(ProblemError::Dimension(format!(
                "Q is {}x{} but A has {} columns",
                q.rows(),
                q.cols(),
                constraint.input_dim()
            )));
        }
        if !(rho > 0.0 && rho <= lsmooth && lsmooth.is_finite()) {
            return Err(ProblemError::Parameter(format!(
                "need 0 < rho <= L, got rho = {rho}, L = {lsmooth}"
            )));
        }
        QuadraticObjective::new(q.clone())?;
        Ok(Self {
            q: q.symmetrize(),
            constraint,
            rho,
            lsmooth,
        })
    }

    pub fn n(&self) -> usize {
        self.q.rows()
    }

    pub fn m(&self) -> usize {
        self.constraint.output_dim()
    }

    pub fn a(&self) -> &Matrix {
        self.constraint.a()
    }

    pub fn b(&self) -> &[f64] {
        self.constraint.b()
    }

    pub fn hessian(&self) -> Matrix {
        self.q.scale(2.0)
    }

    pub fn objective(&self) -> QuadraticObjective {
        QuadraticObjective {
            q: self.q.clone(),
            rho: Some(self.rho),
            lsmooth: Some(self.lsmooth),
        }
    }

    pub fn problem(&self) -> Problem {
        Problem::new(
            Arc::new(self.objective()),
            Arc::new(self.constraint.clone()),
        )
        .expect("QpInstance dimensions are validated at construction")
    }
}

/// Random QP with Hessian spectrum in `[rho, lsmooth]` (both extremes
/// attained) and a full-row-rank `A` normalized so that `λ_max(AAᵀ) = 1`.
pub fn generate_qp(n: usize, m: usize, rho: f64, lsmooth: f64, seed: u64) -> Result<QpInstance> {
    generate_qp_indexed(n, m, rho, lsmooth, seed, 0)
}

/// `index`-th instance of the family keyed by `seed`.
pub fn generate_qp_indexed(
    n: usize,
    m: usize,
    rho: f64,
    lsmooth: f64,
    seed: u64,
    index: u64,
) -> Result<QpInstance> {
    if m == 0 || m > n {
        return Err(ProblemError::Dimension(format!(
            "need 1 <= m <= n, got n = {n}, m = {m}"
        )));
    }
    if !(rho > 0.0 && rho <= lsmooth && lsmooth.is_finite()) {
        return Err(ProblemError::Parameter(format!(
            "need 0 < rho <= L, got rho = {rho}, L = {lsmooth}"
        )));
    }
    if n == 1 && rho != lsmooth {
        return Err(ProblemError::Parameter(
            "a one-dimensional Hessian cannot attain both rho and L".into(),
        ));
    }
    let mut rng = rng::stream(seed, Purpose::Instance, index);
    let gaussian = |r: usize, c: usize, rng: &mut rng::StreamRng| {
        let data = (0..r * c)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Matrix::from_row_major(r, c, data).expect("gaussian entries are finite")
    };

    let v = loop {
        if let Ok(v) = linalg::orthonormalize_columns(&gaussian(n, n, &mut rng)) {
            break v;
        }
    };
    let mut eigs = vec![rho; n];
    eigs[n - 1] = lsmooth;
    for e in eigs.iter_mut().take(n - 1).skip(1) {
        *e = rng.random_range(rho..=lsmooth);
    }
    let q = v
        .matmul(&Matrix::from_diag(&eigs))
        .matmul(&v.transpose())
        .scale(0.5)
        .symmetrize();

    let a = loop {
        let g = gaussian(m, n, &mut rng);
        let Ok(bounds) = linalg::spectral_bounds_gram(&g) else {
            continue;
        };
        let a = g.scale(1.0 / bounds.upper.sqrt());
        if bounds.lower / bounds.upper > 1e-6 {
            break a;
        }
    };
    let b: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
    QpInstance::new(q, AffineConstraint::new(a, b)?, rho, lsmooth)
}

/// Solves `[2Q Aᵀ; A 0]·(x, λ) = (0, b)`.
pub fn kkt_solve(qp: &QpInstance) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, m) = (qp.n(), qp.m());
    let a = qp.a();
    let k = Matrix::block2x2(&qp.hessian(), &a.transpose(), a, &Matrix::zeros(m, m));
    let mut rhs = vec![0.0; n];
    rhs.extend_from_slice(qp.b());
    let sol = linalg::lu_solve(&k, &rhs).map_err(ProblemError::Rank)?;
    let (x, lambda) = sol.split_at(n);
    Ok((x.to_vec(), lambda.to_vec()))
}

// ---- bilevel problem ----

/// Leader-follower problem
/// `min_x f(x, y*(x))`, `y*(x) = argmin_y ½yᵀQy + (Ax + b)ᵀy`, with
/// `f(x, y) = logsumexp(x) + w·‖Cx − y‖²`.
#[derive(Clone, Debug)]
pub struct BilevelInstance {
    pub q_low: Matrix,
    pub a_low: Matrix,
    pub b_low: Vec<f64>,
    pub c: Matrix,
    /// Weight `w` on the consistency term.
    pub upper_weight: f64,
    /// Bound on the follower's optimality-condition error.
    pub noise_bound: f64,
}

impl BilevelInstance {
    pub fn new(
        q_low: Matrix,
        a_low: Matrix,
        b_low: Vec<f64>,
        c: Matrix,
        upper_weight: f64,
        noise_bound: f64,
    ) -> Result<Self> {
        let m = q_low.rows();
        let n = a_low.cols();
        if !q_low.is_square() || a_low.rows() != m || b_low.len() != m {
            return Err(ProblemError::Dimension(
                "lower-level blocks do not conform".into(),
            ));
        }
        if c.shape() != (m, n) {
            return Err(ProblemError::Dimension(format!(
                "C must be {m}x{n}, got {}x{}",
                c.rows(),
                c.cols()
            )));
        }
        if upper_weight < 0.0 || !upper_weight.is_finite() {
            return Err(ProblemError::Parameter(format!(
                "upper weight {upper_weight}"
            )));
        }
        if noise_bound < 0.0 || !noise_bound.is_finite() {
            return Err(ProblemError::Parameter(format!(
                "noise bound {noise_bound}"
            )));
        }
        if linalg::cholesky(&q_low.symmetrize()).is_err()
            || q_low.asymmetry() > 1e-10 * q_low.max_abs().max(1.0)
        {
            return Err(ProblemError::Model(
                "lower-level Q must be symmetric positive definite".into(),
            ));
        }
        Ok(Self {
            q_low,
            a_low,
            b_low,
            c,
            upper_weight,
            noise_bound,
        })
    }

    /// Scalar instance used by the bilevel experiment: `Q = 2`, `A = 1`,
    /// `b = 0`, `C = 10`, `w = 0.01`, `W = 0.5`.
    pub fn scalar_default() -> Self {
        Self::new(
            Matrix::from_diag(&[2.0]),
            Matrix::from_diag(&[1.0]),
            vec![0.0],
            Matrix::from_diag(&[10.0]),
            0.01,
            0.5,
        )
        .expect("default bilevel instance is valid")
    }

    pub fn n(&self) -> usize {
        self.a_low.cols()
    }

    pub fn m(&self) -> usize {
        self.q_low.rows()
    }

    /// Follower's exact response `y = −Q⁻¹(Ax + b)`.
    pub fn lower_level_solution(&self, x: &[f64]) -> Result<Vec<f64>> {
        let r = linalg::cholesky(&self.q_low)?;
        let rhs = linalg::add(&self.a_low.matvec(x), &self.b_low);
        Ok(linalg::scaled(&linalg::cholesky_solve(&r, &rhs), -1.0))
    }

    pub fn problem(&self) -> Result<Problem> {
        let (objective, constraint) = bilevel_reformulate(self)?;
        Problem::new(Arc::new(objective), Arc::new(constraint))
    }
}

/// Upper-level objective over the stacked variable `z = (x, y)`.
#[derive(Clone, Debug)]
pub struct BilevelObjective {
    n: usize,
    c: Matrix,
    weight: f64,
}

impl BilevelObjective {
    fn split<'a>(&self, z: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        z.split_at(self.n)
    }

    /// `Cx − y`
    fn residual(&self, z: &[f64]) -> Vec<f64> {
        let (x, y) = self.split(z);
        linalg::sub(&self.c.matvec(x), y)
    }
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let mx = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    mx + x.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let mx = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl Objective for BilevelObjective {
    fn dim(&self) -> usize {
        self.n + self.c.rows()
    }

    fn value(&self, z: &[f64]) -> f64 {
        let (x, _) = self.split(z);
        let r = self.residual(z);
        log_sum_exp(x) + self.weight * linalg::dot(&r, &r)
    }

    fn gradient(&self, z: &[f64]) -> Vec<f64> {
        let (x, _) = self.split(z);
        let r = self.residual(z);
        let mut g = softmax(x);
        linalg::axpy(2.0 * self.weight, &self.c.tr_matvec(&r), &mut g);
        g.extend(r.iter().map(|ri| -2.0 * self.weight * ri));
        g
    }

    fn hessian(&self, z: &[f64]) -> Option<Matrix> {
        let (x, _) = self.split(z);
        let (n, m) = (self.n, self.c.rows());
        let s = softmax(x);
        let mut hxx = self.c.gram_cols().scale(2.0 * self.weight);
        for i in 0..n {
            hxx[(i, i)] += s[i];
            for j in 0..n {
                hxx[(i, j)] -= s[i] * s[j];
            }
        }
        let hxy = self.c.transpose().scale(-2.0 * self.weight);
        let hyy = Matrix::identity(m).scale(2.0 * self.weight);
        Some(Matrix::block2x2(&hxx, &hxy, &hxy.transpose(), &hyy))
    }
}

/// Replaces the follower's argmin by `∇_y g(x, y) = Ax + Qy + b = 0`,
/// giving an affine constraint `[A Q]·(x, y) − (−b)` on the stacked variable.
pub fn bilevel_reformulate(inst: &BilevelInstance) -> Result<(BilevelObjective, AffineConstraint)> {
    if linalg::cholesky(&inst.q_low).is_err() {
        return Err(ProblemError::Model(
            "lower level is not strongly convex (Q is not positive definite)".into(),
        ));
    }
    let objective = BilevelObjective {
        n: inst.n(),
        c: inst.c.clone(),
        weight: inst.upper_weight,
    };
    let a = Matrix::hstack(&inst.a_low, &inst.q_low);
    let b = linalg::scaled(&inst.b_low, -1.0);
    Ok((objective, AffineConstraint::new(a, b)?))
}

/// Draws `w` uniformly from the Euclidean ball of radius `bound` in `R^dim`.
pub fn sample_noise<R: Rng + ?Sized>(bound: f64, dim: usize, rng: &mut R) -> Vec<f64> {
    if bound == 0.0 || dim == 0 {
        return vec![0.0; dim];
    }
    let dir = loop {
        let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let nrm = linalg::norm2(&g);
        if nrm > 1e-12 {
            break linalg::scaled(&g, 1.0 / nrm);
        }
    };
    let u: f64 = rng.random();
    let radius = bound * u.powf(1.0 / dim as f64);
    // guard the rare round-off overshoot
    let w = linalg::scaled(&dir, radius);
    let nrm = linalg::norm2(&w);
    if nrm > bound {
        linalg::scaled(&w, bound / nrm)
    } else {
        w
    }
}

// ---- finite-difference consistency checks ----

fn fd_step(v: f64) -> f64 {
    1e-6 * v.abs().max(1.0)
}

/// Relative error `‖g − g_fd‖ / max(1, ‖g‖)` of the gradient oracle against
/// central differences of the value oracle.
pub fn gradient_fd_error(obj: &dyn Objective, x: &[f64]) -> f64 {
    let g = obj.gradient(x);
    let mut fd = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let h = fd_step(x[i]);
        xp[i] = x[i] + h;
        let fp = obj.value(&xp);
        xp[i] = x[i] - h;
        let fm = obj.value(&xp);
        xp[i] = x[i];
        fd[i] = (fp - fm) / (2.0 * h);
    }
    linalg::norm2(&linalg::sub(&g, &fd)) / linalg::norm2(&g).max(1.0)
}

/// Relative error of a Jacobian oracle against central differences.
pub fn jacobian_fd_error(value: impl Fn(&[f64]) -> Vec<f64>, jacobian: &Matrix, x: &[f64]) -> f64 {
    let fd = fd_jacobian(value, x);
    fd.sub(jacobian).frobenius() / jacobian.frobenius().max(1.0)
}

/// Central-difference Jacobian of a vector map.
pub fn fd_jacobian(value: impl Fn(&[f64]) -> Vec<f64>, x: &[f64]) -> Matrix {
    let m = value(x).len();
    let mut jac = Matrix::zeros(m, x.len());
    let mut xp = x.to_vec();
    for j in 0..x.len() {
        let h = fd_step(x[j]);
        xp[j] = x[j] + h;
        let fp = value(&xp);
        xp[j] = x[j] - h;
        let fm = value(&xp);
        xp[j] = x[j];
        for i in 0..m {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

// ---- JSON documents ----

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct QpDocument {
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub rho: f64,
    #[serde(rename = "L")]
    pub lsmooth: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BilevelDocument {
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    #[serde(rename = "C")]
    pub c: Vec<Vec<f64>>,
    /// Consistency-term weight.
    pub lambda: f64,
    #[serde(rename = "W")]
    pub noise_bound: f64,
}

/// `{"qp": {...}}` or `{"bilevel": {...}}`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "lowercase")]
pub enum InstanceDocument {
    Qp(QpDocument),
    Bilevel(BilevelDocument),
}

impl From<&QpInstance> for InstanceDocument {
    fn from(qp: &QpInstance) -> Self {
        InstanceDocument::Qp(QpDocument {
            q: qp.q.to_rows(),
            a: qp.a().to_rows(),
            b: qp.b().to_vec(),
            rho: qp.rho,
            lsmooth: qp.lsmooth,
        })
    }
}

impl From<&BilevelInstance> for InstanceDocument {
    fn from(inst: &BilevelInstance) -> Self {
        InstanceDocument::Bilevel(BilevelDocument {
            q: inst.q_low.to_rows(),
            a: inst.a_low.to_rows(),
            b: inst.b_low.clone(),
            c: inst.c.to_rows(),
            lambda: inst.upper_weight,
            noise_bound: inst.noise_bound,
        })
    }
}

impl QpDocument {
    pub fn into_instance(self) -> Result<QpInstance> {
        let constraint = AffineConstraint::new(Matrix::from_rows(&self.a)?, self.b)?;
        QpInstance::new(
            Matrix::from_rows(&self.q)?,
            constraint,
            self.rho,
            self.lsmooth,
        )
    }
}

impl BilevelDocument {
    pub fn into_instance(self) -> Result<BilevelInstance> {
        BilevelInstance::new(
            Matrix::from_rows(&self.q)?,
            Matrix::from_rows(&self.a)?,
            self.b,
            Matrix::from_rows(&self.c)?,
            self.lambda,
            self.noise_bound,
        )
    }
}

impl InstanceDocument {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("instance documents serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
