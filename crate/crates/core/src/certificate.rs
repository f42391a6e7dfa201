//! Closed-form contraction certificates for scaled saddle matrices.
//!
//! For `S = [−M⁻¹B, −M⁻¹Aᵀ; τ⁻¹A, 0]` with
//! `m_min I ⪯ M ⪯ m_max I`, `b_min I ⪯ B ⪯ b_max I`,
//! `a_min I ⪯ AAᵀ ⪯ a_max I`, the metric
//!
//! ```text
//! P = [M, αAᵀ; αA, τI],   α = ½·min{m_min/b_max, τ·b_min/a_max},
//! c = ½·α·τ⁻¹·a_min/m_max
//! ```
//!
//! satisfies `SᵀP + PS ⪯ −2cP`, i.e. `μ_P(S) ≤ −c`. The Jacobian of the
//! affine PID saddle-point flow has exactly this shape with
//! `M = I + k_d AᵀA`, `B = ∇²f + k_p AᵀA` and `τ = 1/k_i`.

use rand::Rng;
use thiserror::Error;

use crate::flow::{self, Gains, SaddleState, VectorField};
use crate::linalg::{self, LinalgError, Matrix};
use crate::problem::{AffineConstraint, QpInstance};
use crate::rng::{self, Purpose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CertificateError {
    #[error("invalid certificate input: {0}")]
    Input(String),
    #[error("assumption violated: {0}")]
    Assumption(String),
    #[error("weight matrix is not positive definite")]
    NotPositiveDefinite,
    #[error(transparent)]
    Linalg(LinalgError),
}

impl From<LinalgError> for CertificateError {
    fn from(e: LinalgError) -> Self {
        match e {
            LinalgError::NotPositiveDefinite { .. } => CertificateError::NotPositiveDefinite,
            other => CertificateError::Linalg(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, CertificateError>;

/// Spectral bounds on the blocks of a scaled saddle matrix, plus `τ`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CertificateInput {
    pub m_min: f64,
    pub m_max: f64,
    pub b_min: f64,
    pub b_max: f64,
    pub a_min: f64,
    pub a_max: f64,
    pub tau: f64,
}

impl CertificateInput {
    pub fn validate(&self) -> Result<()> {
        let pairs = [
            ("m", self.m_min, self.m_max),
            ("b", self.b_min, self.b_max),
            ("a", self.a_min, self.a_max),
        ];
        for (name, lo, hi) in pairs {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(CertificateError::Input(format!(
                    "need 0 < {name}_min <= {name}_max, got ({lo}, {hi})"
                )));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(CertificateError::Input(format!(
                "tau must be > 0, got {}",
                self.tau
            )));
        }
        Ok(())
    }

    /// Bounds induced by the affine flow Jacobian.
    pub fn for_affine_flow(rho: f64, lsmooth: f64, a_min: f64, a_max: f64, gains: &Gains) -> Self {
        Self {
            m_min: 1.0 + gains.kd * a_min,
            m_max: 1.0 + gains.kd * a_max,
            b_min: rho + gains.kp * a_min,
            b_max: lsmooth + gains.kp * a_max,
            a_min,
            a_max,
            tau: 1.0 / gains.ki,
        }
    }
}

/// Coupling `α` and contraction rate `c` for the given bounds.
pub fn certificate_general(input: &CertificateInput) -> Result<(f64, f64)> {
    input.validate()?;
    let alpha = 0.5 * (input.m_min / input.b_max).min(input.tau * input.b_min / input.a_max);
    let rate = 0.5 * alpha / input.tau * input.a_min / input.m_max;
    Ok((alpha, rate))
}

/// `P = [M, αAᵀ; αA, τI]`
pub fn assemble_metric(m: &Matrix, a: &Matrix, alpha: f64, tau: f64) -> Matrix {
    let k = a.rows();
    Matrix::block2x2(
        m,
        &a.transpose().scale(alpha),
        &a.scale(alpha),
        &Matrix::identity(k).scale(tau),
    )
}

/// A contraction certificate `(P, α, c)` together with the blocks it was
/// built from.
#[derive(Clone, Debug)]
pub struct Certificate {
    pub p: Matrix,
    pub alpha: f64,
    pub rate: f64,
    pub input: CertificateInput,
    metric: Matrix,
    a: Matrix,
    factor: Matrix,
}

impl Certificate {
    /// Certificate for a given `(M, A)` pair and bounds. Fails if the
    /// assembled `P` is not positive definite.
    pub fn from_blocks(input: CertificateInput, m: Matrix, a: Matrix) -> Result<Self> {
        let (alpha, rate) = certificate_general(&input)?;
        if m.rows() != a.cols() || !m.is_square() {
            return Err(CertificateError::Input(format!(
                "M is {}x{} but A is {}x{}",
                m.rows(),
                m.cols(),
                a.rows(),
                a.cols()
            )));
        }
        let p = assemble_metric(&m, &a, alpha, input.tau);
        let factor = linalg::cholesky(&p)?;
        Ok(Self {
            p,
            alpha,
            rate,
            input,
            metric: m,
            a,
            factor,
        })
    }

    pub fn n(&self) -> usize {
        self.metric.rows()
    }

    pub fn m(&self) -> usize {
        self.a.rows()
    }

    /// Cholesky factor `R` of `P = RRᵀ`.
    pub fn factor(&self) -> &Matrix {
        &self.factor
    }

    pub fn metric_block(&self) -> &Matrix {
        &self.metric
    }

    /// `‖z − z⋆‖_P`
    pub fn distance(&self, state: &SaddleState, reference: &SaddleState) -> f64 {
        let dz = linalg::sub(&state.stacked(), &reference.stacked());
        linalg::weighted_norm_factored(&self.factor, &dz)
    }

    pub fn p_spectrum(&self) -> linalg::SpectralBounds {
        linalg::SpectralBounds::of_symmetric(&self.p).expect("P is finite and square")
    }
}

/// Certificate for the affine PID saddle-point flow on `h(x) = Ax − b`,
/// given strong convexity `rho` and smoothness `lsmooth` of `f`.
pub fn certificate_for_constraint(
    constraint: &AffineConstraint,
    rho: f64,
    lsmooth: f64,
    gains: &Gains,
) -> Result<Certificate> {
    gains
        .validate()
        .map_err(|e| CertificateError::Input(e.to_string()))?;
    if !(rho > 0.0 && rho <= lsmooth && lsmooth.is_finite()) {
        return Err(CertificateError::Assumption(format!(
            "objective must be rho-strongly convex and L-smooth with 0 < rho <= L, got ({rho}, {lsmooth})"
        )));
    }
    let g = constraint.gram_bounds();
    if g.lower <= 0.0 {
        return Err(CertificateError::Assumption(
            "A must have full row rank".into(),
        ));
    }
    let input = CertificateInput::for_affine_flow(rho, lsmooth, g.lower, g.upper, gains);
    let a = constraint.a().clone();
    let m = flow::metric(&a, gains.kd);
    let cert = Certificate::from_blocks(input, m, a)?;
    Ok(cert)
}

/// Certificate for a quadratic program under the given gains.
pub fn certificate_affine(qp: &QpInstance, gains: &Gains) -> Result<Certificate> {
    certificate_for_constraint(&qp.constraint, qp.rho, qp.lsmooth, gains)
}

/// `S = [−M⁻¹B, −M⁻¹Aᵀ; τ⁻¹A, 0]`
pub fn saddle_matrix(m: &Matrix, b: &Matrix, a: &Matrix, tau: f64) -> Result<Matrix> {
    let n = m.rows();
    if !m.is_square() || b.shape() != (n, n) || a.cols() != n {
        return Err(CertificateError::Input(
            "saddle blocks do not conform".into(),
        ));
    }
    if !(tau > 0.0) {
        return Err(CertificateError::Input(format!(
            "tau must be > 0, got {tau}"
        )));
    }
    let r = linalg::cholesky(m)
        .map_err(|_| CertificateError::Input("M must be symmetric positive definite".into()))?;
    let solve_cols = |rhs: &Matrix| {
        let mut out = Matrix::zeros(n, rhs.cols());
        for j in 0..rhs.cols() {
            let col = linalg::cholesky_solve(&r, &rhs.column(j));
            for i in 0..n {
                out[(i, j)] = col[i];
            }
        }
        out
    };
    let top_left = solve_cols(b).scale(-1.0);
    let top_right = solve_cols(&a.transpose()).scale(-1.0);
    Ok(Matrix::block2x2(
        &top_left,
        &top_right,
        &a.scale(1.0 / tau),
        &Matrix::zeros(a.rows(), a.rows()),
    ))
}

/// Closed-form Jacobian of the affine flow at a point where `∇²f = hessian`.
pub fn affine_flow_jacobian(a: &Matrix, hessian: &Matrix, gains: &Gains) -> Result<Matrix> {
    let m = flow::metric(a, gains.kd);
    let b = hessian.add(&a.gram_cols().scale(gains.kp));
    saddle_matrix(&m, &b, a, 1.0 / gains.ki)
}

/// Central-difference Jacobian of a vector field (step `1e-6·max(1, ‖z‖)`).
pub fn flow_jacobian_fd(field: &dyn VectorField, state: &SaddleState) -> Matrix {
    let (n, _) = field.dims();
    let z = state.stacked();
    let h = 1e-6 * linalg::norm2(&z).max(1.0);
    let eval = |p: &[f64]| {
        let (dx, dxi) = field.eval(&SaddleState::from_stacked(p, n), None);
        let mut v = dx;
        v.extend(dxi);
        v
    };
    let dim = z.len();
    let mut jac = Matrix::zeros(dim, dim);
    let mut zp = z.clone();
    for j in 0..dim {
        zp[j] = z[j] + h;
        let fp = eval(&zp);
        zp[j] = z[j] - h;
        let fm = eval(&zp);
        zp[j] = z[j];
        for i in 0..dim {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

/// Result of an LMI check `SᵀP + PS ⪯ −2cP`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LmiCheck {
    /// `λ_max(R⁻¹(SᵀP + PS + 2cP)R⁻ᵀ)`; the LMI holds iff this is ≤ 0.
    pub margin: f64,
    /// Round-off allowance, `1e-8·max(1, largest |eigenvalue| involved)`.
    pub tolerance: f64,
}

impl LmiCheck {
    pub fn holds(&self) -> bool {
        self.margin <= self.tolerance
    }
}

pub fn lmi_check(s: &Matrix, p: &Matrix, rate: f64) -> Result<LmiCheck> {
    if !s.is_square() || s.shape() != p.shape() {
        return Err(CertificateError::Input(format!(
            "S is {}x{} but P is {}x{}",
            s.rows(),
            s.cols(),
            p.rows(),
            p.cols()
        )));
    }
    let r = linalg::cholesky(p)?;
    let ps = p.matmul(s);
    let g = ps.add(&ps.transpose());
    let w = linalg::congruence_whiten(&r, &g).symmetrize();
    let eig = linalg::sym_eig(&w)?;
    let scale = eig
        .min()
        .abs()
        .max(eig.max().abs())
        .max(2.0 * rate.abs())
        .max(1.0);
    Ok(LmiCheck {
        margin: eig.max() + 2.0 * rate,
        tolerance: 1e-8 * scale,
    })
}

/// Margin of `SᵀP + PS ⪯ −2·rate·P` in the `P`-whitened coordinates.
pub fn lmi_verify(s: &Matrix, p: &Matrix, rate: f64) -> Result<f64> {
    Ok(lmi_check(s, p, rate)?.margin)
}

/// Sampled log-norm of the flow Jacobian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContractionSample {
    /// Largest `μ_P(J)` over the samples.
    pub worst_lognorm: f64,
    /// Smallest `μ_P(J)` over the samples.
    pub best_lognorm: f64,
    pub rate: f64,
}

impl ContractionSample {
    pub fn spread(&self) -> f64 {
        self.worst_lognorm - self.best_lognorm
    }

    /// `μ_P(J) ≤ −c` within `1e-8`.
    pub fn certified(&self) -> bool {
        self.worst_lognorm <= -self.rate + 1e-8
    }
}

/// Evaluates `μ_P` of the affine flow Jacobian at `samples` random states
/// (uniform in `[−2, 2]`).
pub fn verify_flow_contraction_detailed(
    qp: &QpInstance,
    gains: &Gains,
    samples: usize,
    seed: u64,
) -> Result<ContractionSample> {
    let cert = certificate_affine(qp, gains)?;
    let objective = qp.objective();
    let mut rng = rng::stream(seed, Purpose::Sampling, 0);
    let mut worst = f64::NEG_INFINITY;
    let mut best = f64::INFINITY;
    for _ in 0..samples.max(1) {
        let x: Vec<f64> = (0..qp.n()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let hess = crate::problem::Objective::hessian(&objective, &x)
            .expect("quadratic objectives expose their Hessian");
        let jac = affine_flow_jacobian(qp.a(), &hess, gains)?;
        let mu = linalg::lognorm_factored(cert.factor(), &cert.p, &jac);
        worst = worst.max(mu);
        best = best.min(mu);
    }
    Ok(ContractionSample {
        worst_lognorm: worst,
        best_lognorm: best,
        rate: cert.rate,
    })
}

/// Worst sampled `μ_P(J_F)`.
pub fn verify_flow_contraction(
    qp: &QpInstance,
    gains: &Gains,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    Ok(verify_flow_contraction_detailed(qp, gains, samples, seed)?.worst_lognorm)
}

/// `V(z) = (z − z⋆)ᵀP(z − z⋆)`
pub fn lyapunov_value(cert: &Certificate, state: &SaddleState, equilibrium: &SaddleState) -> f64 {
    let d = cert.distance(state, equilibrium);
    d * d
}

/// The three terms `δxᵀMδx`, `2α·δxᵀAᵀδξ`, `τ‖δξ‖²` of the Lyapunov function.
pub fn lyapunov_terms(
    cert: &Certificate,
    state: &SaddleState,
    equilibrium: &SaddleState,
) -> [f64; 3] {
    let dx = linalg::sub(&state.x, &equilibrium.x);
    let dxi = linalg::sub(&state.xi, &equilibrium.xi);
    [
        linalg::dot(&dx, &cert.metric.matvec(&dx)),
        2.0 * cert.alpha * linalg::dot(&dx, &cert.a.tr_matvec(&dxi)),
        cert.input.tau * linalg::dot(&dxi, &dxi),
    ]
}

// ---- random conforming instances ----

/// Draws bounds log-uniformly in `[1e-2, 1e2]` with `max/min ≤ 1e3`, and `τ`
/// log-uniformly in the same range.
pub fn sample_certificate_input<R: Rng + ?Sized>(rng: &mut R) -> CertificateInput {
    let pair = |rng: &mut R| {
        let lo = 10f64.powf(rng.random_range(-2.0..2.0));
        let max_ratio = (1e2 / lo).min(1e3);
        let hi = lo * max_ratio.powf(rng.random::<f64>());
        (lo, hi)
    };
    let (m_min, m_max) = pair(rng);
    let (b_min, b_max) = pair(rng);
    let (a_min, a_max) = pair(rng);
    CertificateInput {
        m_min,
        m_max,
        b_min,
        b_max,
        a_min,
        a_max,
        tau: 10f64.powf(rng.random_range(-2.0..2.0)),
    }
}

fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Matrix {
    loop {
        let data = (0..n * n)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let g = Matrix::from_row_major(n, n, data).expect("finite");
        if let Ok(q) = linalg::orthonormalize_columns(&g) {
            return q;
        }
    }
}

/// Spectrum in `[lo, hi]` with both ends attained (when `k ≥ 2`).
fn pinned_spectrum<R: Rng + ?Sized>(rng: &mut R, k: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut s: Vec<f64> = (0..k).map(|_| rng.random_range(lo..=hi)).collect();
    if k >= 1 {
        s[0] = lo;
    }
    if k >= 2 {
        s[k - 1] = hi;
    }
    s
}

/// Random symmetric `V·diag(u)·Vᵀ` with `u ∈ [lo, hi]`.
pub fn random_symmetric_in<R: Rng + ?Sized>(rng: &mut R, n: usize, lo: f64, hi: f64) -> Matrix {
    let v = random_orthogonal(rng, n);
    let u = pinned_spectrum(rng, n, lo, hi);
    v.matmul(&Matrix::from_diag(&u))
        .matmul(&v.transpose())
        .symmetrize()
}

/// Random `m×n` matrix with `a_min I ⪯ AAᵀ ⪯ a_max I`.
pub fn random_constraint_matrix<R: Rng + ?Sized>(
    rng: &mut R,
    m: usize,
    n: usize,
    a_min: f64,
    a_max: f64,
) -> Matrix {
    assert!(m <= n);
    let u = random_orthogonal(rng, m);
    let w = random_orthogonal(rng, n);
    let s = pinned_spectrum(rng, m, a_min, a_max);
    let mut core = Matrix::zeros(m, n);
    for (i, si) in s.iter().enumerate() {
        core[(i, i)] = si.sqrt();
    }
    u.matmul(&core).matmul(&w.transpose())
}

/// `(M, B, A)` drawn inside the bounds of `input`.
pub fn sample_conforming<R: Rng + ?Sized>(
    rng: &mut R,
    input: &CertificateInput,
    n: usize,
    m: usize,
) -> (Matrix, Matrix, Matrix) {
    let mm = random_symmetric_in(rng, n, input.m_min, input.m_max);
    let bb = random_symmetric_in(rng, n, input.b_min, input.b_max);
    let aa = random_constraint_matrix(rng, m, n, input.a_min, input.a_max);
    (mm, bb, aa)
}
