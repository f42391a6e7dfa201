//! PID saddle-point flows for equality-constrained minimization.
//!
//! The crate covers the whole pipeline from problem oracles to experiment
//! reports:
//!
//! - [`linalg`]: dense symmetric linear algebra, weighted norms and
//!   logarithmic norms.
//! - [`problem`]: objective/constraint oracles, random QPs, the bilevel
//!   reformulation and bounded noise.
//! - [`flow`]: the PID saddle-point vector fields, the coordinate change to
//!   the original multiplier dynamics and the multiplier reconstruction.
//! - [`certificate`]: closed-form contraction certificates and their
//!   numerical verification.
//! - [`integrate`]: forward-Euler trajectories and convergence diagnostics.
//! - [`experiments`]: configuration, orchestration, CSV/JSON/SVG output.

pub mod certificate;
pub mod experiments;
pub mod flow;
pub mod integrate;
pub mod linalg;
pub mod problem;
pub mod rng;

pub use certificate::{Certificate, CertificateInput};
pub use flow::{AffinePidSpf, Gains, PidSpf, SaddleState, VectorField};
pub use linalg::Matrix;
pub use problem::{BilevelInstance, Problem, QpInstance};
