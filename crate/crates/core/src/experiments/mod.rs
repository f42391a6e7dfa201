//! Experiment orchestration: configuration, the QP and bilevel studies,
//! contraction checks, reports and figures.

pub mod bilevel;
pub mod config;
pub mod plot;
pub mod qp;
pub mod report;
pub mod verify;

use std::path::{Path, PathBuf};

use rand::Rng;
use thiserror::Error;

use crate::certificate::CertificateError;
use crate::flow::{FlowError, SaddleState};
use crate::integrate::IntegrateError;
use crate::problem::ProblemError;
use crate::rng::{self, Purpose};

pub use bilevel::{bilevel_reference, run_bilevel_experiment, BilevelReference};
pub use config::{ExperimentConfig, ExperimentKind};
pub use plot::{emit_plot, Figure, Series};
pub use qp::{run_qp_experiment, simulate_qp, QpSimulation};
pub use report::{GainsRun, RunReport};
pub use verify::{certificate_report, run_verify, CertificateReport};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Certificate(#[from] CertificateError),
    #[error(transparent)]
    Integrate(#[from] IntegrateError),
    #[error("plot: {0}")]
    Plot(String),
    #[error("reference: several local minima on the search grid at x = {0:?}")]
    Ambiguous(Vec<f64>),
    #[error("reference: the reduced objective has no interior minimizer on [{0}, {1}]")]
    Unbounded(f64, f64),
    #[error("reference: {0}")]
    Reference(String),
}

impl ExperimentError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn csv(path: &Path, source: impl Into<csv::Error>) -> Self {
        Self::Csv {
            path: path.to_path_buf(),
            source: source.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

/// Worker pool for trajectory fan-out; `SADDLEFLOW_THREADS` caps its size.
pub fn thread_pool() -> rayon::ThreadPool {
    let cap = std::env::var("SADDLEFLOW_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|n| *n > 0);
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cap {
        builder = builder.num_threads(n);
    }
    builder.build().expect("thread pool starts")
}

/// Initial state of trajectory `index`, uniform in `[low, high)` per
/// coordinate; independent of the gains.
pub fn initial_state(
    seed: u64,
    index: u64,
    n: usize,
    m: usize,
    low: f64,
    high: f64,
) -> SaddleState {
    let mut rng = rng::stream(seed, Purpose::InitialState, index);
    let mut draw = |k: usize| -> Vec<f64> { (0..k).map(|_| rng.random_range(low..high)).collect() };
    let x = draw(n);
    let xi = draw(m);
    SaddleState::new(x, xi)
}

/// Creates the output directory if needed.
pub fn prepare_output_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| ExperimentError::io(dir, e))
}

/// Runs the experiment named by `config.kind`. `certificate` configs are
/// answered by the CLI directly and rejected here.
pub fn run(config: &ExperimentConfig) -> Result<RunReport> {
    match config.kind {
        ExperimentKind::Qp => run_qp_experiment(config),
        ExperimentKind::Bilevel => run_bilevel_experiment(config),
        ExperimentKind::Verify => run_verify(config),
        ExperimentKind::Certificate => Err(ExperimentError::Config(
            "certificate runs take their bounds on the command line".into(),
        )),
    }
}
