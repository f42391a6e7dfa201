use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ExperimentError, Result};
use crate::flow::Gains;
use crate::integrate::IntegratorConfig;
use crate::problem::InstanceDocument;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Qp,
    Bilevel,
    Certificate,
    Verify,
}

/// One JSON document per run. Fields left out take the defaults of the
/// corresponding study (see [`ExperimentConfig::qp_default`] and
/// [`ExperimentConfig::bilevel_default`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    /// Primal and constraint dimensions of generated QPs.
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_lsmooth", rename = "L")]
    pub lsmooth: f64,
    /// One run per entry.
    pub gains: Vec<Gains>,
    #[serde(default = "default_trajectories")]
    pub trajectories: usize,
    #[serde(default = "default_init_low")]
    pub init_low: f64,
    #[serde(default = "default_init_high")]
    pub init_high: f64,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Explicit instance; otherwise a QP is generated from `seed` (or the
    /// scalar bilevel default is used).
    #[serde(default)]
    pub instance: Option<InstanceDocument>,
    /// States sampled by the contraction check.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Number of generated instances checked by `verify`.
    #[serde(default = "default_instances")]
    pub instances: usize,
    /// Trailing fraction of each trajectory averaged into terminal stats.
    #[serde(default = "default_window")]
    pub window_fraction: f64,
    /// How many per-trajectory CSVs to write per gains triple.
    #[serde(default = "default_csv_limit")]
    pub trajectory_csv_limit: usize,
}

fn default_n() -> usize {
    10
}
fn default_m() -> usize {
    2
}
fn default_rho() -> f64 {
    3.0
}
fn default_lsmooth() -> f64 {
    4.0
}
fn default_trajectories() -> usize {
    50
}
fn default_init_low() -> f64 {
    0.0
}
fn default_init_high() -> f64 {
    2.0
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_samples() -> usize {
    1000
}
fn default_instances() -> usize {
    1
}
fn default_window() -> f64 {
    0.5
}
fn default_csv_limit() -> usize {
    5
}

impl ExperimentConfig {
    /// QP study: `n = 10`, `m = 2`, `ρ = 3`, `L = 4`, `kp = 15`, `ki = 100`,
    /// `kd ∈ {0, 4, 8}`, 50 trajectories from `[0, 2)`, `dt = 0.01`, `T = 20`.
    pub fn qp_default(seed: u64) -> Self {
        Self {
            kind: ExperimentKind::Qp,
            seed,
            n: default_n(),
            m: default_m(),
            rho: default_rho(),
            lsmooth: default_lsmooth(),
            gains: [0.0, 4.0, 8.0]
                .iter()
                .map(|kd| Gains {
                    kp: 15.0,
                    ki: 100.0,
                    kd: *kd,
                })
                .collect(),
            trajectories: default_trajectories(),
            init_low: default_init_low(),
            init_high: default_init_high(),
            integrator: IntegratorConfig {
                dt: 0.01,
                horizon: 20.0,
                record_every: 10,
                noise_bound: 0.0,
                seed,
                stream: 0,
            },
            output_dir: default_output_dir(),
            instance: None,
            samples: default_samples(),
            instances: default_instances(),
            window_fraction: default_window(),
            trajectory_csv_limit: default_csv_limit(),
        }
    }

    /// Bilevel study on the scalar default instance: `W = 0.5`, 20 seeds,
    /// `kd ∈ {0, 0.1, 5.1, 10.1}`.
    pub fn bilevel_default(seed: u64) -> Self {
        Self {
            kind: ExperimentKind::Bilevel,
            n: 1,
            m: 1,
            gains: [0.0, 0.1, 5.1, 10.1]
                .iter()
                .map(|kd| Gains {
                    kp: 15.0,
                    ki: 100.0,
                    kd: *kd,
                })
                .collect(),
            trajectories: 20,
            integrator: IntegratorConfig {
                noise_bound: 0.5,
                ..Self::qp_default(seed).integrator
            },
            ..Self::qp_default(seed)
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configs serialize")
    }

    /// Applies the run seed everywhere it is consumed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.integrator.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ExperimentError::Config(msg));
        if self.gains.is_empty() {
            return bad("at least one gains triple is required".into());
        }
        for g in &self.gains {
            if let Err(e) = g.validate() {
                return bad(e.to_string());
            }
        }
        if self.trajectories == 0 {
            return bad("trajectory count must be >= 1".into());
        }
        if !(self.init_low < self.init_high)
            || !self.init_low.is_finite()
            || !self.init_high.is_finite()
        {
            return bad(format!(
                "need init_low < init_high, got [{}, {})",
                self.init_low, self.init_high
            ));
        }
        if self.m == 0 || self.m > self.n {
            return bad(format!(
                "need 1 <= m <= n, got n = {}, m = {}",
                self.n, self.m
            ));
        }
        if !(self.window_fraction > 0.0 && self.window_fraction <= 1.0) {
            return bad(format!(
                "window_fraction must be in (0, 1], got {}",
                self.window_fraction
            ));
        }
        if self.samples == 0 || self.instances == 0 {
            return bad("samples and instances must be >= 1".into());
        }
        match (&self.kind, &self.instance) {
            (ExperimentKind::Bilevel, Some(InstanceDocument::Qp(_))) => {
                return bad("bilevel runs need a bilevel instance".into())
            }
            (ExperimentKind::Qp | ExperimentKind::Verify, Some(InstanceDocument::Bilevel(_))) => {
                return bad("QP runs need a QP instance".into())
            }
            _ => {}
        }
        self.integrator
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))
    }
}
