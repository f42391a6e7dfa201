use std::path::Path;

use serde::Serialize;

use super::{ExperimentError, ExperimentKind, Result};
use crate::flow::Gains;
use crate::integrate::{fmt_f64, TerminalStats, Trajectory};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DivergedTrajectory {
    pub trajectory: usize,
    pub step: usize,
}

/// Outcome for one gains triple.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GainsRun {
    pub gains: Gains,
    pub label: String,
    pub alpha: Option<f64>,
    pub rate: Option<f64>,
    pub worst_lognorm: Option<f64>,
    pub lognorm_spread: Option<f64>,
    /// Every trajectory obeys `‖z_k − z⋆‖_P ≤ e^{−0.9c·t_k}‖z_0 − z⋆‖_P`.
    pub decay_bound_holds: Option<bool>,
    pub terminal: Option<TerminalStats>,
    pub diverged: Vec<DivergedTrajectory>,
    pub error: Option<String>,
    pub wall_time_s: f64,
}

impl GainsRun {
    pub fn new(gains: Gains) -> Self {
        Self {
            gains,
            label: gains.label(),
            alpha: None,
            rate: None,
            worst_lognorm: None,
            lognorm_spread: None,
            decay_bound_holds: None,
            terminal: None,
            diverged: Vec::new(),
            error: None,
            wall_time_s: 0.0,
        }
    }

    /// Failed checks, as human-readable lines.
    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(e) = &self.error {
            out.push(format!("{}: {e}", self.label));
        }
        if let (Some(mu), Some(c)) = (self.worst_lognorm, self.rate) {
            if mu > -c + 1e-8 {
                out.push(format!(
                    "{}: sampled log-norm {mu} exceeds -c = {}",
                    self.label, -c
                ));
            }
        }
        if self.decay_bound_holds == Some(false) {
            out.push(format!(
                "{}: a trajectory violates the certified decay bound",
                self.label
            ));
        }
        for d in &self.diverged {
            out.push(format!(
                "{}: trajectory {} diverged at step {}",
                self.label, d.trajectory, d.step
            ));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub kind: ExperimentKind,
    pub seed: u64,
    /// Stacked equilibrium `(x⋆, ξ⋆)` the distances are measured from.
    pub reference: Option<Vec<f64>>,
    pub runs: Vec<GainsRun>,
    /// File names relative to the output directory.
    pub files: Vec<String>,
    /// Problems not tied to one gains triple.
    pub errors: Vec<String>,
    pub passed: bool,
    pub failures: Vec<String>,
}

impl RunReport {
    pub fn new(kind: ExperimentKind, seed: u64) -> Self {
        Self {
            kind,
            seed,
            reference: None,
            runs: Vec::new(),
            files: Vec::new(),
            errors: Vec::new(),
            passed: false,
            failures: Vec::new(),
        }
    }

    /// Collects failures from every run and sets `passed`.
    pub fn finalize(&mut self) {
        let mut fails: Vec<String> = self.runs.iter().flat_map(GainsRun::failures).collect();
        fails.extend(self.errors.iter().cloned());
        self.passed = fails.is_empty();
        self.failures = fails;
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    /// Writes `report.json` (listing itself) into `dir`.
    pub fn write(&mut self, dir: &Path) -> Result<()> {
        if !self.files.iter().any(|f| f == "report.json") {
            self.files.push("report.json".into());
        }
        let path = dir.join("report.json");
        std::fs::write(&path, self.to_json() + "\n").map_err(|e| ExperimentError::io(&path, e))
    }
}

/// Pointwise mean/min/max across trajectories of a per-sample statistic.
#[derive(Clone, Debug, PartialEq)]
pub struct Envelope {
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Envelope {
    /// All trajectories must share their sample times.
    pub fn of(trajs: &[Trajectory], stat: impl Fn(&Trajectory, usize) -> f64) -> Result<Self> {
        let first = trajs
            .first()
            .ok_or_else(|| ExperimentError::Config("no trajectories to summarize".into()))?;
        if trajs.iter().any(|t| t.times != first.times) {
            return Err(ExperimentError::Config(
                "trajectories have different sample times".into(),
            ));
        }
        let len = first.len();
        let mut env = Envelope {
            times: first.times.clone(),
            mean: Vec::with_capacity(len),
            min: Vec::with_capacity(len),
            max: Vec::with_capacity(len),
        };
        for k in 0..len {
            let vals: Vec<f64> = trajs.iter().map(|t| stat(t, k)).collect();
            env.mean.push(vals.iter().sum::<f64>() / vals.len() as f64);
            env.min
                .push(vals.iter().copied().fold(f64::INFINITY, f64::min));
            env.max
                .push(vals.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        }
        Ok(env)
    }

    /// Columns `t,mean_logdist,min_logdist,max_logdist`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| ExperimentError::csv(path, e))?;
        let res = (|| -> std::result::Result<(), csv::Error> {
            w.write_record(["t", "mean_logdist", "min_logdist", "max_logdist"])?;
            for k in 0..self.times.len() {
                w.write_record([
                    fmt_f64(self.times[k]),
                    fmt_f64(self.mean[k]),
                    fmt_f64(self.min[k]),
                    fmt_f64(self.max[k]),
                ])?;
            }
            w.flush()?;
            Ok(())
        })();
        res.map_err(|e| ExperimentError::csv(path, e))
    }
}

/// `ln d`, with `d = 0` mapped to the log of the smallest positive double.
pub fn log_distance(d: f64) -> f64 {
    d.max(f64::MIN_POSITIVE).ln()
}
