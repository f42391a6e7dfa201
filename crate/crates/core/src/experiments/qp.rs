//! Random-QP study: certified rate versus simulated decay for several
//! derivative gains.

use std::time::Instant;

use rayon::prelude::*;

use super::plot::{self, Figure, Series};
use super::report::{log_distance, DivergedTrajectory, Envelope, GainsRun, RunReport};
use super::{
    initial_state, prepare_output_dir, thread_pool, ExperimentConfig, ExperimentError,
    ExperimentKind, Result,
};
use crate::certificate::{
    certificate_affine, verify_flow_contraction_detailed, Certificate, ContractionSample,
};
use crate::flow::{AffinePidSpf, Gains, SaddleState};
use crate::integrate::{
    attach_diagnostics, euler_integrate, terminal_error_stats_weighted, write_trajectory_csv,
    IntegrateError, IntegratorConfig, Trajectory,
};
use crate::problem::{generate_qp, kkt_solve, InstanceDocument, QpInstance};

/// Fraction of the certified rate the Euler iterates must achieve.
pub const RATE_MARGIN: f64 = 0.9;

/// `‖z_k − z⋆‖_P ≤ e^{−0.9c·t_k}‖z_0 − z⋆‖_P` at every sample (with a
/// round-off allowance of `1e-12·‖z_0 − z⋆‖_P`).
pub fn decay_bound_holds(traj: &Trajectory, rate: f64) -> bool {
    let Some(d) = traj.weighted_distance.as_ref() else {
        return false;
    };
    let d0 = d[0];
    d.iter()
        .zip(&traj.times)
        .all(|(dk, t)| *dk <= (-RATE_MARGIN * rate * t).exp() * d0 * (1.0 + 1e-12) + 1e-12 * d0)
}

/// Everything computed for one gains triple on one instance.
#[derive(Debug)]
pub struct QpSimulation {
    pub gains: Gains,
    pub certificate: Certificate,
    pub contraction: ContractionSample,
    /// Indexed by trajectory; `Err` holds the divergence.
    pub trajectories: Vec<std::result::Result<Trajectory, IntegrateError>>,
}

impl QpSimulation {
    pub fn completed(&self) -> Vec<Trajectory> {
        self.trajectories
            .iter()
            .filter_map(|t| t.as_ref().ok().cloned())
            .collect()
    }
}

/// Certificate, sampled contraction check and `count` Euler trajectories
/// from `[low, high)` initial states, run on the worker pool.
#[allow(clippy::too_many_arguments)]
pub fn simulate_qp(
    qp: &QpInstance,
    z_star: &SaddleState,
    gains: Gains,
    integrator: &IntegratorConfig,
    count: usize,
    init: (f64, f64),
    samples: usize,
    seed: u64,
) -> Result<QpSimulation> {
    let certificate = certificate_affine(qp, &gains)?;
    let contraction = verify_flow_contraction_detailed(qp, &gains, samples, seed)?;
    let field = AffinePidSpf::from_problem(&qp.problem(), gains)?;
    let (n, m) = (qp.n(), qp.m());
    let pool = thread_pool();
    let trajectories = pool.install(|| {
        (0..count)
            .into_par_iter()
            .map(|i| {
                let z0 = initial_state(seed, i as u64, n, m, init.0, init.1);
                let cfg = IntegratorConfig {
                    stream: i as u64,
                    seed,
                    ..*integrator
                };
                let traj = euler_integrate(&field, &z0, &cfg)?;
                attach_diagnostics(traj, &certificate, z_star)
            })
            .collect()
    });
    Ok(QpSimulation {
        gains,
        certificate,
        contraction,
        trajectories,
    })
}

fn instance(config: &ExperimentConfig) -> Result<QpInstance> {
    match &config.instance {
        Some(InstanceDocument::Qp(doc)) => Ok(doc.clone().into_instance()?),
        Some(InstanceDocument::Bilevel(_)) => {
            Err(ExperimentError::Config("QP runs need a QP instance".into()))
        }
        None => Ok(generate_qp(
            config.n,
            config.m,
            config.rho,
            config.lsmooth,
            config.seed,
        )?),
    }
}

/// Runs the QP study and writes `instance.json`, `summary_<gains>.csv`,
/// `traj_<gains>_<i>.csv`, `fig_qp.svg` and `report.json` to the output
/// directory.
pub fn run_qp_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    config.validate()?;
    if config.kind != ExperimentKind::Qp {
        return Err(ExperimentError::Config("expected a qp config".into()));
    }
    let dir = &config.output_dir;
    prepare_output_dir(dir)?;
    let qp = instance(config)?;
    let (x_star, lambda_star) = kkt_solve(&qp)?;
    // h(x⋆) = 0, so the equilibrium dual state equals λ⋆
    let z_star = SaddleState::new(x_star, lambda_star);

    let mut report = RunReport::new(ExperimentKind::Qp, config.seed);
    report.reference = Some(z_star.stacked());
    let inst_path = dir.join("instance.json");
    std::fs::write(&inst_path, InstanceDocument::from(&qp).to_json() + "\n")
        .map_err(|e| ExperimentError::io(&inst_path, e))?;
    report.files.push("instance.json".into());

    let mut figure = Figure {
        title: format!(
            "QP n = {}, m = {}: distance to the KKT point",
            qp.n(),
            qp.m()
        ),
        x_label: "t".into(),
        y_label: "ln ‖z − z⋆‖_P".into(),
        ..Default::default()
    };

    for gains in &config.gains {
        let started = Instant::now();
        let mut run = GainsRun::new(*gains);
        let sim = match simulate_qp(
            &qp,
            &z_star,
            *gains,
            &config.integrator,
            config.trajectories,
            (config.init_low, config.init_high),
            config.samples,
            config.seed,
        ) {
            Ok(sim) => sim,
            Err(e) => {
                run.error = Some(e.to_string());
                report.runs.push(run);
                continue;
            }
        };
        run.alpha = Some(sim.certificate.alpha);
        run.rate = Some(sim.certificate.rate);
        run.worst_lognorm = Some(sim.contraction.worst_lognorm);
        run.lognorm_spread = Some(sim.contraction.spread());
        for (i, t) in sim.trajectories.iter().enumerate() {
            if let Err(IntegrateError::Divergence { step, .. }) = t {
                run.diverged.push(DivergedTrajectory {
                    trajectory: i,
                    step: *step,
                });
            } else if let Err(e) = t {
                run.error = Some(e.to_string());
            }
        }
        let done = sim.completed();
        if !done.is_empty() {
            let rate = sim.certificate.rate;
            run.decay_bound_holds = Some(done.iter().all(|t| decay_bound_holds(t, rate)));
            run.terminal = Some(terminal_error_stats_weighted(
                &done,
                &sim.certificate,
                &z_star,
                config.window_fraction,
            )?);
            let env = Envelope::of(&done, |t, k| {
                log_distance(t.weighted_distance.as_ref().expect("diagnostics attached")[k])
            })?;
            let name = format!("summary_{}.csv", run.label);
            env.write_csv(&dir.join(&name))?;
            report.files.push(name);
            figure.series.push(
                Series::new(
                    format!("kd = {} (c = {:.3})", gains.kd, rate),
                    env.times,
                    env.mean,
                )
                .with_band(env.min, env.max),
            );
        }
        for (i, t) in sim
            .trajectories
            .iter()
            .enumerate()
            .take(config.trajectory_csv_limit)
        {
            if let Ok(t) = t {
                let name = format!("traj_{}_{i}.csv", run.label);
                let path = dir.join(&name);
                let file =
                    std::fs::File::create(&path).map_err(|e| ExperimentError::io(&path, e))?;
                write_trajectory_csv(t, std::io::BufWriter::new(file))?;
                report.files.push(name);
            }
        }
        run.wall_time_s = started.elapsed().as_secs_f64();
        report.runs.push(run);
    }

    if !figure.series.is_empty() {
        plot::emit_plot(&figure, &dir.join("fig_qp.svg"))?;
        report.files.push("fig_qp.svg".into());
    }
    report.finalize();
    report.write(dir)?;
    Ok(report)
}
