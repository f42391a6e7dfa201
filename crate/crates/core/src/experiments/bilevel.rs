//! Bilevel study: the leader-follower problem after replacing the
//! follower by its optimality condition, under noisy constraint readings.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::plot::{self, Contours, Figure, Marker, Series};
use super::report::{log_distance, DivergedTrajectory, Envelope, GainsRun, RunReport};
use super::{
    initial_state, prepare_output_dir, thread_pool, ExperimentConfig, ExperimentError,
    ExperimentKind, Result,
};
use crate::flow::{AffinePidSpf, SaddleState};
use crate::integrate::{
    euler_integrate, terminal_error_stats, write_trajectory_csv, IntegrateError, IntegratorConfig,
    Trajectory,
};
use crate::linalg;
use crate::problem::{
    bilevel_reformulate, BilevelInstance, ConstraintMap, InstanceDocument, Objective,
};

/// Interval searched by [`bilevel_reference`].
pub const SEARCH_RANGE: (f64, f64) = (-10.0, 10.0);
const GRID_POINTS: usize = 2001;
const GOLDEN_TOL: f64 = 1e-10;

/// Solution of a scalar bilevel instance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BilevelReference {
    pub x: f64,
    pub y: f64,
    /// Multiplier of the optimality-condition constraint.
    pub multiplier: f64,
    /// `‖∇f + Aᵀλ‖ + ‖h‖` of the reformulated problem.
    pub kkt_residual: f64,
    pub objective: f64,
}

impl BilevelReference {
    /// Equilibrium of the flow in `(z, ξ)` coordinates (`h = 0` there, so
    /// `ξ⋆ = λ⋆`).
    pub fn state(&self) -> SaddleState {
        SaddleState::new(vec![self.x, self.y], vec![self.multiplier])
    }
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Minimizes the upper objective along the follower's exact response
/// `y(x) = −Q⁻¹(Ax + b)`: coarse grid on [`SEARCH_RANGE`], then golden
/// section around the unique interior grid minimum.
pub fn bilevel_reference(inst: &BilevelInstance) -> Result<BilevelReference> {
    if inst.n() != 1 || inst.m() != 1 {
        return Err(ExperimentError::Reference(format!(
            "only scalar instances are supported, got n = {}, m = {}",
            inst.n(),
            inst.m()
        )));
    }
    let (objective, constraint) = bilevel_reformulate(inst)?;
    let follower = |x: f64| -> Result<f64> { Ok(inst.lower_level_solution(&[x])?[0]) };
    // y(x) is affine, so precompute slope and intercept
    let y0 = follower(0.0)?;
    let slope = follower(1.0)? - y0;
    let reduced = |x: f64| objective.value(&[x, y0 + slope * x]);

    let (lo, hi) = SEARCH_RANGE;
    let step = (hi - lo) / (GRID_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..GRID_POINTS).map(|i| lo + step * i as f64).collect();
    let vals: Vec<f64> = grid.iter().map(|x| reduced(*x)).collect();
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(ExperimentError::Reference(
            "reduced objective is not finite on the grid".into(),
        ));
    }
    let argmin = (0..GRID_POINTS)
        .min_by(|i, j| vals[*i].total_cmp(&vals[*j]))
        .expect("grid is non-empty");
    if argmin == 0 || argmin == GRID_POINTS - 1 {
        return Err(ExperimentError::Unbounded(lo, hi));
    }
    let minima: Vec<usize> = (1..GRID_POINTS - 1)
        .filter(|&i| vals[i] < vals[i - 1] && vals[i] <= vals[i + 1])
        .collect();
    if minima.len() > 1 {
        return Err(ExperimentError::Ambiguous(
            minima.iter().map(|i| grid[*i]).collect(),
        ));
    }
    let x = golden_section(reduced, grid[argmin - 1], grid[argmin + 1], GOLDEN_TOL);
    let y = y0 + slope * x;
    let z = [x, y];

    // least-squares multiplier for ∇f + Aᵀλ = 0
    let grad = objective.gradient(&z);
    let a = constraint.a();
    let gram = a.gram_rows();
    let r = linalg::cholesky(&gram).map_err(|e| ExperimentError::Reference(e.to_string()))?;
    let lambda = linalg::scaled(&linalg::cholesky_solve(&r, &a.matvec(&grad)), -1.0);
    let mut stationarity = grad.clone();
    linalg::axpy(1.0, &a.tr_matvec(&lambda), &mut stationarity);
    let residual = linalg::norm2(&stationarity) + linalg::norm2(&constraint.value(&z));
    Ok(BilevelReference {
        x,
        y,
        multiplier: lambda[0],
        kkt_residual: residual,
        objective: objective.value(&z),
    })
}

/// `‖(x, y) − (x⋆, y⋆)‖`, ignoring the dual state.
pub fn primal_distance(state: &SaddleState, reference: &SaddleState) -> f64 {
    linalg::norm2(&linalg::sub(&state.x, &reference.x))
}

fn instance(config: &ExperimentConfig) -> Result<BilevelInstance> {
    match &config.instance {
        Some(InstanceDocument::Bilevel(doc)) => Ok(doc.clone().into_instance()?),
        Some(InstanceDocument::Qp(_)) => Err(ExperimentError::Config(
            "bilevel runs need a bilevel instance".into(),
        )),
        None => Ok(BilevelInstance::scalar_default()),
    }
}

/// Noisy trajectories for every seed index `0..count`. The noise bound is
/// taken from `integrator`.
pub fn simulate_bilevel(
    inst: &BilevelInstance,
    field: &AffinePidSpf,
    integrator: &IntegratorConfig,
    count: usize,
    init: (f64, f64),
    seed: u64,
) -> Vec<std::result::Result<Trajectory, IntegrateError>> {
    let (nz, m) = (inst.n() + inst.m(), inst.m());
    thread_pool().install(|| {
        (0..count)
            .into_par_iter()
            .map(|i| {
                let z0 = initial_state(seed, i as u64, nz, m, init.0, init.1);
                let cfg = IntegratorConfig {
                    seed,
                    stream: i as u64,
                    ..*integrator
                };
                euler_integrate(field, &z0, &cfg)
            })
            .collect()
    })
}

/// Runs the bilevel study and writes `instance.json`,
/// `summary_<gains>.csv`, `traj_<gains>_<i>.csv`, `fig_bilevel.svg` and
/// `report.json`. Terminal statistics use the primal distance to the
/// reference.
pub fn run_bilevel_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    config.validate()?;
    if config.kind != ExperimentKind::Bilevel {
        return Err(ExperimentError::Config("expected a bilevel config".into()));
    }
    let dir = &config.output_dir;
    prepare_output_dir(dir)?;
    let inst = instance(config)?;
    let mut report = RunReport::new(ExperimentKind::Bilevel, config.seed);
    let inst_path = dir.join("instance.json");
    std::fs::write(&inst_path, InstanceDocument::from(&inst).to_json() + "\n")
        .map_err(|e| ExperimentError::io(&inst_path, e))?;
    report.files.push("instance.json".into());

    let reference = match bilevel_reference(&inst) {
        Ok(r) => r,
        Err(e) => {
            report.errors.push(e.to_string());
            report.finalize();
            report.write(dir)?;
            return Ok(report);
        }
    };
    let z_star = reference.state();
    report.reference = Some(z_star.stacked());
    let problem = inst.problem()?;
    let (objective, _) = bilevel_reformulate(&inst)?;

    let mut paths: Vec<Series> = Vec::new();
    for gains in &config.gains {
        let started = Instant::now();
        let mut run = GainsRun::new(*gains);
        let field = match AffinePidSpf::from_problem(&problem, *gains) {
            Ok(f) => f,
            Err(e) => {
                run.error = Some(e.to_string());
                report.runs.push(run);
                continue;
            }
        };
        let trajs = simulate_bilevel(
            &inst,
            &field,
            &config.integrator,
            config.trajectories,
            (config.init_low, config.init_high),
            config.seed,
        );
        for (i, t) in trajs.iter().enumerate() {
            match t {
                Err(IntegrateError::Divergence { step, .. }) => {
                    run.diverged.push(DivergedTrajectory {
                        trajectory: i,
                        step: *step,
                    })
                }
                Err(e) => run.error = Some(e.to_string()),
                Ok(_) => {}
            }
        }
        let done: Vec<Trajectory> = trajs
            .iter()
            .filter_map(|t| t.as_ref().ok().cloned())
            .collect();
        if !done.is_empty() {
            run.terminal = Some(terminal_error_stats(
                &done,
                &z_star,
                config.window_fraction,
                primal_distance,
            )?);
            let env = Envelope::of(&done, |t, k| {
                log_distance(primal_distance(&t.states[k], &z_star))
            })?;
            let name = format!("summary_{}.csv", run.label);
            env.write_csv(&dir.join(&name))?;
            report.files.push(name);
            let first = &done[0];
            paths.push(Series::new(
                format!("kd = {}", gains.kd),
                first.states.iter().map(|s| s.x[0]).collect(),
                first.states.iter().map(|s| s.x[1]).collect(),
            ));
        }
        for (i, t) in trajs.iter().enumerate().take(config.trajectory_csv_limit) {
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

    if !paths.is_empty() {
        let fig = phase_figure(
            &inst,
            &objective,
            &reference,
            paths,
            config.integrator.noise_bound,
        )?;
        plot::emit_plot(&fig, &dir.join("fig_bilevel.svg"))?;
        report.files.push("fig_bilevel.svg".into());
    }
    report.finalize();
    report.write(dir)?;
    Ok(report)
}

fn phase_figure(
    inst: &BilevelInstance,
    objective: &dyn Objective,
    reference: &BilevelReference,
    mut paths: Vec<Series>,
    noise_bound: f64,
) -> Result<Figure> {
    let xs = paths
        .iter()
        .flat_map(|s| s.x.iter())
        .copied()
        .chain([reference.x]);
    let (x_lo, x_hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    let ys = paths
        .iter()
        .flat_map(|s| s.y.iter())
        .copied()
        .chain([reference.y]);
    let (y_lo, y_hi) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    let pad = |lo: f64, hi: f64| {
        let p = 0.1 * (hi - lo).max(1e-3);
        (lo - p, hi + p)
    };
    let (xr, yr) = (pad(x_lo, x_hi), pad(y_lo, y_hi));
    let contours = Contours::sample(xr, yr, 60, 60, 12, |x, y| objective.value(&[x, y]));

    // follower optimality line, clipped to the frame
    let y_of = |x: f64| -> Result<f64> { Ok(inst.lower_level_solution(&[x])?[0]) };
    let (ya, yb) = (y_of(xr.0)?, y_of(xr.1)?);
    let line: Vec<(f64, f64)> = (0..=50)
        .map(|k| {
            let t = k as f64 / 50.0;
            (xr.0 + (xr.1 - xr.0) * t, ya + (yb - ya) * t)
        })
        .filter(|(_, y)| (yr.0..=yr.1).contains(y))
        .collect();
    if line.len() >= 2 {
        paths.push(Series::new(
            "follower optimality",
            line.iter().map(|p| p.0).collect(),
            line.iter().map(|p| p.1).collect(),
        ));
    }
    Ok(Figure {
        title: format!("Bilevel trajectories, W = {noise_bound}"),
        x_label: "x (leader)".into(),
        y_label: "y (follower)".into(),
        log_y: false,
        series: paths,
        contours: Some(contours),
        markers: vec![Marker {
            label: "reference".into(),
            x: reference.x,
            y: reference.y,
        }],
    })
}
