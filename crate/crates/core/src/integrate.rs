//! Forward-Euler trajectories of a [`VectorField`], with optional bounded
//! noise on the constraint measurement.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::certificate::Certificate;
use crate::flow::{SaddleState, VectorField};
use crate::linalg;
use crate::problem::sample_noise;
use crate::rng::{self, Purpose};

#[derive(Debug, Error)]
pub enum IntegrateError {
    #[error("invalid integrator config: {0}")]
    Config(String),
    #[error("state dimension ({0}, {1}) does not match the vector field ({2}, {3})")]
    Dimension(usize, usize, usize, usize),
    #[error("trajectory diverged at step {step} (t = {time})")]
    Divergence { step: usize, time: f64 },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("trajectory csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, IntegrateError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    pub dt: f64,
    pub horizon: f64,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    /// Radius of the ball the constraint noise is drawn from; 0 disables it.
    #[serde(default)]
    pub noise_bound: f64,
    #[serde(default)]
    pub seed: u64,
    /// Noise stream index (one per trajectory).
    #[serde(default)]
    pub stream: u64,
}

fn default_record_every() -> usize {
    1
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            dt: 0.01,
            horizon: 20.0,
            record_every: 1,
            noise_bound: 0.0,
            seed: 0,
            stream: 0,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(IntegrateError::Config(format!(
                "dt must be > 0, got {}",
                self.dt
            )));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(IntegrateError::Config(format!(
                "horizon must be > 0, got {}",
                self.horizon
            )));
        }
        if self.dt > self.horizon {
            return Err(IntegrateError::Config("dt exceeds the horizon".into()));
        }
        if self.record_every == 0 {
            return Err(IntegrateError::Config("record_every must be >= 1".into()));
        }
        if !(self.noise_bound >= 0.0 && self.noise_bound.is_finite()) {
            return Err(IntegrateError::Config(format!(
                "noise bound must be >= 0, got {}",
                self.noise_bound
            )));
        }
        Ok(())
    }

    /// `ceil(horizon / dt)`, ignoring round-off just above an integer.
    pub fn steps(&self) -> usize {
        let r = self.horizon / self.dt;
        let nearest = r.round();
        if (r - nearest).abs() <= 1e-9 * nearest.max(1.0) {
            nearest as usize
        } else {
            r.ceil() as usize
        }
    }
}

/// Recorded samples of one integration run.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<SaddleState>,
    pub constraint_violation: Vec<f64>,
    pub multiplier: Vec<Vec<f64>>,
    pub lyapunov: Option<Vec<f64>>,
    pub weighted_distance: Option<Vec<f64>>,
}

impl Trajectory {
    fn with_capacity(cap: usize) -> Self {
        Self {
            times: Vec::with_capacity(cap),
            states: Vec::with_capacity(cap),
            constraint_violation: Vec::with_capacity(cap),
            multiplier: Vec::with_capacity(cap),
            lyapunov: None,
            weighted_distance: None,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> Option<&SaddleState> {
        self.states.last()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.states.first().map_or((0, 0), SaddleState::dims)
    }
}

/// `z_{k+1} = z_k + dt·F(z_k)`. With a positive noise bound every step
/// draws one `w` (`‖w‖ ≤ W`) and evaluates `F` with `h(x) + w`.
pub fn euler_integrate(
    field: &dyn VectorField,
    z0: &SaddleState,
    config: &IntegratorConfig,
) -> Result<Trajectory> {
    config.validate()?;
    let (n, m) = field.dims();
    if z0.dims() != (n, m) {
        let (a, b) = z0.dims();
        return Err(IntegrateError::Dimension(a, b, n, m));
    }
    if !z0.is_finite() {
        return Err(IntegrateError::Input("initial state is not finite".into()));
    }
    let steps = config.steps();
    let mut traj = Trajectory::with_capacity(steps / config.record_every + 2);
    let mut noise_rng =
        (config.noise_bound > 0.0).then(|| rng::stream(config.seed, Purpose::Noise, config.stream));
    let record = |traj: &mut Trajectory, t: f64, z: &SaddleState, dx: &[f64]| {
        traj.times.push(t);
        traj.constraint_violation
            .push(linalg::norm2(&field.constraint_value(&z.x)));
        traj.multiplier.push(field.multiplier(z, dx));
        traj.states.push(z.clone());
    };

    let mut z = z0.clone();
    for k in 0..steps {
        let t = k as f64 * config.dt;
        let w = noise_rng
            .as_mut()
            .map(|rng| sample_noise(config.noise_bound, m, rng));
        let (dx, dxi) = field.eval(&z, w.as_deref());
        if k % config.record_every == 0 {
            record(&mut traj, t, &z, &dx);
        }
        linalg::axpy(config.dt, &dx, &mut z.x);
        linalg::axpy(config.dt, &dxi, &mut z.xi);
        if !z.is_finite() {
            return Err(IntegrateError::Divergence {
                step: k + 1,
                time: (k + 1) as f64 * config.dt,
            });
        }
    }
    let (dx, _) = field.eval(&z, None);
    record(&mut traj, steps as f64 * config.dt, &z, &dx);
    Ok(traj)
}

/// Fills the Lyapunov and `‖z − z⋆‖_P` series.
pub fn attach_diagnostics(
    mut traj: Trajectory,
    cert: &Certificate,
    z_star: &SaddleState,
) -> Result<Trajectory> {
    if z_star.dims() != (cert.n(), cert.m()) {
        let (a, b) = z_star.dims();
        return Err(IntegrateError::Dimension(a, b, cert.n(), cert.m()));
    }
    if traj.dims() != z_star.dims() && !traj.is_empty() {
        let (a, b) = traj.dims();
        return Err(IntegrateError::Dimension(a, b, cert.n(), cert.m()));
    }
    let dist: Vec<f64> = traj
        .states
        .iter()
        .map(|s| cert.distance(s, z_star))
        .collect();
    traj.lyapunov = Some(dist.iter().map(|d| d * d).collect());
    traj.weighted_distance = Some(dist);
    Ok(traj)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TerminalStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// For each trajectory, averages `distance(z, z⋆)` over the last
/// `window_fraction` of its samples; then mean/min/max across trajectories.
pub fn terminal_error_stats(
    trajs: &[Trajectory],
    z_star: &SaddleState,
    window_fraction: f64,
    distance: impl Fn(&SaddleState, &SaddleState) -> f64,
) -> Result<TerminalStats> {
    if trajs.is_empty() {
        return Err(IntegrateError::Input("no trajectories".into()));
    }
    if !(window_fraction > 0.0 && window_fraction <= 1.0) {
        return Err(IntegrateError::Input(format!(
            "window fraction must be in (0, 1], got {window_fraction}"
        )));
    }
    let mut per_traj = Vec::with_capacity(trajs.len());
    for traj in trajs {
        if traj.is_empty() {
            return Err(IntegrateError::Input("empty trajectory".into()));
        }
        let len = traj.len();
        let window = ((len as f64 * window_fraction).ceil() as usize).clamp(1, len);
        let tail = &traj.states[len - window..];
        let avg = tail.iter().map(|s| distance(s, z_star)).sum::<f64>() / window as f64;
        per_traj.push(avg);
    }
    Ok(TerminalStats {
        mean: per_traj.iter().sum::<f64>() / per_traj.len() as f64,
        min: per_traj.iter().copied().fold(f64::INFINITY, f64::min),
        max: per_traj.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// [`terminal_error_stats`] in the certificate's `‖·‖_P`.
pub fn terminal_error_stats_weighted(
    trajs: &[Trajectory],
    cert: &Certificate,
    z_star: &SaddleState,
    window_fraction: f64,
) -> Result<TerminalStats> {
    terminal_error_stats(trajs, z_star, window_fraction, |s, r| cert.distance(s, r))
}

// ---- CSV ----

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn csv_header(n: usize, m: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((0..n).map(|i| format!("x_{i}")));
    h.extend((0..m).map(|i| format!("xi_{i}")));
    h.extend(
        ["constraint_violation", "lyapunov", "weighted_distance"]
            .iter()
            .map(|s| s.to_string()),
    );
    h
}

/// Writes `t,x_*,xi_*,constraint_violation,lyapunov,weighted_distance`;
/// absent diagnostic series are left empty.
pub fn write_trajectory_csv<W: Write>(traj: &Trajectory, out: W) -> Result<()> {
    let (n, m) = traj.dims();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(csv_header(n, m))?;
    let opt = |series: &Option<Vec<f64>>, k: usize| {
        series.as_ref().map_or(String::new(), |s| fmt_f64(s[k]))
    };
    for k in 0..traj.len() {
        let s = &traj.states[k];
        let mut row = Vec::with_capacity(n + m + 4);
        row.push(fmt_f64(traj.times[k]));
        row.extend(s.x.iter().chain(&s.xi).map(|v| fmt_f64(*v)));
        row.push(fmt_f64(traj.constraint_violation[k]));
        row.push(opt(&traj.lyapunov, k));
        row.push(opt(&traj.weighted_distance, k));
        w.write_record(&row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Parses a file written by [`write_trajectory_csv`]. Multipliers are not
/// stored and come back empty.
pub fn read_trajectory_csv<R: Read>(input: R) -> Result<Trajectory> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    let n = headers.iter().filter(|h| h.starts_with("x_")).count();
    let m = headers.iter().filter(|h| h.starts_with("xi_")).count();
    if headers.len() != n + m + 4 {
        return Err(IntegrateError::Input("unexpected trajectory header".into()));
    }
    let parse = |s: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|e| IntegrateError::Input(format!("bad number {s:?}: {e}")))
    };
    let mut traj = Trajectory::with_capacity(0);
    let mut lyap = Vec::new();
    let mut dist = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let vals: Vec<&str> = rec.iter().collect();
        traj.times.push(parse(vals[0])?);
        let x = vals[1..1 + n]
            .iter()
            .map(|s| parse(s))
            .collect::<Result<Vec<_>>>()?;
        let xi = vals[1 + n..1 + n + m]
            .iter()
            .map(|s| parse(s))
            .collect::<Result<Vec<_>>>()?;
        traj.states.push(SaddleState::new(x, xi));
        traj.constraint_violation.push(parse(vals[1 + n + m])?);
        traj.multiplier.push(Vec::new());
        if !vals[2 + n + m].is_empty() {
            lyap.push(parse(vals[2 + n + m])?);
        }
        if !vals[3 + n + m].is_empty() {
            dist.push(parse(vals[3 + n + m])?);
        }
    }
    if !lyap.is_empty() {
        traj.lyapunov = Some(lyap);
    }
    if !dist.is_empty() {
        traj.weighted_distance = Some(dist);
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certificate::certificate_affine;
    use crate::flow::{AffinePidSpf, Gains};
    use crate::problem::{generate_qp, kkt_solve};
    use approx::assert_abs_diff_eq;

    /// ż = −z in the primal slot, zero dual dynamics.
    struct Decay;
    impl VectorField for Decay {
        fn dims(&self) -> (usize, usize) {
            (1, 1)
        }
        fn eval(&self, s: &SaddleState, _w: Option<&[f64]>) -> (Vec<f64>, Vec<f64>) {
            (vec![-s.x[0]], vec![0.0])
        }
        fn constraint_value(&self, x: &[f64]) -> Vec<f64> {
            x.to_vec()
        }
        fn multiplier(&self, s: &SaddleState, _dx: &[f64]) -> Vec<f64> {
            s.xi.clone()
        }
    }

    struct Still;
    impl VectorField for Still {
        fn dims(&self) -> (usize, usize) {
            (2, 1)
        }
        fn eval(&self, _s: &SaddleState, _w: Option<&[f64]>) -> (Vec<f64>, Vec<f64>) {
            (vec![0.0, 0.0], vec![0.0])
        }
        fn constraint_value(&self, x: &[f64]) -> Vec<f64> {
            vec![x[0]]
        }
        fn multiplier(&self, s: &SaddleState, _dx: &[f64]) -> Vec<f64> {
            s.xi.clone()
        }
    }

    /// Blows up: ẋ = x².
    struct Blowup;
    impl VectorField for Blowup {
        fn dims(&self) -> (usize, usize) {
            (1, 1)
        }
        fn eval(&self, s: &SaddleState, _w: Option<&[f64]>) -> (Vec<f64>, Vec<f64>) {
            (vec![s.x[0] * s.x[0] * 1e100], vec![0.0])
        }
        fn constraint_value(&self, x: &[f64]) -> Vec<f64> {
            x.to_vec()
        }
        fn multiplier(&self, s: &SaddleState, _dx: &[f64]) -> Vec<f64> {
            s.xi.clone()
        }
    }

    #[test]
    fn zero_field_is_constant() {
        let z0 = SaddleState::new(vec![1.0, 2.0], vec![3.0]);
        let cfg = IntegratorConfig {
            dt: 0.1,
            horizon: 1.0,
            ..Default::default()
        };
        let t = euler_integrate(&Still, &z0, &cfg).unwrap();
        assert_eq!(t.len(), 11);
        assert!(t.states.iter().all(|s| s == &z0));
        assert!(t.times.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(t.times[0], 0.0);
    }

    #[test]
    fn one_euler_step() {
        let cfg = IntegratorConfig {
            dt: 0.1,
            horizon: 0.1,
            ..Default::default()
        };
        let t = euler_integrate(&Decay, &SaddleState::new(vec![1.0], vec![0.0]), &cfg).unwrap();
        assert_eq!(t.len(), 2);
        assert_abs_diff_eq!(t.states[1].x[0], 0.9, epsilon = 1e-15);
    }

    #[test]
    fn step_count_and_recording() {
        let cfg = IntegratorConfig {
            dt: 0.01,
            horizon: 20.0,
            record_every: 10,
            ..Default::default()
        };
        assert_eq!(cfg.steps(), 2000);
        let t = euler_integrate(&Decay, &SaddleState::new(vec![1.0], vec![0.0]), &cfg).unwrap();
        assert_eq!(t.len(), 201);
        assert_abs_diff_eq!(*t.times.last().unwrap(), 20.0, epsilon = 1e-12);
        let odd = IntegratorConfig {
            dt: 0.3,
            horizon: 1.0,
            ..Default::default()
        };
        assert_eq!(odd.steps(), 4);
    }

    #[test]
    fn config_validation() {
        let ok = IntegratorConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            IntegratorConfig { dt: 0.0, ..ok },
            IntegratorConfig {
                dt: 2.0,
                horizon: 1.0,
                ..ok
            },
            IntegratorConfig {
                record_every: 0,
                ..ok
            },
            IntegratorConfig {
                noise_bound: -1.0,
                ..ok
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn divergence_reports_step() {
        let cfg = IntegratorConfig {
            dt: 0.1,
            horizon: 10.0,
            ..Default::default()
        };
        let err =
            euler_integrate(&Blowup, &SaddleState::new(vec![1e200], vec![0.0]), &cfg).unwrap_err();
        assert!(
            matches!(err, IntegrateError::Divergence { step: 1, .. }),
            "{err}"
        );
        let err = euler_integrate(&Blowup, &SaddleState::new(vec![1.0, 2.0], vec![0.0]), &cfg)
            .unwrap_err();
        assert!(matches!(err, IntegrateError::Dimension(..)));
    }

    fn qp_setup(kd: f64) -> (AffinePidSpf, Certificate, SaddleState, SaddleState) {
        let qp = generate_qp(10, 2, 3.0, 4.0, 0).unwrap();
        let g = Gains::new(15.0, 100.0, kd).unwrap();
        let field = AffinePidSpf::from_problem(&qp.problem(), g).unwrap();
        let cert = certificate_affine(&qp, &g).unwrap();
        let (x, l) = kkt_solve(&qp).unwrap();
        let z0 = SaddleState::new(vec![1.5; 10], vec![0.2, 1.9]);
        (field, cert, SaddleState::new(x, l), z0)
    }

    #[test]
    fn qp_trajectory_decays_at_certified_rate() {
        for kd in [0.0, 4.0] {
            let (field, cert, z_star, z0) = qp_setup(kd);
            let t = euler_integrate(&field, &z0, &IntegratorConfig::default()).unwrap();
            let t = attach_diagnostics(t, &cert, &z_star).unwrap();
            let d = t.weighted_distance.as_ref().unwrap();
            let l = t.lyapunov.as_ref().unwrap();
            let c = cert.rate;
            for k in 0..t.len() {
                assert!(d[k] <= (-0.9 * c * t.times[k]).exp() * d[0] * (1.0 + 1e-12));
                assert_abs_diff_eq!(d[k] * d[k], l[k], epsilon = 1e-9 * l[k].max(1e-300));
            }
            // per-step decay of V with δ = 0.1c
            for k in 1..t.len() {
                let dt = t.times[k] - t.times[k - 1];
                assert!(l[k] <= l[k - 1] * (-2.0 * 0.9 * c * dt).exp() + 1e-24);
            }
        }
    }

    #[test]
    fn diagnostics_vanish_at_equilibrium() {
        let (field, cert, z_star, _) = qp_setup(4.0);
        let cfg = IntegratorConfig {
            horizon: 1.0,
            ..Default::default()
        };
        let t = euler_integrate(&field, &z_star, &cfg).unwrap();
        let t = attach_diagnostics(t, &cert, &z_star).unwrap();
        assert!(t.weighted_distance.unwrap().iter().all(|d| *d < 1e-12));
        assert!(t.lyapunov.unwrap().iter().all(|v| *v < 1e-24));
        assert!(t.constraint_violation.iter().all(|v| *v < 1e-12));
    }

    #[test]
    fn noise_free_and_zero_bound_paths_coincide() {
        let (field, _, _, z0) = qp_setup(4.0);
        let base = IntegratorConfig {
            horizon: 2.0,
            ..Default::default()
        };
        let a = euler_integrate(&field, &z0, &base).unwrap();
        let b = euler_integrate(
            &field,
            &z0,
            &IntegratorConfig {
                seed: 77,
                stream: 3,
                ..base
            },
        )
        .unwrap();
        assert_eq!(a, b);
        let noisy = IntegratorConfig {
            noise_bound: 0.5,
            seed: 1,
            ..base
        };
        let c = euler_integrate(&field, &z0, &noisy).unwrap();
        let d = euler_integrate(&field, &z0, &noisy).unwrap();
        assert_eq!(c, d);
        assert_ne!(a, c);
    }

    #[test]
    fn terminal_stats_examples() {
        let (field, cert, z_star, z0) = qp_setup(0.0);
        let cfg = IntegratorConfig {
            horizon: 0.5,
            ..Default::default()
        };
        let still = euler_integrate(&field, &z_star, &cfg).unwrap();
        let s = terminal_error_stats_weighted(&[still], &cert, &z_star, 0.5).unwrap();
        assert!(s.mean < 1e-12 && s.min < 1e-12 && s.max < 1e-12);

        let moving = euler_integrate(&field, &z0, &cfg).unwrap();
        let s =
            terminal_error_stats_weighted(&[moving.clone(), moving], &cert, &z_star, 0.2).unwrap();
        assert_eq!(s.mean, s.min);
        assert_eq!(s.min, s.max);
        assert!(s.mean > 0.0);

        assert!(terminal_error_stats_weighted(&[], &cert, &z_star, 0.5).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let (field, cert, z_star, z0) = qp_setup(8.0);
        let cfg = IntegratorConfig {
            horizon: 1.0,
            record_every: 7,
            ..Default::default()
        };
        let t = euler_integrate(&field, &z0, &cfg).unwrap();
        let t = attach_diagnostics(t, &cert, &z_star).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&t, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,x_0,x_1,x_2,x_3,x_4,x_5,x_6,x_7,x_8,x_9,xi_0,xi_1,constraint_violation,lyapunov,weighted_distance\n"));
        let back = read_trajectory_csv(buf.as_slice()).unwrap();
        assert_eq!(back.times, t.times);
        assert_eq!(back.states, t.states);
        assert_eq!(back.constraint_violation, t.constraint_violation);
        assert_eq!(back.lyapunov, t.lyapunov);
        assert_eq!(back.weighted_distance, t.weighted_distance);

        let bare = euler_integrate(&field, &z0, &cfg).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&bare, &mut buf).unwrap();
        let back = read_trajectory_csv(buf.as_slice()).unwrap();
        assert!(back.lyapunov.is_none() && back.weighted_distance.is_none());
    }
}
