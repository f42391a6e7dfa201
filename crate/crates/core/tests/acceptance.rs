//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits non-zero if any fails.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use saddleflow::certificate::{
    affine_flow_jacobian, certificate_general, flow_jacobian_fd, lmi_check, saddle_matrix,
    sample_certificate_input, sample_conforming, verify_flow_contraction_detailed,
};
use saddleflow::experiments::bilevel::{bilevel_reference, primal_distance, simulate_bilevel};
use saddleflow::experiments::qp::{decay_bound_holds, simulate_qp};
use saddleflow::experiments::{run_bilevel_experiment, run_qp_experiment, ExperimentConfig};
use saddleflow::flow::{
    augmented_lagrangian, metric_apply_inverse_with, pid_spf_rhs, transform_t, AffinePidSpf, Gains,
    MetricSolve, PiCmo, PidSpf, SaddleState,
};
use saddleflow::integrate::{euler_integrate, terminal_error_stats, IntegratorConfig};
use saddleflow::linalg::{self, Matrix};
use saddleflow::problem::{
    generate_qp_indexed, gradient_fd_error, jacobian_fd_error, kkt_solve, BilevelInstance,
    QpInstance,
};

type Outcome = Result<String, String>;

const N: usize = 10;
const M: usize = 2;
const RHO: f64 = 3.0;
const LSMOOTH: f64 = 4.0;
const PAPER_KD: [f64; 3] = [0.0, 4.0, 8.0];

fn gains(kd: f64) -> Gains {
    Gains::new(15.0, 100.0, kd).unwrap()
}

fn qp(index: u64) -> QpInstance {
    generate_qp_indexed(N, M, RHO, LSMOOTH, 2024, index).unwrap()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s, || {
        format!("runtime {:.2}s exceeds {limit_s}s", elapsed.as_secs_f64())
    })
}

/// 1. The KKT point is an equilibrium of the flow.
fn equilibrium_coincidence() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let qp = qp(i);
        let (x, lambda) = kkt_solve(&qp).map_err(|e| e.to_string())?;
        let problem = qp.problem();
        for kd in PAPER_KD {
            let g = gains(kd);
            let z = transform_t(&g, &problem, &x, &lambda);
            let (dx, dxi) = pid_spf_rhs(&problem, &g, &z).map_err(|e| e.to_string())?;
            let norm = linalg::norm2(&dx).hypot(linalg::norm2(&dxi));
            worst = worst.max(norm);
        }
    }
    ensure(worst <= 1e-9, || format!("‖F(z⋆)‖ = {worst:e}"))?;
    within(start.elapsed(), 5.0)?;
    Ok(format!("max ‖F(z⋆)‖ = {worst:.2e} over 50 QPs × 3 gains"))
}

/// 2. The general certificate satisfies its LMI on random conforming blocks.
fn lemma_property_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = f64::NEG_INFINITY;
    for trial in 0..500 {
        let input = sample_certificate_input(&mut rng);
        let n = rng.random_range(1..=6);
        let m = rng.random_range(1..=n);
        let (mm, bb, aa) = sample_conforming(&mut rng, &input, n, m);
        let (alpha, rate) = certificate_general(&input).map_err(|e| e.to_string())?;
        let p = Matrix::block2x2(
            &mm,
            &aa.transpose().scale(alpha),
            &aa.scale(alpha),
            &Matrix::identity(m).scale(input.tau),
        );
        linalg::cholesky(&p).map_err(|e| format!("trial {trial}: P not positive definite: {e}"))?;
        let s = saddle_matrix(&mm, &bb, &aa, input.tau).map_err(|e| e.to_string())?;
        let check = lmi_check(&s, &p, rate).map_err(|e| e.to_string())?;
        ensure(check.margin <= 1e-8, || {
            format!("trial {trial}: margin {:e} ({input:?})", check.margin)
        })?;
        worst = worst.max(check.margin);
    }
    within(start.elapsed(), 30.0)?;
    Ok(format!("500 draws, worst margin {worst:.3e}"))
}

/// 3. Sampled log-norms of the flow Jacobian respect the certified rate.
fn theorem_verification() -> Outcome {
    let mut worst_excess = f64::NEG_INFINITY;
    let mut worst_spread: f64 = 0.0;
    for i in 0..20 {
        let qp = qp(i);
        for kd in PAPER_KD {
            let s = verify_flow_contraction_detailed(&qp, &gains(kd), 1000, i)
                .map_err(|e| e.to_string())?;
            worst_excess = worst_excess.max(s.worst_lognorm + s.rate);
            worst_spread = worst_spread.max(s.spread());
        }
    }
    ensure(worst_excess <= 1e-8, || format!("μ + c = {worst_excess:e}"))?;
    ensure(worst_spread <= 1e-10, || format!("spread {worst_spread:e}"))?;
    Ok(format!(
        "max(μ + c) = {worst_excess:.3e}, spread {worst_spread:.1e}"
    ))
}

/// 4. Euler trajectories decay at 90% of the certified rate.
fn trajectory_decay() -> Outcome {
    let start = Instant::now();
    let qp = qp(0);
    let (x, l) = kkt_solve(&qp).map_err(|e| e.to_string())?;
    let z_star = SaddleState::new(x, l);
    let cfg = IntegratorConfig {
        dt: 0.01,
        horizon: 20.0,
        record_every: 1,
        ..Default::default()
    };
    let mut rates = Vec::new();
    for kd in PAPER_KD {
        let sim = simulate_qp(&qp, &z_star, gains(kd), &cfg, 50, (0.0, 2.0), 10, 11)
            .map_err(|e| e.to_string())?;
        let done = sim.completed();
        ensure(done.len() == 50, || {
            format!("kd = {kd}: {} trajectories diverged", 50 - done.len())
        })?;
        let bad = done
            .iter()
            .filter(|t| !decay_bound_holds(t, sim.certificate.rate))
            .count();
        ensure(bad == 0, || {
            format!("kd = {kd}: {bad} trajectories violate the bound")
        })?;
        rates.push(format!("{:.3}", sim.certificate.rate));
    }
    within(start.elapsed(), 60.0)?;
    Ok(format!("150 trajectories, c = [{}]", rates.join(", ")))
}

/// 5. With kd = 0 the Euler iterates of both coordinate systems coincide.
fn diffeomorphism_conjugacy() -> Outcome {
    let cfg = IntegratorConfig {
        dt: 0.01,
        horizon: 20.0,
        record_every: 1,
        ..Default::default()
    };
    let g = gains(0.0);
    let mut worst_x: f64 = 0.0;
    let mut worst_l: f64 = 0.0;
    for i in 0..10 {
        let qp = qp(100 + i);
        let problem = qp.problem();
        let mut rng = ChaCha8Rng::seed_from_u64(i);
        let x0: Vec<f64> = (0..N).map(|_| rng.random_range(0.0..2.0)).collect();
        let l0: Vec<f64> = (0..M).map(|_| rng.random_range(0.0..2.0)).collect();
        let cmo = PiCmo::new(problem.clone(), g).map_err(|e| e.to_string())?;
        let spf = PidSpf::new(problem.clone(), g).map_err(|e| e.to_string())?;
        let a = euler_integrate(&cmo, &SaddleState::new(x0.clone(), l0.clone()), &cfg)
            .map_err(|e| e.to_string())?;
        let b = euler_integrate(&spf, &transform_t(&g, &problem, &x0, &l0), &cfg)
            .map_err(|e| e.to_string())?;
        ensure(a.len() == 2001 && b.len() == 2001, || {
            "expected 2000 steps".into()
        })?;
        for (sa, sb) in a.states.iter().zip(&b.states) {
            let dx = linalg::norm2(&linalg::sub(&sa.x, &sb.x));
            let mut gap = linalg::sub(&sa.xi, &sb.xi);
            linalg::axpy(-g.kp, &problem.constraint().value(&sb.x), &mut gap);
            worst_x = worst_x.max(dx);
            worst_l = worst_l.max(linalg::norm2(&gap));
        }
    }
    ensure(worst_x <= 1e-8, || format!("x gap {worst_x:e}"))?;
    ensure(worst_l <= 1e-8, || format!("multiplier gap {worst_l:e}"))?;
    Ok(format!(
        "10 QPs × 2000 steps, x gap {worst_x:.1e}, λ gap {worst_l:.1e}"
    ))
}

/// 6. The derivative gain pulls the velocity towards the constraint tangent space.
fn tangency_bound() -> Outcome {
    let kds = [0.0, 1.0, 10.0, 100.0, 1000.0];
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut checked = 0;
    for i in 0..10 {
        let qp = qp(200 + i);
        let problem = qp.problem();
        let bounds = qp.constraint.gram_bounds();
        for _ in 0..20 {
            let x: Vec<f64> = (0..N).map(|_| rng.random_range(-3.0..3.0)).collect();
            let xi: Vec<f64> = (0..M).map(|_| rng.random_range(-3.0..3.0)).collect();
            let state = SaddleState::new(x.clone(), xi.clone());
            let mut prev = f64::INFINITY;
            for kd in kds {
                let g = gains(kd);
                let (dx, _) = pid_spf_rhs(&problem, &g, &state).map_err(|e| e.to_string())?;
                let lhs = linalg::norm2(&qp.a().matvec(&dx));
                let grad = augmented_lagrangian(&problem, &g, &x, &xi)
                    .map_err(|e| e.to_string())?
                    .grad_x;
                let bound = bounds.upper.sqrt() * linalg::norm2(&grad) / (1.0 + kd * bounds.lower);
                ensure(lhs <= bound * (1.0 + 1e-10) + 1e-10, || {
                    format!("kd = {kd}: {lhs} > {bound}")
                })?;
                ensure(lhs <= prev + 1e-10, || {
                    format!("kd = {kd}: {lhs} > previous {prev}")
                })?;
                prev = lhs;
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} (state, kd) pairs"))
}

/// 7. Bilevel study: convergence without noise, ordering of terminal errors with noise.
fn bilevel_study() -> Outcome {
    let start = Instant::now();
    let inst = BilevelInstance::scalar_default();
    let reference = bilevel_reference(&inst).map_err(|e| e.to_string())?;
    let z_star = reference.state();
    let problem = inst.problem().map_err(|e| e.to_string())?;
    let base = IntegratorConfig {
        dt: 0.01,
        horizon: 20.0,
        record_every: 10,
        ..Default::default()
    };

    let field = AffinePidSpf::from_problem(&problem, gains(0.1)).map_err(|e| e.to_string())?;
    let clean = simulate_bilevel(&inst, &field, &base, 1, (0.0, 2.0), 0);
    let clean = clean
        .into_iter()
        .next()
        .unwrap()
        .map_err(|e| e.to_string())?;
    let err = primal_distance(clean.last().unwrap(), &z_star);
    ensure(err <= 1e-4, || format!("noiseless error {err:e}"))?;

    let noisy = IntegratorConfig {
        noise_bound: 0.5,
        ..base
    };
    let mut stats = Vec::new();
    for kd in [0.0, 0.1, 5.1, 10.1] {
        let field = AffinePidSpf::from_problem(&problem, gains(kd)).map_err(|e| e.to_string())?;
        let trajs: Vec<_> = simulate_bilevel(&inst, &field, &noisy, 20, (0.0, 2.0), 0)
            .into_iter()
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let s = terminal_error_stats(&trajs, &z_star, 0.5, primal_distance)
            .map_err(|e| e.to_string())?;
        stats.push(s.mean);
    }
    ensure(stats[1] > stats[2] && stats[2] > stats[3], || {
        format!("not decreasing: {stats:?}")
    })?;
    ensure(stats[0] > stats[3], || {
        format!("kd = 0 not worse than kd = 10.1: {stats:?}")
    })?;
    within(start.elapsed(), 30.0)?;
    Ok(format!(
        "noiseless error {err:.1e}; terminal means kd 0/0.1/5.1/10.1 = {:.4}/{:.4}/{:.4}/{:.4}",
        stats[0], stats[1], stats[2], stats[3]
    ))
}

/// λ such that `2bP − (PA + AᵀP) ⪰ 0` is feasible, by bisection on b.
fn lognorm_by_bisection(p: &Matrix, a: &Matrix) -> f64 {
    let pa = p.matmul(a);
    let sym = pa.add(&pa.transpose());
    let feasible = |b: f64| {
        let g = p.scale(2.0 * b).sub(&sym).add(&p.scale(1e-13));
        linalg::cholesky(&g.symmetrize()).is_ok()
    };
    let (mut lo, mut hi) = (-1.0, 1.0);
    while feasible(lo) {
        lo *= 2.0;
    }
    while !feasible(hi) {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// 8. Analytic oracles agree with finite differences and alternative solves.
fn oracle_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_fd: f64 = 0.0;
    let mut worst_solve: f64 = 0.0;
    let mut worst_mu: f64 = 0.0;
    let bilevel = BilevelInstance::scalar_default()
        .problem()
        .map_err(|e| e.to_string())?;
    let problems = [qp(300).problem(), qp(301).problem(), bilevel];
    for problem in &problems {
        let n = problem.n();
        for _ in 0..20 {
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            worst_fd = worst_fd.max(gradient_fd_error(problem.objective(), &x));
            let c = problem.constraint();
            worst_fd = worst_fd.max(jacobian_fd_error(|p| c.value(p), &c.jacobian(&x), &x));
            let f = problem.objective();
            if let Some(hess) = f.hessian(&x) {
                worst_fd = worst_fd.max(jacobian_fd_error(|p| f.gradient(p), &hess, &x));
            }
            let g: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            for kd in [0.5, 4.0, 100.0] {
                let gains = gains(kd);
                let w = metric_apply_inverse_with(problem, &gains, &x, &g, MetricSolve::Woodbury);
                let d = metric_apply_inverse_with(problem, &gains, &x, &g, MetricSolve::Dense);
                let rel = linalg::norm2(&linalg::sub(&w, &d)) / linalg::norm2(&d).max(1.0);
                worst_solve = worst_solve.max(rel);
            }
        }
    }
    ensure(worst_fd <= 1e-5, || {
        format!("finite-difference error {worst_fd:e}")
    })?;
    ensure(worst_solve <= 1e-10, || {
        format!("metric solves differ by {worst_solve:e}")
    })?;

    for i in 0..20 {
        let qp = qp(400 + i);
        let g = gains(PAPER_KD[(i % 3) as usize]);
        let cert =
            saddleflow::certificate::certificate_affine(&qp, &g).map_err(|e| e.to_string())?;
        let jac = affine_flow_jacobian(qp.a(), &qp.hessian(), &g).map_err(|e| e.to_string())?;
        let field = AffinePidSpf::from_problem(&qp.problem(), g).map_err(|e| e.to_string())?;
        let z: Vec<f64> = (0..N + M).map(|_| rng.random_range(-2.0..2.0)).collect();
        let fd = flow_jacobian_fd(&field, &SaddleState::from_stacked(&z, N));
        worst_fd = worst_fd.max(fd.sub(&jac).frobenius() / jac.frobenius().max(1.0));
        let mu = linalg::lognorm_weighted(&cert.p, &jac).map_err(|e| e.to_string())?;
        let oracle = lognorm_by_bisection(&cert.p, &jac);
        worst_mu = worst_mu.max((mu - oracle).abs());
    }
    ensure(worst_fd <= 1e-5, || {
        format!("flow Jacobian differs from finite differences by {worst_fd:e}")
    })?;
    ensure(worst_mu <= 1e-6, || {
        format!("log-norm differs from bisection by {worst_mu:e}")
    })?;
    Ok(format!(
        "fd {worst_fd:.1e}, Woodbury vs dense {worst_solve:.1e}, log-norm vs bisection {worst_mu:.1e}"
    ))
}

fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("csv" | "svg")))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

/// 9. Fixed configs give byte-identical CSV and SVG outputs.
fn determinism() -> Outcome {
    let mut compared = 0;
    for make in [
        ExperimentConfig::qp_default,
        ExperimentConfig::bilevel_default,
    ] {
        let mut cfg = make(31);
        cfg.trajectories = 8;
        cfg.integrator.horizon = 5.0;
        cfg.samples = 50;
        let mut runs = Vec::new();
        for _ in 0..2 {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            cfg.output_dir = dir.path().to_path_buf();
            let report = match cfg.kind {
                saddleflow::experiments::ExperimentKind::Qp => run_qp_experiment(&cfg),
                _ => run_bilevel_experiment(&cfg),
            }
            .map_err(|e| e.to_string())?;
            ensure(report.passed, || format!("{:?}", report.failures))?;
            runs.push(artifacts(dir.path()));
        }
        ensure(!runs[0].is_empty(), || "no artifacts written".into())?;
        ensure(runs[0] == runs[1], || {
            format!("{:?} outputs differ between runs", cfg.kind)
        })?;
        compared += runs[0].len();
    }
    Ok(format!(
        "{compared} CSV/SVG files byte-identical across repeated runs"
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("equilibrium coincidence", equilibrium_coincidence),
        ("certificate lemma property suite", lemma_property_suite),
        ("sampled contraction verification", theorem_verification),
        ("trajectory decay at certified rate", trajectory_decay),
        ("diffeomorphism conjugacy", diffeomorphism_conjugacy),
        ("tangency bound", tangency_bound),
        ("bilevel study", bilevel_study),
        ("oracle consistency", oracle_consistency),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {}. {name} ({secs:.2}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {}. {name} ({secs:.2}s): {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
