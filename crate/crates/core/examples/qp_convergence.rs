//! Exponential convergence of the PID flow on a random equality-constrained
//! QP, compared against the certified envelope `e^{-ct}`.
//!
//! cargo run --release --example qp_convergence

use saddleflow::certificate::certificate_affine;
use saddleflow::experiments::{initial_state, simulate_qp};
use saddleflow::flow::{Gains, SaddleState};
use saddleflow::integrate::IntegratorConfig;
use saddleflow::problem::{generate_qp, kkt_solve};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = 0;
    let qp = generate_qp(10, 2, 3.0, 4.0, seed)?;
    let (x_star, l_star) = kkt_solve(&qp)?;
    let z_star = SaddleState::new(x_star, l_star);
    let integrator = IntegratorConfig {
        dt: 0.01,
        horizon: 20.0,
        record_every: 100,
        seed,
        ..Default::default()
    };

    for kd in [0.0, 4.0, 8.0] {
        let gains = Gains::new(15.0, 100.0, kd)?;
        let rate = certificate_affine(&qp, &gains)?.rate;
        let sim = simulate_qp(&qp, &z_star, gains, &integrator, 10, (0.0, 2.0), 100, seed)?;
        println!(
            "{}  c = {rate:.4}  worst sampled mu_P = {:.4}",
            gains.label(),
            sim.contraction.worst_lognorm
        );
        let trajs = sim.completed();
        let first = &trajs[0];
        let d0 = sim.certificate.distance(&first.states[0], &z_star);
        for (t, s) in first.times.iter().zip(&first.states) {
            let d = sim.certificate.distance(s, &z_star);
            println!(
                "  t = {t:5.1}  |z - z*|_P = {d:.3e}  envelope = {:.3e}",
                d0 * (-rate * t).exp()
            );
        }
    }

    let z0 = initial_state(seed, 0, 10, 2, 0.0, 2.0);
    println!("first initial state x[0..3] = {:?}", &z0.x[..3]);
    Ok(())
}
