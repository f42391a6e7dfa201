//! Noisy scalar bilevel problem: the follower's optimality condition is
//! enforced as a constraint and measured with bounded noise. Larger
//! derivative gains damp the noise and end closer to the leader's optimum.
//!
//! cargo run --release --example bilevel

use saddleflow::experiments::bilevel::{primal_distance, simulate_bilevel};
use saddleflow::experiments::bilevel_reference;
use saddleflow::flow::{AffinePidSpf, Gains};
use saddleflow::integrate::{terminal_error_stats, IntegratorConfig};
use saddleflow::problem::BilevelInstance;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let inst = BilevelInstance::scalar_default();
    let reference = bilevel_reference(&inst)?;
    println!(
        "reference: x = {:.6}, y = {:.6}, multiplier = {:.6}, KKT residual = {:.1e}",
        reference.x, reference.y, reference.multiplier, reference.kkt_residual
    );
    let z_star = reference.state();
    let problem = inst.problem()?;
    let integrator = IntegratorConfig {
        dt: 0.01,
        horizon: 20.0,
        record_every: 10,
        noise_bound: 0.5,
        ..Default::default()
    };

    for kd in [0.0, 0.1, 5.1, 10.1] {
        let field = AffinePidSpf::from_problem(&problem, Gains::new(15.0, 100.0, kd)?)?;
        let trajs: Vec<_> = simulate_bilevel(&inst, &field, &integrator, 20, (0.0, 2.0), 0)
            .into_iter()
            .collect::<Result<_, _>>()?;
        let stats = terminal_error_stats(&trajs, &z_star, 0.5, primal_distance)?;
        println!(
            "kd = {kd:>5}: terminal distance mean {:.4}  min {:.4}  max {:.4}",
            stats.mean, stats.min, stats.max
        );
    }
    Ok(())
}
