//! Without derivative action the PID flow is the PI multiplier flow in
//! shifted coordinates `ξ = λ − kp h(x)`. Their Euler iterates coincide
//! step for step up to rounding.
//!
//! cargo run --example conjugacy

use saddleflow::flow::{transform_t, Gains, PiCmo, PidSpf, SaddleState};
use saddleflow::integrate::{euler_integrate, IntegratorConfig};
use saddleflow::linalg;
use saddleflow::problem::generate_qp;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let qp = generate_qp(10, 2, 3.0, 4.0, 11)?;
    let problem = qp.problem();
    let gains = Gains::new(15.0, 100.0, 0.0)?;
    let x0 = vec![1.0; 10];
    let l0 = vec![0.5, -0.5];
    let cfg = IntegratorConfig {
        dt: 0.01,
        horizon: 20.0,
        ..Default::default()
    };

    let original = euler_integrate(
        &PiCmo::new(problem.clone(), gains)?,
        &SaddleState::new(x0.clone(), l0.clone()),
        &cfg,
    )?;
    let shifted = euler_integrate(
        &PidSpf::new(problem.clone(), gains)?,
        &transform_t(&gains, &problem, &x0, &l0),
        &cfg,
    )?;

    let mut worst: f64 = 0.0;
    for (a, b) in original.states.iter().zip(&shifted.states) {
        let mapped = transform_t(&gains, &problem, &a.x, &a.xi);
        worst = worst.max(linalg::norm2(&linalg::sub(&mapped.stacked(), &b.stacked())));
    }
    println!(
        "{} steps, largest gap between T(original) and shifted iterates: {worst:.2e}",
        original.len() - 1
    );
    Ok(())
}
