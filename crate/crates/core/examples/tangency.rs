//! The derivative gain shrinks the constraint-normal part of the velocity:
//! `|A ẋ| <= sqrt(a_max) |∇_x L| / (1 + kd a_min)`.
//!
//! cargo run --example tangency

use saddleflow::flow::{augmented_lagrangian, pid_spf_rhs, Gains, SaddleState};
use saddleflow::linalg;
use saddleflow::problem::generate_qp;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let qp = generate_qp(10, 2, 3.0, 4.0, 5)?;
    let problem = qp.problem();
    let bounds = qp.constraint.gram_bounds();
    let state = SaddleState::new(
        (0..10).map(|i| (i as f64 - 4.5) / 3.0).collect(),
        vec![1.0, -2.0],
    );

    println!("{:>8} {:>12} {:>12}", "kd", "|A dx|", "bound");
    for kd in [0.0, 1.0, 10.0, 100.0, 1000.0] {
        let gains = Gains::new(15.0, 100.0, kd)?;
        let (dx, _) = pid_spf_rhs(&problem, &gains, &state)?;
        let grad = augmented_lagrangian(&problem, &gains, &state.x, &state.xi)?.grad_x;
        let normal = linalg::norm2(&qp.a().matvec(&dx));
        let bound = bounds.upper.sqrt() * linalg::norm2(&grad) / (1.0 + kd * bounds.lower);
        println!("{kd:>8} {normal:>12.4e} {bound:>12.4e}");
    }
    Ok(())
}
