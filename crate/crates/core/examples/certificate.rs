//! Closed-form contraction certificate for a range of derivative gains,
//! checked against the exact LMI on a generated QP.
//!
//! cargo run --example certificate

use saddleflow::certificate::{
    affine_flow_jacobian, certificate_affine, lmi_check, verify_flow_contraction_detailed,
};
use saddleflow::flow::Gains;
use saddleflow::problem::generate_qp;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let qp = generate_qp(10, 2, 3.0, 4.0, 7)?;
    let bounds = qp.constraint.gram_bounds();
    println!(
        "n = 10, m = 2, rho = 3, L = 4, spec(AAᵀ) in [{:.4}, {:.4}]",
        bounds.lower, bounds.upper
    );
    println!(
        "{:>6} {:>12} {:>12} {:>14} {:>14} {:>12}",
        "kd", "alpha", "rate c", "LMI margin", "worst mu_P", "-c"
    );

    for kd in [0.0, 1.0, 4.0, 8.0, 32.0] {
        let gains = Gains::new(15.0, 100.0, kd)?;
        let cert = certificate_affine(&qp, &gains)?;
        let jac = affine_flow_jacobian(qp.a(), &qp.hessian(), &gains)?;
        let lmi = lmi_check(&jac, &cert.p, cert.rate)?;
        let sampled = verify_flow_contraction_detailed(&qp, &gains, 200, 1)?;
        println!(
            "{:>6} {:>12.4e} {:>12.4e} {:>14.4e} {:>14.4e} {:>12.4e}",
            kd, cert.alpha, cert.rate, lmi.margin, sampled.worst_lognorm, -cert.rate
        );
        assert!(lmi.holds() && sampled.certified());
    }
    Ok(())
}
