//! Projecting a task gradient off the pull-back direction.
//!
//! Run with `cargo run --example projection_geometry`.

use digrap::projection::{equivalent_lambda, project_gradient};

fn show(label: &str, g1: &[f64], g2: &[f64], omega: f64) -> digrap::Result<()> {
    let p = project_gradient(g1, g2, omega)?;
    let after: f64 = p.g.iter().zip(g2).map(|(a, b)| a * b).sum();
    let lambda = equivalent_lambda(p.dot, p.reg_norm_sq, omega, p.conflicting);
    println!("{label}");
    println!("  g1 = {g1:?}, g2 = {g2:?}, omega = {omega}");
    println!("  conflicting = {}, g = {:?}", p.conflicting, p.g);
    println!("  g1.g2 = {:+.4}  ->  g.g2 = {:+.4}  (equivalent L2-SP strength {lambda:.4})", p.dot, after);
    Ok(())
}

fn main() -> digrap::Result<()> {
    let g2 = [1.0, 0.0];
    show("agreeing gradients are left alone", &[0.5, 1.0], &g2, 1.0)?;
    show("full projection removes the conflicting component", &[-0.5, 1.0], &g2, 1.0)?;
    show("partial projection keeps (1 - omega) of it", &[-0.5, 1.0], &g2, 0.25)?;
    show("omega = 0 is an unconstrained step", &[-0.5, 1.0], &g2, 0.0)?;
    Ok(())
}
