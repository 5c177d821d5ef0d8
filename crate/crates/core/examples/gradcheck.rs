//! Finite-difference check of every backward pass on micro shapes.
//!
//! `cargo run --release --example gradcheck [target]`

use ode_depth::gradcheck::{self, GradcheckConfig};

fn main() -> ode_depth::Result<()> {
    let target = std::env::args().nth(1).unwrap_or_else(|| "all".into());
    let reports = gradcheck::run(&target, GradcheckConfig::default())?;
    for r in &reports {
        print!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    println!("{} targets, {failed} failed", reports.len());
    if failed > 0 {
        std::process::exit(4);
    }
    Ok(())
}
