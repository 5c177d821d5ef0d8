//! Trains the five ablation variants on a rendered dataset and prints the
//! final validation Abs Rel per variant and seed.
//!
//! `cargo run --release --example ablation [train val epochs seeds]`

use ode_depth::ablation::{self, AblationSetup, BACKBONE, DCSPN, FRONT, FULL, IGT};

fn arg(i: usize, default: usize) -> usize {
    std::env::args().nth(i).and_then(|a| a.parse().ok()).unwrap_or(default)
}

fn main() -> ode_depth::Result<()> {
    let mut setup = AblationSetup::default();
    setup.train = arg(1, setup.train);
    setup.val = arg(2, setup.val);
    setup.schedule.epochs = arg(3, setup.schedule.epochs);
    setup.seeds = (0..arg(4, setup.seeds.len()) as u64).collect();
    let dir = std::env::temp_dir().join(format!("ode-ablation-{}", std::process::id()));
    let started = std::time::Instant::now();
    let report = ablation::run(&setup, &dir, &mut |name, seed, row| {
        eprintln!("[{:>6.0}s] {name} seed {seed}: {row}", started.elapsed().as_secs_f64())
    })?;
    std::fs::remove_dir_all(&dir).ok();
    print!("{report}");
    for v in [BACKBONE, FRONT, IGT, DCSPN, FULL] {
        println!("mean {:<8} {:.5}", v.name, report.mean(v.name));
    }
    println!("full vs backbone: {:.1}% lower", 100.0 * report.full_gain());
    let (w, n) = report.wins(IGT.name, FRONT.name);
    println!("igt <= planar on {w}/{n} seeds");
    let (w, n) = report.wins(DCSPN.name, FRONT.name);
    println!("d-cspn <= no cspn on {w}/{n} seeds");
    Ok(())
}
